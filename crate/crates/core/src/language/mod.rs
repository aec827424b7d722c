//! Tokenizer, caption and VQA templates, and the grounding oracle.

pub mod caption;
pub mod grammar;
pub mod grounding;
pub mod vocab;
pub mod vqa;

pub use caption::{caption_scene, caption_words};
pub use grounding::{judge_answer_words, judge_words, FactError};
pub use vocab::{detokenize, segment_ids, segment_sentences, tokenize, SentenceSpans, TokenSequence, Vocab, EOS, UNK};
pub use vqa::{aggregate_vqa_to_caption, generate_vqa, QaPair, QuestionKind};
