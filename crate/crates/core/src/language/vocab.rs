//! Fixed text vocabulary, tokenizer and sentence segmentation.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

const VOCAB_FILE: &str = include_str!("../../assets/vocab.v1.txt");

pub const UNK: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK_WORD: &str = "<unk>";
pub const EOS_WORD: &str = "<eos>";

/// Characters emitted as standalone tokens.
const PUNCTUATION: &[char] = &['.', ',', ':', '"', '?'];

#[derive(Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
    ids: HashMap<&'static str, u32>,
}

impl Vocab {
    /// The shipped vocabulary. Line number (from zero) is the token id.
    pub fn global() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let words: Vec<&'static str> = VOCAB_FILE.lines().collect();
            let ids = words.iter().enumerate().map(|(i, w)| (*w, i as u32)).collect();
            Vocab { words, ids }
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn id_or_unk(&self, word: &str) -> u32 {
        self.id(word).unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &'static str {
        self.words.get(id as usize).copied().unwrap_or(UNK_WORD)
    }
}

/// Token ids together with their canonical surface form.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub text: String,
}

impl TokenSequence {
    pub fn from_ids(tokens: Vec<u32>) -> Self {
        let text = detokenize(&tokens);
        Self { tokens, text }
    }

    pub fn from_words(words: &[&str]) -> Self {
        let vocab = Vocab::global();
        Self::from_ids(words.iter().map(|w| vocab.id_or_unk(w)).collect())
    }

    pub fn words(&self) -> Vec<&'static str> {
        let vocab = Vocab::global();
        self.tokens.iter().map(|&t| vocab.word(t)).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Split text into lowercase words, with punctuation as standalone tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() || PUNCTUATION.contains(&ch) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn tokenize(text: &str) -> TokenSequence {
    let vocab = Vocab::global();
    TokenSequence::from_ids(split_words(text).iter().map(|w| vocab.id_or_unk(w)).collect())
}

/// Canonical surface form: words joined by single spaces.
pub fn detokenize(tokens: &[u32]) -> String {
    let vocab = Vocab::global();
    tokens.iter().map(|&t| vocab.word(t)).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpans {
    pub spans: Vec<(usize, usize)>,
}

impl SentenceSpans {
    pub fn count(&self) -> usize {
        self.spans.len()
    }
}

/// Split after every period; trailing tokens without a period form a final sentence.
pub fn segment_sentences<S: AsRef<str>>(words: &[S]) -> SentenceSpans {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, w) in words.iter().enumerate() {
        if w.as_ref() == "." {
            spans.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < words.len() {
        spans.push((start, words.len()));
    }
    SentenceSpans { spans }
}

/// [`segment_sentences`] over token ids.
pub fn segment_ids(tokens: &[u32]) -> SentenceSpans {
    let vocab = Vocab::global();
    let words: Vec<&str> = tokens.iter().map(|&t| vocab.word(t)).collect();
    segment_sentences(&words)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(ts: &TokenSequence) -> Vec<&'static str> {
        ts.words()
    }

    #[test]
    fn vocabulary_is_well_formed() {
        let v = Vocab::global();
        assert_eq!(v.word(UNK), UNK_WORD);
        assert_eq!(v.word(EOS), EOS_WORD);
        assert_eq!(v.ids.len(), v.len(), "duplicate vocabulary entries");
        for n in 0..=100 {
            assert!(v.id(&n.to_string()).is_some(), "numeral {n} missing");
        }
    }

    #[test]
    fn tokenizes_rule_example() {
        assert_eq!(words(&tokenize("A red mug.")), vec!["a", "red", "mug", "."]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn unknown_words_map_to_unk() {
        assert_eq!(tokenize("a zebra").tokens, vec![Vocab::global().id("a").unwrap(), UNK]);
    }

    #[test]
    fn punctuation_splits() {
        assert_eq!(words(&tokenize("what color, \"red\"?")), vec!["what", "color", ",", "\"", "red", "\"", "?"]);
    }

    #[test]
    fn segments_examples() {
        let s = segment_sentences(&["a", "cat", ".", "a", "dog", "."]);
        assert_eq!(s.spans, vec![(0, 3), (3, 6)]);
        assert_eq!(s.count(), 2);
        assert_eq!(segment_sentences::<&str>(&[]).count(), 0);
        assert_eq!(segment_sentences(&["a", "cat"]).spans, vec![(0, 2)]);
        assert_eq!(segment_sentences(&["a", ".", "b"]).spans, vec![(0, 2), (2, 3)]);
    }
}
