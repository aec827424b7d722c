//! Hard-negative synthesis, the perturbation checker, diff labels and corpus building.

pub mod corpus;
pub mod diff;
pub mod edit;
pub mod taxonomy;

pub use diff::{label_tokens, lcs_alignment};
pub use edit::{apply_edits, check_perturbation, perturb, perturb_response, provenance_labels, Context, Edit, Perturbation, Validity, LABEL_WINDOW};
pub use taxonomy::Taxonomy;
pub use corpus::{build_corpus, read_samples, synthesize_corpus, write_corpus, write_samples, Corpus, CorpusConfig, CorpusStats, LabeledSample, Task};
