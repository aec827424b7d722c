//! Self-correction: flag responses with a reward model, build guidance, re-decode and
//! judge the result against the scene.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::grounding::{judge_words, FactError};
use crate::language::vocab::{segment_ids, TokenSequence, Vocab, EOS};
use crate::model::infer::argmax;
use crate::model::{decode_caption, forward, Checkpoint, DecodeConstraints, Decoder};
use crate::perturb::LabeledSample;
use crate::scene::Scene;

/// Logit penalty applied to a flagged token when it is re-decoded.
pub const FLAG_PENALTY: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    Tldr,
    Naive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Win,
    Tie,
    Loss,
    NoAttempt,
}

/// Verdict from the error counts before and after; `NoAttempt` when nothing changed.
pub fn verdict(before: usize, after: usize, changed: bool) -> Verdict {
    if !changed {
        Verdict::NoAttempt
    } else if after < before {
        Verdict::Win
    } else if after == before {
        Verdict::Tie
    } else {
        Verdict::Loss
    }
}

/// Every factual error of a caption.
pub fn judge_caption(scene: &Scene, caption: &[u32]) -> Vec<FactError> {
    judge_words(scene, &TokenSequence::from_ids(caption.to_vec()).words())
}

/// Flagged token positions, also grouped by sentence index.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub tokens: Vec<usize>,
    pub by_sentence: Vec<(usize, Vec<usize>)>,
}

impl Flags {
    pub fn new(response: &[u32], mut tokens: Vec<usize>) -> Self {
        tokens.sort_unstable();
        tokens.dedup();
        let mut by_sentence: Vec<(usize, Vec<usize>)> = Vec::new();
        for (si, &(a, b)) in segment_ids(response).spans.iter().enumerate() {
            let inside: Vec<usize> = tokens.iter().copied().filter(|&t| t >= a && t < b).collect();
            if !inside.is_empty() {
                by_sentence.push((si, inside));
            }
        }
        Self { tokens, by_sentence }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flagged {
    /// Index into the input samples.
    pub index: usize,
    pub sample_id: u64,
    pub flags: Flags,
}

/// Samples with at least one token at or below `theta`.
pub fn flag_responses(rm: &Checkpoint, samples: &[LabeledSample], theta: f64) -> Result<Vec<Flagged>> {
    let mut out = Vec::new();
    for (index, s) in samples.iter().enumerate() {
        let pred = forward(rm, &s.m, &s.p, &s.d, 1.0)?.prediction.with_threshold(theta);
        let flagged = pred.flagged();
        if !flagged.is_empty() {
            out.push(Flagged { index, sample_id: s.id, flags: Flags::new(&s.d, flagged) });
        }
    }
    Ok(out)
}

/// Maximal runs of consecutive flagged positions, as text.
fn phrases(words: &[&str], positions: &[usize]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut run: Vec<&str> = Vec::new();
    let mut last = None;
    for &p in positions {
        if last.is_some_and(|l: usize| l + 1 != p) && !run.is_empty() {
            out.push(run.join(" "));
            run.clear();
        }
        run.push(words[p]);
        last = Some(p);
    }
    if !run.is_empty() {
        out.push(run.join(" "));
    }
    out
}

/// Guidance text for a correction attempt.
pub fn build_guidance(prompt: &[u32], caption: &[u32], flags: &Flags, mode: GuidanceMode) -> Result<String> {
    if caption.is_empty() {
        return Err(Error::Empty("caption"));
    }
    if mode == GuidanceMode::Tldr && flags.is_empty() {
        return Err(Error::Empty("flags"));
    }
    let vocab = Vocab::global();
    let words: Vec<&str> = caption.iter().map(|&t| vocab.word(t)).collect();
    let query = prompt.iter().map(|&t| vocab.word(t)).collect::<Vec<_>>().join(" ");
    let mut out = String::new();
    let _ = writeln!(out, "Revise the response so that it agrees with the scene.");
    match mode {
        GuidanceMode::Naive => {
            let _ = writeln!(out, "The response contains at least one error; its location is not given.");
            let _ = writeln!(out, "Rules:");
            let _ = writeln!(out, "1. Edit as little as possible.");
            let _ = writeln!(out, "2. Rewrite a whole sentence only if a small edit cannot fix it.");
            let _ = writeln!(out, "Query: {query}");
            let _ = writeln!(out, "Response: {}", words.join(" "));
        }
        GuidanceMode::Tldr => {
            let _ = writeln!(out, "Some sentences contain marked words that need a second look at the scene.");
            let _ = writeln!(out, "Rules:");
            let _ = writeln!(out, "1. Edit as little as possible.");
            let _ = writeln!(out, "2. Change or delete only the marked words.");
            let _ = writeln!(out, "3. Rewrite a whole sentence only if a small edit cannot fix it, and leave unmarked sentences alone.");
            let _ = writeln!(out, "4. Copy sentences that are not listed below unless an edit elsewhere forces a change.");
            let _ = writeln!(out, "5. A marked word may be right; keep it when it matches the scene.");
            let _ = writeln!(out, "Query: {query}");
            let marked: Vec<String> =
                words.iter().enumerate().map(|(i, w)| if flags.tokens.contains(&i) { format!("[{w}]") } else { w.to_string() }).collect();
            let _ = writeln!(out, "Response: {}", marked.join(" "));
            let mut all: Vec<String> = Vec::new();
            for p in phrases(&words, &flags.tokens) {
                if !all.contains(&p) {
                    all.push(p);
                }
            }
            let _ = writeln!(out, "Check these words: {}.", all.join(", "));
            let spans = segment_ids(caption).spans;
            for (si, positions) in &flags.by_sentence {
                let (a, b) = spans[*si];
                let _ = writeln!(out, "In the sentence \"{}\" check: {}.", words[a..b].join(" "), phrases(&words, positions).join(", "));
            }
        }
    }
    let _ = writeln!(out, "Reply with the corrected response only.");
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub sample_id: u64,
    pub mode: GuidanceMode,
    pub original: String,
    pub flagged: Vec<(usize, Vec<usize>)>,
    pub guidance: String,
    pub corrected: String,
    pub verdict: Verdict,
    pub errors_before: usize,
    pub errors_after: usize,
}

/// Extra tokens a repaired sentence may grow by before it is closed.
const REPAIR_SLACK: usize = 8;

/// Rewrite the flagged sentences of `original` and keep the rest verbatim.
///
/// A flagged sentence keeps its words up to the first flag; from there it is re-decoded
/// until its full stop, with each flagged original word banned at its position. When the
/// first word of a sentence is flagged the generator may end there instead, which drops
/// the sentence.
pub fn repair(generator: &Checkpoint, m: &[u32], p: &[u32], original: &[u32], flags: &Flags) -> Result<TokenSequence> {
    let vocab = Vocab::global();
    let stop = vocab.id(".").expect("full stop is in the vocabulary");
    let mut dec = Decoder::new(generator, m, p)?;
    for &(a, b) in &segment_ids(original).spans {
        let flagged: Vec<usize> = flags.tokens.iter().copied().filter(|&t| t >= a && t < b).collect();
        let Some(&first) = flagged.first() else {
            for &t in &original[a..b] {
                if !dec.has_room() {
                    return Ok(dec.finish());
                }
                dec.push(t)?;
            }
            continue;
        };
        for &t in &original[a..first] {
            if !dec.has_room() {
                return Ok(dec.finish());
            }
            dec.push(t)?;
        }
        let cap = (b - a) + REPAIR_SLACK;
        let mut k = first;
        loop {
            if !dec.has_room() {
                return Ok(dec.finish());
            }
            let mut logits = dec.logits();
            if flagged.contains(&k) {
                logits[original[k] as usize] += FLAG_PENALTY;
            }
            if k != a {
                logits[EOS as usize] += FLAG_PENALTY;
            }
            let token = if k - a + 1 >= cap { stop } else { argmax(&logits) };
            if token == EOS {
                break;
            }
            dec.push(token)?;
            k += 1;
            if token == stop {
                break;
            }
        }
    }
    Ok(dec.finish())
}

/// Correct a flagged caption with `generator` and judge the result against the scene.
///
/// Tldr mode applies [`repair`]. Naive mode only knows that the caption is wrong
/// somewhere, so it regenerates the caption from scratch.
pub fn self_correct(generator: &Checkpoint, sample: &LabeledSample, flags: &Flags, mode: GuidanceMode) -> Result<CorrectionRecord> {
    let scene = sample.scene()?;
    let original = &sample.d;
    let guidance = build_guidance(&sample.p, original, flags, mode)?;
    let corrected = match mode {
        GuidanceMode::Naive => decode_caption(generator, &sample.m, &sample.p, &DecodeConstraints::default(), generator.config.max_len)?,
        GuidanceMode::Tldr => repair(generator, &sample.m, &sample.p, original, flags)?,
    };
    let before = judge_caption(&scene, original).len();
    let after = judge_caption(&scene, &corrected.tokens).len();
    Ok(CorrectionRecord {
        sample_id: sample.id,
        mode,
        original: TokenSequence::from_ids(original.clone()).text,
        flagged: flags.by_sentence.clone(),
        guidance,
        verdict: verdict(before, after, corrected.tokens != *original),
        corrected: corrected.text,
        errors_before: before,
        errors_after: after,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSummary {
    pub samples: usize,
    pub flagged: usize,
    pub attempted: usize,
    pub win: usize,
    pub tie: usize,
    pub loss: usize,
}

impl CorrectionSummary {
    pub fn from_records(samples: usize, records: &[CorrectionRecord]) -> Self {
        let count = |v| records.iter().filter(|r| r.verdict == v).count();
        Self {
            samples,
            flagged: records.len(),
            attempted: records.len() - count(Verdict::NoAttempt),
            win: count(Verdict::Win),
            tie: count(Verdict::Tie),
            loss: count(Verdict::Loss),
        }
    }
}

/// Side-by-side summary of both guidance modes.
pub fn summary_table(rows: &[(GuidanceMode, CorrectionSummary)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<8} {:>8} {:>8} {:>10} {:>5} {:>5} {:>5}", "guidance", "samples", "flagged", "corrected", "win", "tie", "loss");
    for (mode, s) in rows {
        let name = match mode {
            GuidanceMode::Tldr => "tldr",
            GuidanceMode::Naive => "naive",
        };
        let _ = writeln!(out, "{name:<8} {:>8} {:>8} {:>10} {:>5} {:>5} {:>5}", s.samples, s.flagged, s.attempted, s.win, s.tie, s.loss);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::vocab::tokenize;
    use crate::model::ModelConfig;
    use crate::perturb::{build_corpus, CorpusConfig};

    #[test]
    fn verdict_rule() {
        assert_eq!(verdict(2, 0, true), Verdict::Win);
        assert_eq!(verdict(1, 1, true), Verdict::Tie);
        assert_eq!(verdict(1, 3, true), Verdict::Loss);
        assert_eq!(verdict(1, 0, false), Verdict::NoAttempt);
    }

    #[test]
    fn flags_group_by_sentence() {
        let d = tokenize("a red cat is at row 1 column 2 . the sign says stop .").tokens;
        let f = Flags::new(&d, vec![13, 1, 1]);
        assert_eq!(f.tokens, vec![1, 13]);
        assert_eq!(f.by_sentence, vec![(0, vec![1]), (1, vec![13])]);
    }

    #[test]
    fn guidance_templates() {
        let p = tokenize("describe the scene .").tokens;
        let d = tokenize("a red cat is at row 1 column 2 . the sign says stop .").tokens;
        let f = Flags::new(&d, vec![1]);
        let g = build_guidance(&p, &d, &f, GuidanceMode::Tldr).unwrap();
        assert!(g.contains("\"a red cat is at row 1 column 2 .\""));
        assert!(g.contains("Check these words: red."));
        assert_eq!(g, build_guidance(&p, &d, &f, GuidanceMode::Tldr).unwrap());
        let other = build_guidance(&p, &d, &Flags::new(&d, vec![1, 2]), GuidanceMode::Tldr).unwrap();
        assert_ne!(g, other);

        let n = build_guidance(&p, &d, &f, GuidanceMode::Naive).unwrap();
        assert!(!n.contains('[') && !n.contains("red,") && !n.contains("check:"));
        assert!(build_guidance(&p, &d, &Flags::default(), GuidanceMode::Tldr).is_err());
        assert!(build_guidance(&p, &[], &f, GuidanceMode::Naive).is_err());
    }

    #[test]
    fn flagging_boundaries() {
        let corpus = build_corpus(&CorpusConfig { scenes: 2, ..CorpusConfig::default() }, 3).unwrap();
        let mut rm = Checkpoint::init(ModelConfig { max_len: 160, ..ModelConfig::tiny() }, 1).unwrap();
        rm.weights.reward_b.fill(5.0);
        assert!(flag_responses(&rm, &corpus.train, 0.5).unwrap().is_empty());
        assert_eq!(flag_responses(&rm, &corpus.train, 1.0).unwrap().len(), corpus.train.len());
    }

    #[test]
    fn tldr_mode_repairs_only_flagged_sentences() {
        let corpus = build_corpus(&CorpusConfig { scenes: 3, ..CorpusConfig::default() }, 4).unwrap();
        let gen = Checkpoint::init(ModelConfig { max_len: 160, ..ModelConfig::tiny() }, 2).unwrap();
        let s = corpus.train.iter().find(|s| !s.is_positive() && s.task == crate::perturb::Task::Caption).unwrap();
        let bad: Vec<usize> = s.labels.iter().enumerate().filter(|(_, &l)| l == 0).map(|(i, _)| i).collect();
        let flags = Flags::new(&s.d, bad.clone());
        let rec = self_correct(&gen, s, &flags, GuidanceMode::Tldr).unwrap();
        let fixed = tokenize(&rec.corrected).tokens;

        // Everything before the first flagged sentence is untouched.
        let spans = segment_ids(&s.d).spans;
        let (_, b) = *spans.iter().find(|&&(a, b)| bad.iter().any(|&k| k >= a && k < b)).unwrap();
        let first = bad[0];
        assert_eq!(fixed[..first], s.d[..first]);
        if fixed.len() > first {
            assert_ne!(fixed[first], s.d[first]);
        }
        // Unflagged sentences after it survive verbatim, in order.
        let kept: Vec<&[u32]> = spans.iter().filter(|&&(x, _)| x >= b).filter(|&&(x, y)| !bad.iter().any(|&k| k >= x && k < y)).map(|&(x, y)| &s.d[x..y]).collect();
        let fixed_spans = segment_ids(&fixed).spans;
        let mut sentences = fixed_spans.iter().map(|&(x, y)| &fixed[x..y]);
        for sentence in kept {
            assert!(sentences.any(|t| t == sentence), "lost {sentence:?}");
        }
        assert!(rec.errors_before >= 1);
        assert_eq!(rec.verdict, verdict(rec.errors_before, rec.errors_after, fixed != s.d));
    }
}
