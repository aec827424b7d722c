//! Experiment plumbing shared by the CLI and the acceptance suite: held-out scenes,
//! LM pretraining data, batch prediction, the toy multiple-choice VQA benchmark,
//! the τ sweep and caption hallucination measurement.

use std::fmt::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::grounding::{good_tokens, judge_words};
use crate::language::vocab::{segment_ids, tokenize, TokenSequence};
use crate::language::{caption_scene, generate_vqa};
use crate::metrics::{hallucination_rates, EvalPair, HallucinationReport, MetricsReport};
use crate::model::{decode_caption, forward, response_log_likelihood, Checkpoint, DecodeConstraints};
use crate::perturb::corpus::{scene_seed, CAPTION_PROMPT};
use crate::perturb::{perturb_response, Context, LabeledSample, Task, Taxonomy};
use crate::scene::{generate_scene, serialize_scene, Scene, WorldConfig};
use crate::seed;

/// The τ grid of the adapter-scale sweep.
pub const TAU_GRID: [f64; 5] = [0.0, 0.1, 0.25, 0.5, 1.0];

/// Scenes `offset..offset+count` of the stream rooted at `master`, disjoint from a corpus
/// built with the same master seed when `offset` is at least its scene count.
pub fn held_out_scenes(world: &WorldConfig, master: u64, offset: usize, count: usize) -> Result<Vec<Scene>> {
    (offset..offset + count)
        .map(|i| {
            let mut s = generate_scene(world, scene_seed(master, i as u64))?;
            s.id = i as u64;
            Ok(s)
        })
        .collect()
}

/// Grounded responses for LM pretraining: the caption and every VQA pair of each scene.
pub fn lm_corpus(scenes: &[Scene]) -> Vec<LabeledSample> {
    let prompt = tokenize(CAPTION_PROMPT).tokens;
    let mut out = Vec::new();
    for scene in scenes {
        let m = serialize_scene(scene);
        let mut push = |task, p: Vec<u32>, d: Vec<u32>| {
            out.push(LabeledSample {
                id: out.len() as u64,
                scene_id: scene.id,
                task,
                taxonomy: None,
                m: m.clone(),
                p,
                labels: vec![1; d.len()],
                d,
                edits: Vec::new(),
            })
        };
        push(Task::Caption, prompt.clone(), caption_scene(scene, seed::derive(scene.seed, 1)).tokens);
        for qa in generate_vqa(scene, seed::derive(scene.seed, 2)) {
            push(Task::Vqa, qa.question.tokens, qa.answer.tokens);
        }
    }
    out
}

/// Reward predictions for every sample at adapter scale `tau`.
pub fn predict(ckpt: &Checkpoint, samples: &[LabeledSample], tau: f64) -> Result<Vec<EvalPair>> {
    samples
        .iter()
        .map(|s| EvalPair::new(forward(ckpt, &s.m, &s.p, &s.d, tau)?.prediction, s.labels.clone()))
        .collect()
}

pub fn evaluate_samples(ckpt: &Checkpoint, samples: &[LabeledSample], tau: f64) -> Result<MetricsReport> {
    MetricsReport::compute(&predict(ckpt, samples, tau)?)
}

/// One multiple-choice question about a scene.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyVqaItem {
    pub scene_id: u64,
    pub m: Vec<u32>,
    pub question: Vec<u32>,
    pub choices: Vec<Vec<u32>>,
    pub answer: usize,
}

/// Every generated question of every scene with up to `distractors` false answers,
/// produced by perturbing the true answer. Questions with no distractor are dropped.
pub fn build_toy_vqa(scenes: &[Scene], distractors: usize, master: u64) -> Result<Vec<ToyVqaItem>> {
    let mut items = Vec::new();
    for scene in scenes {
        let base = seed::derive(master, scene.seed);
        for (qi, qa) in generate_vqa(scene, seed::derive(base, 3)).into_iter().enumerate() {
            let mut wrong: Vec<Vec<u32>> = Vec::new();
            let ctx = Context::Answer { question: &qa.question.tokens };
            'search: for attempt in 0..3u64 {
                for (ti, &t) in Taxonomy::ALL.iter().enumerate() {
                    let s = seed::derive(base, 1000 + 100 * qi as u64 + 10 * attempt + ti as u64);
                    if let Some(p) = perturb_response(&qa.answer.tokens, scene, t, ctx, &qa.answer.text, s)? {
                        if !wrong.contains(&p.perturbed.tokens) {
                            wrong.push(p.perturbed.tokens);
                        }
                    }
                    if wrong.len() == distractors {
                        break 'search;
                    }
                }
            }
            if wrong.is_empty() {
                continue;
            }
            let mut choices = wrong;
            choices.push(qa.answer.tokens.clone());
            choices.shuffle(&mut seed::rng(seed::derive(base, 7 + qi as u64)));
            let answer = choices.iter().position(|c| *c == qa.answer.tokens).expect("true answer is a choice");
            items.push(ToyVqaItem { scene_id: scene.id, m: serialize_scene(scene), question: qa.question.tokens, choices, answer });
        }
    }
    Ok(items)
}

/// Fraction of items whose most likely choice (first on ties) is the true answer.
pub fn toy_vqa_accuracy(ckpt: &Checkpoint, items: &[ToyVqaItem], tau: f64) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("toy VQA items"));
    }
    let mut hits = 0;
    for item in items {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, c) in item.choices.iter().enumerate() {
            let ll = response_log_likelihood(ckpt, &item.m, &item.question, c, tau)?;
            if ll > best.0 {
                best = (ll, i);
            }
        }
        hits += usize::from(best.1 == item.answer);
    }
    Ok(hits as f64 / items.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    pub accuracy: f64,
}

/// Toy-VQA accuracy of the checkpoint merged at each τ.
pub fn sweep_tau(ckpt: &Checkpoint, items: &[ToyVqaItem], grid: &[f64]) -> Result<Vec<TauRow>> {
    grid.iter()
        .map(|&tau| {
            let merged = ckpt.merge_tau(tau);
            Ok(TauRow { tau, accuracy: toy_vqa_accuracy(&merged, items, 0.0)? })
        })
        .collect()
}

pub fn tau_table(rows: &[TauRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>6} {:>10}", "tau", "accuracy");
    for r in rows {
        let _ = writeln!(out, "{:>6.2} {:>9.2}%", r.tau, 100.0 * r.accuracy);
    }
    out
}

/// Greedy captions for each scene.
pub fn decode_captions(ckpt: &Checkpoint, scenes: &[Scene], max_len: usize) -> Result<Vec<TokenSequence>> {
    let prompt = tokenize(CAPTION_PROMPT).tokens;
    scenes.iter().map(|s| decode_caption(ckpt, &serialize_scene(s), &prompt, &DecodeConstraints::default(), max_len)).collect()
}

/// γ and sentence spans of a caption as decided by the grounding oracle.
/// An empty caption counts as a single bad token.
pub fn oracle_gamma(scene: &Scene, caption: &[u32]) -> (Vec<u8>, Vec<(usize, usize)>) {
    if caption.is_empty() {
        return (vec![0], vec![(0, 1)]);
    }
    let words = TokenSequence::from_ids(caption.to_vec()).words();
    let gamma = good_tokens(&judge_words(scene, &words), caption.len());
    (gamma, segment_ids(caption).spans)
}

/// Hallucination rates of captions judged by the grounding oracle.
pub fn oracle_hallucination(scenes: &[Scene], captions: &[TokenSequence]) -> Result<HallucinationReport> {
    if scenes.len() != captions.len() {
        return Err(Error::LengthMismatch { left: scenes.len(), right: captions.len() });
    }
    let rows: Vec<_> = scenes.iter().zip(captions).map(|(s, c)| oracle_gamma(s, &c.tokens)).collect();
    hallucination_rates(&rows)
}

/// Hallucination rates of captions as flagged by a reward model at threshold 0.5.
pub fn model_hallucination(rm: &Checkpoint, scenes: &[Scene], captions: &[TokenSequence]) -> Result<HallucinationReport> {
    if scenes.len() != captions.len() {
        return Err(Error::LengthMismatch { left: scenes.len(), right: captions.len() });
    }
    let prompt = tokenize(CAPTION_PROMPT).tokens;
    let mut rows = Vec::new();
    for (s, c) in scenes.iter().zip(captions) {
        if c.is_empty() {
            rows.push((vec![0], vec![(0, 1)]));
            continue;
        }
        let p = forward(rm, &serialize_scene(s), &prompt, &c.tokens, 1.0)?.prediction;
        rows.push((p.gamma, p.spans));
    }
    hallucination_rates(&rows)
}
