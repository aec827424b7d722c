//! Inference entry points: reward scoring, next-token distributions and greedy decoding.

use std::collections::BTreeMap;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::vocab::{segment_ids, TokenSequence, EOS};
use crate::model::checkpoint::Checkpoint;
use crate::model::net::{self, log_sum_exp, sigmoid, softmax, KvCache, Seq};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Token-level reward output for one response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardPrediction {
    pub probabilities: Vec<f64>,
    pub threshold: f64,
    pub gamma: Vec<u8>,
    pub spans: Vec<(usize, usize)>,
}

impl RewardPrediction {
    pub fn new(probabilities: Vec<f64>, response: &[u32], threshold: f64) -> Self {
        let gamma = probabilities.iter().map(|&p| u8::from(p > threshold)).collect();
        Self { probabilities, threshold, gamma, spans: segment_ids(response).spans }
    }

    pub fn with_threshold(&self, threshold: f64) -> Self {
        let gamma = self.probabilities.iter().map(|&p| u8::from(p > threshold)).collect();
        Self { probabilities: self.probabilities.clone(), threshold, gamma, spans: self.spans.clone() }
    }

    /// Positions the model flags as bad.
    pub fn flagged(&self) -> Vec<usize> {
        self.gamma.iter().enumerate().filter(|(_, &g)| g == 0).map(|(k, _)| k).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Final hidden states at the response positions, `[|d|, D]`.
    pub hidden: Array2<f64>,
    pub prediction: RewardPrediction,
}

fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::Config(format!("adapter scale {tau} outside [0, 1]")))
    }
}

fn scale_of(ckpt: &Checkpoint, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(ckpt.config.adapter_scale(tau))
}

/// Score every response token: `P(e_k) = σ(h(H_k))`.
pub fn forward(ckpt: &Checkpoint, m: &[u32], p: &[u32], d: &[u32], tau: f64) -> Result<ForwardOutput> {
    let scale = scale_of(ckpt, tau)?;
    let trace = net::forward(&ckpt.weights, &ckpt.config, &Seq { m, p, d }, scale, None)?;
    let hidden = trace.hf.slice(s![trace.prefix.., ..]).to_owned();
    let probs = net::reward_logits(&ckpt.weights, hidden.view()).into_iter().map(sigmoid).collect();
    Ok(ForwardOutput { hidden, prediction: RewardPrediction::new(probs, d, DEFAULT_THRESHOLD) })
}

/// Raw LM-head logits for the token following `m ++ p ++ d`.
pub fn lm_logits(ckpt: &Checkpoint, m: &[u32], p: &[u32], d: &[u32], tau: f64) -> Result<Vec<f64>> {
    let scale = scale_of(ckpt, tau)?;
    let trace = net::forward(&ckpt.weights, &ckpt.config, &Seq { m, p, d }, scale, None)?;
    let last = trace.hf.slice(s![trace.hf.nrows() - 1.., ..]);
    Ok(last.dot(&ckpt.weights.lm_head).row(0).to_vec())
}

/// Softmax-normalised next-token distribution.
pub fn lm_distribution(ckpt: &Checkpoint, m: &[u32], p: &[u32], d: &[u32], tau: f64) -> Result<Vec<f64>> {
    Ok(softmax(&lm_logits(ckpt, m, p, d, tau)?))
}

/// `log P(d, EOS | m, p)` under the LM head, from a single pass.
pub fn response_log_likelihood(ckpt: &Checkpoint, m: &[u32], p: &[u32], d: &[u32], tau: f64) -> Result<f64> {
    let scale = scale_of(ckpt, tau)?;
    let trace = net::forward(&ckpt.weights, &ckpt.config, &Seq { m, p, d }, scale, None)?;
    let rows = trace.hf.slice(s![trace.prefix - 1.., ..]);
    let logits = rows.dot(&ckpt.weights.lm_head);
    let targets = d.iter().copied().chain(std::iter::once(EOS));
    Ok(logits.rows().into_iter().zip(targets).map(|(row, t)| row[t as usize] - log_sum_exp(row.as_slice().expect("row-major"))).sum())
}

/// Logit adjustments and forced tokens for greedy decoding, keyed by response position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeConstraints {
    /// Added to the logit of the given token at the given position.
    pub penalties: BTreeMap<usize, Vec<(u32, f64)>>,
    /// Tokens emitted unconditionally at the given position.
    pub forced: BTreeMap<usize, u32>,
}

impl DecodeConstraints {
    pub fn penalize(&mut self, position: usize, token: u32, penalty: f64) {
        self.penalties.entry(position).or_default().push((token, penalty));
    }

    pub fn force(&mut self, position: usize, token: u32) {
        self.forced.insert(position, token);
    }
}

/// Incremental greedy decoder over a fixed `(m, p)` context at τ = 1.
pub struct Decoder<'a> {
    ckpt: &'a Checkpoint,
    cache: KvCache,
    hidden: Array2<f64>,
    scale: f64,
    tokens: Vec<u32>,
}

impl<'a> Decoder<'a> {
    pub fn new(ckpt: &'a Checkpoint, m: &[u32], p: &[u32]) -> Result<Self> {
        let cfg = &ckpt.config;
        let scale = cfg.adapter_scale(1.0);
        let trace = net::forward(&ckpt.weights, cfg, &Seq { m, p, d: &[] }, scale, None)?;
        let cache = KvCache::from_trace(&trace, cfg);
        let hidden = trace.hf.slice(s![trace.hf.nrows() - 1.., ..]).to_owned();
        Ok(Self { ckpt, cache, hidden, scale, tokens: Vec::new() })
    }

    /// Next-token logits given everything emitted so far.
    pub fn logits(&self) -> Vec<f64> {
        self.hidden.dot(&self.ckpt.weights.lm_head).row(0).to_vec()
    }

    /// Whether another token fits in the context window.
    pub fn has_room(&self) -> bool {
        self.cache.len() < self.ckpt.config.max_len
    }

    /// Append a token. Fails once the context window is full.
    pub fn push(&mut self, token: u32) -> Result<()> {
        let cfg = &self.ckpt.config;
        if !self.has_room() {
            return Err(Error::LengthOverflow { len: self.cache.len() + 1, max: cfg.max_len });
        }
        if token as usize >= cfg.text_vocab {
            return Err(Error::Vocabulary(format!("text token id {token}")));
        }
        self.tokens.push(token);
        self.hidden = net::step(&self.ckpt.weights, cfg, &mut self.cache, token, self.scale);
        Ok(())
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn finish(self) -> TokenSequence {
        TokenSequence::from_ids(self.tokens)
    }
}

pub fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding at the checkpoint's trained adapter scale (τ = 1); merge first for other τ.
/// Stops at EOS (not included) or after `max_len` tokens.
pub fn decode_caption(ckpt: &Checkpoint, m: &[u32], p: &[u32], constraints: &DecodeConstraints, max_len: usize) -> Result<TokenSequence> {
    if max_len == 0 {
        return Ok(TokenSequence::from_ids(Vec::new()));
    }
    let mut dec = Decoder::new(ckpt, m, p)?;
    while dec.tokens().len() < max_len && dec.has_room() {
        let pos = dec.tokens().len();
        let token = match constraints.forced.get(&pos) {
            Some(&t) => t,
            None => {
                let mut logits = dec.logits();
                for &(t, pen) in constraints.penalties.get(&pos).into_iter().flatten() {
                    logits[t as usize] += pen;
                }
                argmax(&logits)
            }
        };
        if token == EOS {
            break;
        }
        dec.push(token)?;
    }
    Ok(dec.finish())
}
