//! Training loops for the token-level objective, the last-token baseline and LM pretraining.

pub mod loss;
pub mod optim;

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::vocab::EOS;
use crate::model::net::{self, log_sum_exp, sigmoid, softmax, Seq, Trainable};
use crate::model::{Checkpoint, ModelConfig, Weights};
use crate::perturb::LabeledSample;
use crate::seed;

pub use loss::{naive_loss, tldr_loss, CLAMP};
pub use optim::{learning_rate, Adam};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Per-token cross-entropy through the reward head.
    #[default]
    Tldr,
    /// Cross-entropy at the last token against the response label.
    Naive,
    /// Next-token prediction on the response; trains the base weights and LM head.
    Lm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub train_proj: bool,
    pub train_dec: bool,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub steps: usize,
    pub seed: u64,
    /// Held-out evaluation interval in steps; 0 disables it.
    pub eval_every: usize,
    /// Architecture used when training starts from scratch.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Tldr,
            train_proj: true,
            train_dec: true,
            batch_size: 8,
            grad_accum: 1,
            learning_rate: 1e-3,
            schedule: Schedule::Cosine,
            warmup_steps: 50,
            steps: 1000,
            seed: 0,
            eval_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config("batch_size and grad_accum must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!("warmup {} exceeds total steps {}", self.warmup_steps, self.steps)));
        }
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn trainable(&self) -> Trainable {
        match self.objective {
            Objective::Tldr | Objective::Naive => Trainable {
                proj_lora: self.train_proj,
                dec_lora: self.train_dec,
                reward: true,
                ..Trainable::default()
            },
            Objective::Lm => Trainable {
                embeddings: true,
                proj_base: self.train_proj,
                dec_base: self.train_dec,
                lm_head: true,
                ..Trainable::default()
            },
        }
    }

    /// Adapter multiplier during training; adapters are inert under the LM objective.
    pub fn adapter_scale(&self, model: &ModelConfig) -> f64 {
        match self.objective {
            Objective::Lm => 0.0,
            _ => model.adapter_scale(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub loss: f64,
    /// Token-level accuracy at θ = 0.5; absent for the LM objective.
    pub token_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    /// One JSON record per step, then one per evaluation.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.steps {
            out.push_str(&serde_json::to_string(&serde_json::json!({ "kind": "step", "step": r.step, "lr": r.lr, "loss": r.loss }))?);
            out.push('\n');
        }
        for r in &self.evals {
            let rec = serde_json::json!({ "kind": "eval", "step": r.step, "loss": r.loss, "token_accuracy": r.token_accuracy });
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }
}


/// Loss of one sample, accumulating `weight × ∇loss` into `grads` for the trainable groups.
#[allow(clippy::too_many_arguments)]
pub fn sample_gradient(
    w: &Weights,
    cfg: &ModelConfig,
    sample: &LabeledSample,
    objective: Objective,
    scale: f64,
    tr: &Trainable,
    weight: f64,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
    grads: &mut Weights,
) -> Result<f64> {
    let seq = Seq { m: &sample.m, p: &sample.p, d: &sample.d };
    if sample.d.is_empty() {
        return Err(Error::Empty("response"));
    }
    let trace = net::forward(w, cfg, &seq, scale, dropout)?;
    let prefix = trace.prefix;
    let mut dhf = Array2::zeros(trace.hf.dim());
    let loss = match objective {
        Objective::Tldr | Objective::Naive => {
            let hd = trace.hf.slice(s![prefix.., ..]);
            let probs: Vec<f64> = net::reward_logits(w, hd).into_iter().map(sigmoid).collect();
            let (loss, dz) = if objective == Objective::Tldr {
                (tldr_loss(&probs, &sample.labels)?, loss::tldr_logit_grads(&probs, &sample.labels))
            } else {
                (naive_loss(&probs, &sample.labels)?, loss::naive_logit_grads(&probs, &sample.labels))
            };
            let dz = Array2::from_shape_vec((dz.len(), 1), dz.into_iter().map(|g| g * weight).collect()).expect("column");
            if tr.reward {
                grads.reward_w += &hd.t().dot(&dz);
                grads.reward_b[[0, 0]] += dz.sum();
            }
            dhf.slice_mut(s![prefix.., ..]).assign(&dz.dot(&w.reward_w.t()));
            loss
        }
        Objective::Lm => {
            let rows = trace.hf.slice(s![prefix - 1.., ..]);
            let mut dlogits = rows.dot(&w.lm_head);
            let n = dlogits.nrows() as f64;
            let targets = sample.d.iter().copied().chain(std::iter::once(EOS));
            let mut loss = 0.0;
            for (mut row, t) in dlogits.rows_mut().into_iter().zip(targets) {
                let logits = row.to_vec();
                loss += log_sum_exp(&logits) - logits[t as usize];
                for (g, p) in row.iter_mut().zip(softmax(&logits)) {
                    *g = p * weight / n;
                }
                row[t as usize] -= weight / n;
            }
            if tr.lm_head {
                grads.lm_head += &rows.t().dot(&dlogits);
            }
            dhf.slice_mut(s![prefix - 1.., ..]).assign(&dlogits.dot(&w.lm_head.t()));
            loss / n
        }
    };
    net::backward(w, &trace, &dhf, scale, grads, tr);
    Ok(loss)
}

/// Loss of one sample without gradients.
pub fn sample_loss(w: &Weights, cfg: &ModelConfig, sample: &LabeledSample, objective: Objective, scale: f64) -> Result<f64> {
    let mut scratch = w.zeros_like();
    sample_gradient(w, cfg, sample, objective, scale, &Trainable::default(), 1.0, None, &mut scratch)
}

/// Mean loss and token accuracy of `samples` under `objective`.
pub fn evaluate(ckpt: &Checkpoint, samples: &[LabeledSample], objective: Objective, scale: f64) -> Result<EvalRecord> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation samples"));
    }
    let mut loss = 0.0;
    let (mut hits, mut tokens) = (0usize, 0usize);
    for s in samples {
        loss += sample_loss(&ckpt.weights, &ckpt.config, s, objective, scale)?;
        if objective != Objective::Lm {
            let trace = net::forward(&ckpt.weights, &ckpt.config, &Seq { m: &s.m, p: &s.p, d: &s.d }, scale, None)?;
            let z = net::reward_logits(&ckpt.weights, trace.hf.slice(s![trace.prefix.., ..]));
            hits += z.iter().zip(&s.labels).filter(|(&z, &y)| u8::from(sigmoid(z) > 0.5) == y).count();
            tokens += z.len();
        }
    }
    let token_accuracy = (objective != Objective::Lm).then(|| hits as f64 / tokens as f64);
    Ok(EvalRecord { step: 0, loss: loss / samples.len() as f64, token_accuracy })
}

/// Optimise from `init` (or fresh weights from `cfg.model`) over `samples`.
pub fn train(cfg: &TrainConfig, samples: &[LabeledSample], eval: &[LabeledSample], init: Option<Checkpoint>) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let started = Instant::now();
    let mut ckpt = match init {
        Some(c) => c,
        None => Checkpoint::init(cfg.model.clone(), cfg.seed)?,
    };
    let model = ckpt.config.clone();
    let tr = cfg.trainable();
    let scale = cfg.adapter_scale(&model);
    let mut adam = Adam::new(&ckpt.weights);
    let mut log = TrainLog::default();

    let mut order_rng = seed::rng(seed::derive(cfg.seed, 0x006f_7264_6572));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;
    let per_step = cfg.batch_size * cfg.grad_accum;
    let weight = 1.0 / per_step as f64;

    for step in 0..cfg.steps {
        let mut grads = ckpt.weights.zeros_like();
        let mut dropout_rng = seed::rng(seed::derive(cfg.seed, step as u64 + 1));
        let mut loss = 0.0;
        for _ in 0..per_step {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let sample = &samples[order[cursor]];
            cursor += 1;
            let dropout = (model.lora_dropout > 0.0 && scale != 0.0).then_some((&mut dropout_rng, model.lora_dropout));
            loss += weight * sample_gradient(&ckpt.weights, &model, sample, cfg.objective, scale, &tr, weight, dropout, &mut grads)?;
        }
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let lr = learning_rate(cfg, step);
        adam.step(&mut ckpt.weights, &grads, lr, &tr);
        log.steps.push(StepRecord { step, lr, loss });
        if cfg.eval_every > 0 && !eval.is_empty() && (step + 1) % cfg.eval_every == 0 {
            let mut rec = evaluate(&ckpt, eval, cfg.objective, scale)?;
            rec.step = step + 1;
            log.evals.push(rec);
        }
    }

    ckpt.weights.quantize();
    let objective = serde_json::to_value(cfg.objective)?;
    if let Some(prev) = ckpt.metadata.remove("objective") {
        ckpt.metadata.insert("base_objective".into(), prev);
    }
    ckpt.metadata.insert("objective".into(), objective);
    ckpt.metadata.insert("steps".into(), cfg.steps.into());
    ckpt.metadata.insert("seed".into(), cfg.seed.into());
    ckpt.metadata.insert("train_proj".into(), cfg.train_proj.into());
    ckpt.metadata.insert("train_dec".into(), cfg.train_dec.into());
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((ckpt, log))
}

/// Largest relative disagreement between the analytic gradient of the token-level loss
/// and central finite differences (step 1e-4), over every parameter.
pub fn grad_check(ckpt: &Checkpoint, sample: &LabeledSample) -> Result<f64> {
    const STEP: f64 = 1e-4;
    let cfg = &ckpt.config;
    let scale = cfg.adapter_scale(1.0);
    let mut analytic = ckpt.weights.zeros_like();
    sample_gradient(&ckpt.weights, cfg, sample, Objective::Tldr, scale, &Trainable::all(), 1.0, None, &mut analytic)?;

    let mut flat = Vec::new();
    analytic.for_each(|_, _, t| flat.extend(t.iter().copied()));
    let mut probe = ckpt.weights.clone();
    let mut worst: f64 = 0.0;
    let mut index = 0;
    let n_tensors = {
        let mut n = 0;
        probe.for_each(|_, _, _| n += 1);
        n
    };
    for tensor in 0..n_tensors {
        let len = tensor_len(&probe, tensor);
        for e in 0..len {
            let orig = set_element(&mut probe, tensor, e, None);
            set_element(&mut probe, tensor, e, Some(orig + STEP));
            let up = sample_loss(&probe, cfg, sample, Objective::Tldr, scale)?;
            set_element(&mut probe, tensor, e, Some(orig - STEP));
            let down = sample_loss(&probe, cfg, sample, Objective::Tldr, scale)?;
            set_element(&mut probe, tensor, e, Some(orig));
            let numeric = (up - down) / (2.0 * STEP);
            let a = flat[index];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
            index += 1;
        }
    }
    Ok(worst)
}

fn tensor_len(w: &Weights, tensor: usize) -> usize {
    let mut i = 0;
    let mut len = 0;
    w.for_each(|_, _, t| {
        if i == tensor {
            len = t.len();
        }
        i += 1;
    });
    len
}

/// Read element `e` of tensor `tensor`, optionally overwriting it; returns the previous value.
fn set_element(w: &mut Weights, tensor: usize, e: usize, value: Option<f64>) -> f64 {
    let mut i = 0;
    let mut old = 0.0;
    w.for_each_mut(|_, _, t| {
        if i == tensor {
            let x = t.iter_mut().nth(e).expect("element in range");
            old = *x;
            if let Some(v) = value {
                *x = v;
            }
        }
        i += 1;
    });
    old
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Group;
    use crate::perturb::{build_corpus, CorpusConfig};
    use rand::Rng;

    fn samples(n_scenes: usize) -> Vec<LabeledSample> {
        build_corpus(&CorpusConfig { scenes: n_scenes, ..CorpusConfig::default() }, 11).unwrap().train
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig { max_len: 160, ..ModelConfig::tiny() }
    }

    /// Tiny checkpoint with every tensor, including `B` and `h`, away from zero.
    fn perturbed(seed_value: u64) -> Checkpoint {
        let mut c = Checkpoint::init(tiny_model(), seed_value).unwrap();
        let mut rng = seed::rng(seed_value ^ 0xff);
        c.weights.for_each_mut(|_, _, t| t.mapv_inplace(|x| x + rng.random_range(-0.4..0.4)));
        c
    }

    fn short_sample() -> LabeledSample {
        samples(4).into_iter().find(|s| !s.is_positive() && s.d.len() < 12 && s.m.len() < 30).unwrap()
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let err = grad_check(&perturbed(1), &short_sample()).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn grad_check_with_a_zero_head_is_finite_and_repeatable() {
        let c = Checkpoint::init(tiny_model(), 2).unwrap();
        let s = short_sample();
        let a = grad_check(&c, &s).unwrap();
        assert!(a.is_finite() && a < 1e-4, "{a}");
        assert_eq!(a, grad_check(&c, &s).unwrap());
    }

    #[test]
    fn sign_bug_is_caught() {
        let c = perturbed(3);
        let s = short_sample();
        let err = mutation::with_sign_bug(|| grad_check(&c, &s).unwrap());
        assert!(err > 1e-1, "mutated gradient only off by {err}");
    }

    #[test]
    fn lm_and_naive_gradients_match_finite_differences() {
        let c = perturbed(4);
        let s = short_sample();
        for objective in [Objective::Lm, Objective::Naive] {
            let scale = if objective == Objective::Lm { 0.0 } else { c.config.adapter_scale(1.0) };
            let mut g = c.weights.zeros_like();
            sample_gradient(&c.weights, &c.config, &s, objective, scale, &Trainable::all(), 1.0, None, &mut g).unwrap();
            for (name, row, col) in [("lm_head", 3usize, 5usize), ("layers.1.w1", 2, 7), ("reward.w", 4, 0)] {
                let analytic = {
                    let mut v = 0.0;
                    g.for_each(|n, _, t| if n == format!("{name}.w") || n == name { v = t[[row, col]] });
                    v
                };
                let mut probe = c.weights.clone();
                let at = |w: &mut Weights, delta: f64| {
                    w.for_each_mut(|n, _, t| if n == format!("{name}.w") || n == name { t[[row, col]] += delta });
                };
                at(&mut probe, 1e-5);
                let up = sample_loss(&probe, &c.config, &s, objective, scale).unwrap();
                at(&mut probe, -2e-5);
                let down = sample_loss(&probe, &c.config, &s, objective, scale).unwrap();
                let numeric = (up - down) / 2e-5;
                assert!((analytic - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()), "{objective:?} {name}: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn naive_objective_only_uses_the_last_position() {
        let c = perturbed(5);
        let s = short_sample();
        let scale = c.config.adapter_scale(1.0);
        let head_only = Trainable { reward: true, ..Trainable::default() };
        let mut g = c.weights.zeros_like();
        sample_gradient(&c.weights, &c.config, &s, Objective::Naive, scale, &head_only, 1.0, None, &mut g).unwrap();
        let trace = net::forward(&c.weights, &c.config, &Seq { m: &s.m, p: &s.p, d: &s.d }, scale, None).unwrap();
        let last = trace.hf.row(trace.hf.nrows() - 1);
        let dz = g.reward_b[[0, 0]];
        for j in 0..c.config.d_hidden {
            assert!((g.reward_w[[j, 0]] - dz * last[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_backbone_changes_only_the_head() {
        let data = samples(3);
        let cfg = TrainConfig { train_proj: false, train_dec: false, steps: 5, warmup_steps: 1, model: tiny_model(), ..TrainConfig::default() };
        let init = Checkpoint::init(tiny_model(), 0).unwrap();
        let (out, _) = train(&cfg, &data, &[], Some(init.clone())).unwrap();
        let mut changed = Vec::new();
        let mut before = Vec::new();
        init.weights.for_each(|_, _, t| before.push(t.clone()));
        let mut i = 0;
        out.weights.for_each(|name, group, t| {
            if *t != before[i] {
                changed.push((name.to_string(), group));
            }
            i += 1;
        });
        assert!(!changed.is_empty());
        assert!(changed.iter().all(|(_, g)| *g == Group::Reward), "{changed:?}");
    }

    #[test]
    fn training_is_reproducible() {
        let data = samples(3);
        let cfg = TrainConfig { steps: 6, warmup_steps: 2, model: tiny_model(), ..TrainConfig::default() };
        let (a, la) = train(&cfg, &data, &[], None).unwrap();
        let (b, lb) = train(&cfg, &data, &[], None).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(la.steps, lb.steps);
        assert_eq!(la.steps[0].lr, 0.0);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TrainConfig { objective: Objective::Naive, train_proj: false, seed: 9, ..TrainConfig::default() };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("objective = \"lm\"\nsteps = 20\nwarmup_steps = 2\n").unwrap();
        assert_eq!(partial.objective, Objective::Lm);
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let data = samples(2);
        let mut init = Checkpoint::init(tiny_model(), 0).unwrap();
        init.weights.lm_head.fill(f64::NAN);
        let cfg = TrainConfig { objective: Objective::Lm, steps: 3, warmup_steps: 0, model: tiny_model(), ..TrainConfig::default() };
        assert!(matches!(train(&cfg, &data, &[], Some(init)), Err(Error::Divergence { step: 0, .. })));
    }
}
