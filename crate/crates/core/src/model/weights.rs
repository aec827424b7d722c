//! Parameter storage and named-tensor traversal.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::config::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    /// `[in, r]`
    pub a: Array2<f64>,
    /// `[r, out]`
    pub b: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub w: Array2<f64>,
    pub lora: Option<LoraPair>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub ln1: Array2<f64>,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: Array2<f64>,
    pub w1: Linear,
    pub w2: Linear,
}

/// All parameters. Norm gains are `[1, D]`, the reward head is `w: [D, 1]`, `b: [1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub img_emb: Array2<f64>,
    pub proj: Linear,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<Layer>,
    pub ln_f: Array2<f64>,
    pub lm_head: Array2<f64>,
    pub reward_w: Array2<f64>,
    pub reward_b: Array2<f64>,
}

/// Which part of the network a tensor belongs to; used for freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Embedding,
    ProjBase,
    ProjLora,
    DecBase,
    DecLora,
    LmHead,
    Reward,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

fn linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, rank: usize) -> Linear {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = uniform(rng, fan_in, fan_out, bound);
    let a = uniform(rng, fan_in, rank, bound);
    Linear { w, lora: Some(LoraPair { a, b: Array2::zeros((rank, fan_out)) }) }
}

impl Weights {
    /// Fresh weights: uniform in ±1/√fan_in, embeddings treated as fan-in 1,
    /// LoRA `B` and the reward head at zero.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_hidden;
        let r = cfg.lora_rank;
        let img_emb = uniform(rng, cfg.image_vocab, cfg.d_img, 1.0);
        let proj = linear(rng, cfg.d_img, d, r);
        let tok_emb = uniform(rng, cfg.text_vocab, d, 1.0);
        let pos_emb = uniform(rng, cfg.max_len, d, 1.0);
        let layers = (0..cfg.layers)
            .map(|_| Layer {
                ln1: Array2::ones((1, d)),
                wq: linear(rng, d, d, r),
                wk: linear(rng, d, d, r),
                wv: linear(rng, d, d, r),
                wo: linear(rng, d, d, r),
                ln2: Array2::ones((1, d)),
                w1: linear(rng, d, cfg.d_ff, r),
                w2: linear(rng, cfg.d_ff, d, r),
            })
            .collect();
        let lm_head = uniform(rng, d, cfg.text_vocab, 1.0 / (d as f64).sqrt());
        Weights {
            img_emb,
            proj,
            tok_emb,
            pos_emb,
            layers,
            ln_f: Array2::ones((1, d)),
            lm_head,
            reward_w: Array2::zeros((d, 1)),
            reward_b: Array2::zeros((1, 1)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, _, t| t.fill(0.0));
        z
    }

    pub fn has_adapters(&self) -> bool {
        self.proj.lora.is_some()
    }

    /// Visit every tensor in the fixed serialization order.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, Group, &'a Array2<f64>)) {
        f("img_emb", Group::Embedding, &self.img_emb);
        visit_linear("proj", &self.proj, Group::ProjBase, Group::ProjLora, &mut f);
        f("tok_emb", Group::Embedding, &self.tok_emb);
        f("pos_emb", Group::Embedding, &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layers.{i}.ln1"), Group::DecBase, &l.ln1);
            for (name, lin) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wo", &l.wo)] {
                visit_linear(&format!("layers.{i}.{name}"), lin, Group::DecBase, Group::DecLora, &mut f);
            }
            f(&format!("layers.{i}.ln2"), Group::DecBase, &l.ln2);
            for (name, lin) in [("w1", &l.w1), ("w2", &l.w2)] {
                visit_linear(&format!("layers.{i}.{name}"), lin, Group::DecBase, Group::DecLora, &mut f);
            }
        }
        f("ln_f", Group::DecBase, &self.ln_f);
        f("lm_head", Group::LmHead, &self.lm_head);
        f("reward.w", Group::Reward, &self.reward_w);
        f("reward.b", Group::Reward, &self.reward_b);
    }

    /// Mutable counterpart of [`Weights::for_each`], same order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, Group, &mut Array2<f64>)) {
        f("img_emb", Group::Embedding, &mut self.img_emb);
        visit_linear_mut("proj", &mut self.proj, Group::ProjBase, Group::ProjLora, &mut f);
        f("tok_emb", Group::Embedding, &mut self.tok_emb);
        f("pos_emb", Group::Embedding, &mut self.pos_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{i}.ln1"), Group::DecBase, &mut l.ln1);
            for (name, lin) in [("wq", &mut l.wq), ("wk", &mut l.wk), ("wv", &mut l.wv), ("wo", &mut l.wo)] {
                visit_linear_mut(&format!("layers.{i}.{name}"), lin, Group::DecBase, Group::DecLora, &mut f);
            }
            f(&format!("layers.{i}.ln2"), Group::DecBase, &mut l.ln2);
            for (name, lin) in [("w1", &mut l.w1), ("w2", &mut l.w2)] {
                visit_linear_mut(&format!("layers.{i}.{name}"), lin, Group::DecBase, Group::DecLora, &mut f);
            }
        }
        f("ln_f", Group::DecBase, &mut self.ln_f);
        f("lm_head", Group::LmHead, &mut self.lm_head);
        f("reward.w", Group::Reward, &mut self.reward_w);
        f("reward.b", Group::Reward, &mut self.reward_b);
    }

    /// Visit matching tensors of `self` (mutably) and `other`.
    pub fn zip_mut(&mut self, other: &Weights, mut f: impl FnMut(&str, Group, &mut Array2<f64>, &Array2<f64>)) {
        let mut theirs: Vec<&Array2<f64>> = Vec::new();
        other.for_each(|_, _, t| theirs.push(t));
        let mut i = 0;
        self.for_each_mut(|name, group, mine| {
            let t = theirs[i];
            assert_eq!(mine.dim(), t.dim(), "tensor `{name}` differs in shape");
            f(name, group, mine, t);
            i += 1;
        });
        assert_eq!(i, theirs.len(), "weights differ in tensor count");
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _, t| n += t.len());
        n
    }

    /// Round every value to the nearest `f32`.
    pub fn quantize(&mut self) {
        self.for_each_mut(|_, _, t| t.mapv_inplace(|x| x as f32 as f64));
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        self.zip_mut(other, |_, _, a, b| Zip::from(a).and(b).for_each(|x, &y| *x += scale * y));
    }

    /// Fold adapters into base matrices at multiplier `scale` and drop them.
    pub fn merged(&self, scale: f64) -> Weights {
        let mut out = self.clone();
        let fold = |lin: &mut Linear| {
            if let Some(l) = lin.lora.take() {
                if scale != 0.0 {
                    lin.w.scaled_add(scale, &l.a.dot(&l.b));
                }
            }
        };
        fold(&mut out.proj);
        for l in &mut out.layers {
            for lin in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2] {
                fold(lin);
            }
        }
        out
    }
}

fn visit_linear<'a>(name: &str, lin: &'a Linear, base: Group, lora: Group, f: &mut impl FnMut(&str, Group, &'a Array2<f64>)) {
    f(&format!("{name}.w"), base, &lin.w);
    if let Some(l) = &lin.lora {
        f(&format!("{name}.lora_a"), lora, &l.a);
        f(&format!("{name}.lora_b"), lora, &l.b);
    }
}

fn visit_linear_mut(
    name: &str,
    lin: &mut Linear,
    base: Group,
    lora: Group,
    f: &mut impl FnMut(&str, Group, &mut Array2<f64>),
) {
    f(&format!("{name}.w"), base, &mut lin.w);
    if let Some(l) = &mut lin.lora {
        f(&format!("{name}.lora_a"), lora, &mut l.a);
        f(&format!("{name}.lora_b"), lora, &mut l.b);
    }
}
