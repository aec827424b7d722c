//! Corpus synthesis: positive and hard-negative samples for both tasks.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::caption::caption_scene;
use crate::language::vocab::{tokenize, TokenSequence};
use crate::language::vqa::generate_vqa;
use crate::perturb::edit::{perturb_response, provenance_labels, Context, Edit};
use crate::perturb::taxonomy::Taxonomy;
use crate::records;
use crate::scene::{deserialize_scene, generate_scene, serialize_scene, write_scenes, Scene, WorldConfig};
use crate::seed;

pub const CAPTION_PROMPT: &str = "describe the scene .";
pub const CORPUS_FORMAT: &str = "tldr-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vqa,
    Caption,
}

/// One training or evaluation instance `(m, p, d, γ*)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: u64,
    pub scene_id: u64,
    pub task: Task,
    /// `None` marks a positive sample.
    pub taxonomy: Option<Taxonomy>,
    pub m: Vec<u32>,
    pub p: Vec<u32>,
    pub d: Vec<u32>,
    pub labels: Vec<u8>,
    pub edits: Vec<Edit>,
}

impl LabeledSample {
    /// ρ* = ∏ γ*.
    pub fn response_label(&self) -> u8 {
        self.labels.iter().copied().min().unwrap_or(1)
    }

    pub fn is_positive(&self) -> bool {
        self.taxonomy.is_none()
    }

    pub fn scene(&self) -> Result<Scene> {
        deserialize_scene(&self.m, self.scene_id, 0)
    }

    pub fn context(&self) -> Context<'_> {
        match self.task {
            Task::Caption => Context::Caption,
            Task::Vqa => Context::Answer { question: &self.p },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub scenes: usize,
    pub world: WorldConfig,
    pub taxonomies: Vec<Taxonomy>,
    /// Caption negatives per scene.
    pub caption_negatives: usize,
    /// Positive VQA pairs per scene; each gets one negative when possible.
    pub vqa_per_scene: usize,
    pub train_proportion: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            scenes: 100,
            world: WorldConfig::default(),
            taxonomies: Taxonomy::ALL.to_vec(),
            caption_negatives: 1,
            vqa_per_scene: 2,
            train_proportion: 0.8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyRow {
    pub taxonomy: Option<Taxonomy>,
    pub caption: usize,
    pub vqa: usize,
    pub train_caption: usize,
    pub train_vqa: usize,
}

/// Per-taxonomy sample counts, one row per taxonomy plus a positive row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub scenes: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub rows: Vec<TaxonomyRow>,
    /// Taxonomy attempts that found no applicable site.
    pub not_applicable: usize,
}

impl CorpusStats {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>8} {:>8} {:>8}", "taxonomy", "caption", "vqa", "train%");
        for r in &self.rows {
            let name = r.taxonomy.map_or("positive", |t| t.name());
            let total = r.caption + r.vqa;
            let train = if total == 0 { 0.0 } else { 100.0 * (r.train_caption + r.train_vqa) as f64 / total as f64 };
            let _ = writeln!(out, "{name:<24} {:>8} {:>8} {train:>7.1}%", r.caption, r.vqa);
        }
        let _ = writeln!(out, "scenes: {} (train {}, test {})", self.scenes, self.train_scenes, self.test_scenes);
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub scenes: Vec<Scene>,
    pub stats: CorpusStats,
}

/// Number of training scenes for a split proportion.
pub fn train_scene_count(scenes: usize, proportion: f64) -> usize {
    ((scenes as f64 * proportion).round() as usize).min(scenes)
}

pub fn scene_seed(master: u64, index: u64) -> u64 {
    seed::derive(master, index)
}

/// Samples of one scene: positive caption, caption negatives, VQA positives and negatives.
fn scene_samples(cfg: &CorpusConfig, scene: &Scene, index: u64, stats_na: &mut usize) -> Result<Vec<LabeledSample>> {
    let scene_seed = scene.seed;
    let m = serialize_scene(scene);
    let caption_prompt = tokenize(CAPTION_PROMPT).tokens;
    let mut out = Vec::new();
    let sample = |task, taxonomy, p: &[u32], d: Vec<u32>, labels, edits| LabeledSample {
        id: 0,
        scene_id: scene.id,
        task,
        taxonomy,
        m: m.clone(),
        p: p.to_vec(),
        d,
        labels,
        edits,
    };

    let caption = caption_scene(scene, seed::derive(scene_seed, 1));
    out.push(sample(Task::Caption, None, &caption_prompt, caption.tokens.clone(), vec![1; caption.len()], vec![]));

    let ntax = cfg.taxonomies.len();
    let mut made = 0;
    for j in 0..ntax {
        if made == cfg.caption_negatives {
            break;
        }
        let t = cfg.taxonomies[(index as usize + j) % ntax];
        let s = seed::derive(scene_seed, 100 + j as u64);
        match perturb_response(&caption.tokens, scene, t, Context::Caption, &caption.text, s)? {
            Some(p) => {
                let labels = provenance_labels(&p.edits, p.perturbed.len());
                out.push(sample(Task::Caption, Some(t), &caption_prompt, p.perturbed.tokens, labels, p.edits));
                made += 1;
            }
            None => *stats_na += 1,
        }
    }

    let qa = generate_vqa(scene, seed::derive(scene_seed, 2));
    let positives: Vec<_> = qa.iter().take(cfg.vqa_per_scene).collect();
    for p in &positives {
        out.push(sample(Task::Vqa, None, &p.question.tokens, p.answer.tokens.clone(), vec![1; p.answer.len()], vec![]));
    }
    let mut used: Vec<usize> = Vec::new();
    for k in 0..positives.len() {
        let mut done = false;
        for offset in 0..qa.len() {
            let qi = (k + offset) % qa.len();
            if used.contains(&qi) {
                continue;
            }
            let pair = &qa[qi];
            for j in 0..ntax {
                let t = cfg.taxonomies[(index as usize + k + j) % ntax];
                let s = seed::derive(scene_seed, 200 + (k * ntax + j) as u64);
                let ctx = Context::Answer { question: &pair.question.tokens };
                if let Some(pt) = perturb_response(&pair.answer.tokens, scene, t, ctx, &pair.answer.text, s)? {
                    let labels = provenance_labels(&pt.edits, pt.perturbed.len());
                    out.push(sample(Task::Vqa, Some(t), &pair.question.tokens, pt.perturbed.tokens, labels, pt.edits));
                    used.push(qi);
                    done = true;
                    break;
                }
            }
            if done {
                break;
            }
        }
        if !done {
            *stats_na += 1;
        }
    }
    Ok(out)
}

/// Build a corpus in memory. Deterministic in `(cfg, master_seed)`.
pub fn build_corpus(cfg: &CorpusConfig, master_seed: u64) -> Result<Corpus> {
    if cfg.scenes == 0 {
        return Err(Error::Config("corpus needs at least one scene".into()));
    }
    if cfg.taxonomies.is_empty() {
        return Err(Error::Config("corpus needs at least one taxonomy".into()));
    }
    if !(0.0..=1.0).contains(&cfg.train_proportion) {
        return Err(Error::Config(format!("train proportion {} outside [0, 1]", cfg.train_proportion)));
    }
    let n_train = train_scene_count(cfg.scenes, cfg.train_proportion);
    let mut corpus = Corpus::default();
    let mut rows: Vec<TaxonomyRow> = std::iter::once(None)
        .chain(Taxonomy::ALL.into_iter().map(Some))
        .map(|taxonomy| TaxonomyRow { taxonomy, ..TaxonomyRow::default() })
        .collect();
    let mut na = 0;
    let mut next_id = 0u64;
    for i in 0..cfg.scenes as u64 {
        let mut scene = generate_scene(&cfg.world, scene_seed(master_seed, i))?;
        scene.id = i;
        let is_train = (i as usize) < n_train;
        for mut s in scene_samples(cfg, &scene, i, &mut na)? {
            s.id = next_id;
            next_id += 1;
            let row = &mut rows[s.taxonomy.map_or(0, |t| t as usize + 1)];
            match (s.task, is_train) {
                (Task::Caption, true) => {
                    row.caption += 1;
                    row.train_caption += 1;
                }
                (Task::Caption, false) => row.caption += 1,
                (Task::Vqa, true) => {
                    row.vqa += 1;
                    row.train_vqa += 1;
                }
                (Task::Vqa, false) => row.vqa += 1,
            }
            if is_train {
                corpus.train.push(s);
            } else {
                corpus.test.push(s);
            }
        }
        corpus.scenes.push(scene);
    }
    corpus.stats = CorpusStats { scenes: cfg.scenes, train_scenes: n_train, test_scenes: cfg.scenes - n_train, rows, not_applicable: na };
    Ok(corpus)
}

pub fn write_samples(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    records::write_records(file, CORPUS_FORMAT, CORPUS_VERSION, samples)
}

pub fn read_samples(path: &Path) -> Result<Vec<LabeledSample>> {
    records::read_records(BufReader::new(File::open(path)?), CORPUS_FORMAT, CORPUS_VERSION, "corpus file")
}

/// Write `train.jsonl`, `test.jsonl`, `scenes.jsonl`, `stats.json` and `stats.txt` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_samples(&dir.join("train.jsonl"), &corpus.train)?;
    write_samples(&dir.join("test.jsonl"), &corpus.test)?;
    write_scenes(BufWriter::new(File::create(dir.join("scenes.jsonl"))?), &corpus.scenes)?;
    fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&corpus.stats)? + "\n")?;
    fs::write(dir.join("stats.txt"), corpus.stats.table())?;
    Ok(())
}

/// Build and write a corpus; returns its statistics.
pub fn synthesize_corpus(cfg: &CorpusConfig, master_seed: u64, dir: &Path) -> Result<CorpusStats> {
    let corpus = build_corpus(cfg, master_seed)?;
    write_corpus(dir, &corpus)?;
    Ok(corpus.stats)
}

/// Tokenized response and prompt as text, for display.
pub fn render(sample: &LabeledSample) -> (String, String) {
    (TokenSequence::from_ids(sample.p.clone()).text, TokenSequence::from_ids(sample.d.clone()).text)
}
