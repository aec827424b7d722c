//! Subcommand implementations. Each reads its inputs, runs one pipeline stage and
//! writes its outputs; tables go to stdout and diagnostics to stderr.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use tldr_core::correct::{flag_responses, self_correct, summary_table, CorrectionRecord, CorrectionSummary, GuidanceMode};
use tldr_core::language::vocab::TokenSequence;
use tldr_core::metrics::{EvalPair, MetricsReport};
use tldr_core::model::{Checkpoint, RewardPrediction};
use tldr_core::perturb::{read_samples, synthesize_corpus, CorpusConfig, LabeledSample, Task};
use tldr_core::pipeline::{
    build_toy_vqa, decode_captions, held_out_scenes, lm_corpus, model_hallucination, oracle_hallucination, predict, sweep_tau as run_sweep,
    tau_table,
};
use tldr_core::records;
use tldr_core::scene::{read_scenes, Scene, WorldConfig};
use tldr_core::train::{self as trainer, Objective, TrainConfig};

pub const PREDICTIONS_FORMAT: &str = "tldr-predictions";
pub const CORRECTIONS_FORMAT: &str = "tldr-corrections";
pub const RECORD_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CommandError {
    /// Bad invocation or missing input; exit status 2.
    Usage(String),
    Failed(anyhow::Error),
}

impl CommandError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CommandError::Usage(_) => 2,
            CommandError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CommandError::Usage(m) => write!(f, "{m}"),
            CommandError::Failed(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<tldr_core::Error> for CommandError {
    fn from(e: tldr_core::Error) -> Self {
        CommandError::Failed(e.into())
    }
}

impl From<anyhow::Error> for CommandError {
    fn from(e: anyhow::Error) -> Self {
        CommandError::Failed(e)
    }
}

impl From<std::io::Error> for CommandError {
    fn from(e: std::io::Error) -> Self {
        CommandError::Failed(e.into())
    }
}

impl From<serde_json::Error> for CommandError {
    fn from(e: serde_json::Error) -> Self {
        CommandError::Failed(e.into())
    }
}

type CmdResult = Result<(), CommandError>;

pub fn require(path: &Path) -> Result<(), CommandError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CommandError::Usage(format!("no such file or directory: {}", path.display())))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// A corpus directory as written by `synth`.
pub struct CorpusDir {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub scenes: Vec<Scene>,
}

impl CorpusDir {
    pub fn open(dir: &Path) -> Result<Self, CommandError> {
        for f in ["train.jsonl", "test.jsonl", "scenes.jsonl"] {
            require(&dir.join(f))?;
        }
        Ok(Self {
            train: read_samples(&dir.join("train.jsonl"))?,
            test: read_samples(&dir.join("test.jsonl"))?,
            scenes: read_scenes(BufReader::new(File::open(dir.join("scenes.jsonl"))?))?,
        })
    }

    fn scenes_of(&self, samples: &[LabeledSample]) -> Vec<Scene> {
        let ids: BTreeSet<u64> = samples.iter().map(|s| s.scene_id).collect();
        self.scenes.iter().filter(|s| ids.contains(&s.id)).cloned().collect()
    }

    pub fn train_scenes(&self) -> Vec<Scene> {
        self.scenes_of(&self.train)
    }

    pub fn test_scenes(&self) -> Vec<Scene> {
        self.scenes_of(&self.test)
    }

    pub fn split(&self, split: Split) -> &[LabeledSample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CommandError> {
    require(path)?;
    Ok(Checkpoint::load(path)?)
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub caption_negatives: usize,
    #[arg(long, default_value_t = 2)]
    pub vqa_per_scene: usize,
    #[arg(long, default_value_t = 0.8)]
    pub train_proportion: f64,
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let cfg = CorpusConfig {
        scenes: a.scenes,
        caption_negatives: a.caption_negatives,
        vqa_per_scene: a.vqa_per_scene,
        train_proportion: a.train_proportion,
        ..CorpusConfig::default()
    };
    let stats = synthesize_corpus(&cfg, a.seed, &a.out)?;
    print!("{}", stats.table());
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ObjectiveArg {
    Tldr,
    Naive,
    Lm,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Tldr => Objective::Tldr,
            ObjectiveArg::Naive => Objective::Naive,
            ObjectiveArg::Lm => Objective::Lm,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training configuration (TOML); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from this checkpoint instead of fresh weights.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Freeze the projection adapters.
    #[arg(long)]
    pub no_train_proj: bool,
    /// Freeze the decoder adapters.
    #[arg(long)]
    pub no_train_dec: bool,
    /// Step log path; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => {
            require(p)?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(o) = a.objective {
        cfg.objective = o.into();
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
        cfg.warmup_steps = cfg.warmup_steps.min(s);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.train_proj &= !a.no_train_proj;
    cfg.train_dec &= !a.no_train_dec;
    let corpus = CorpusDir::open(&a.corpus)?;
    let init = a.init.as_deref().map(load_checkpoint).transpose()?;
    let (samples, eval) = match cfg.objective {
        Objective::Lm => (lm_corpus(&corpus.train_scenes()), lm_corpus(&corpus.test_scenes())),
        _ => (corpus.train.clone(), corpus.test.clone()),
    };
    let (ckpt, log) = trainer::train(&cfg, &samples, &eval, init)?;
    ckpt.save(&a.out)?;
    let log_path = a.log.unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", a.out.display())));
    fs::write(&log_path, log.to_jsonl()?)?;
    let first = log.steps.first().map_or(f64::NAN, |r| r.loss);
    let last = log.steps.last().map_or(f64::NAN, |r| r.loss);
    println!("steps {} loss {first:.4} -> {last:.4} ({:.1}s)", log.steps.len(), log.wall_clock_secs);
    println!("checkpoint {}", a.out.display());
    Ok(())
}

/// Stored token probabilities for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredPrediction {
    pub sample_id: u64,
    pub probabilities: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Score with this checkpoint.
    #[arg(long, conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate stored predictions instead of running a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.5)]
    pub theta: f64,
    /// Machine-readable report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the model's predictions here.
    #[arg(long)]
    pub save_predictions: Option<PathBuf>,
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let corpus = CorpusDir::open(&a.corpus)?;
    let samples = corpus.split(a.split);
    let pairs: Vec<EvalPair> = match (&a.checkpoint, &a.predictions) {
        (Some(c), None) => predict(&load_checkpoint(c)?, samples, a.tau)?,
        (None, Some(p)) => {
            require(p)?;
            let stored: Vec<StoredPrediction> = records::read_records(BufReader::new(File::open(p)?), PREDICTIONS_FORMAT, RECORD_VERSION, "predictions file")?;
            if stored.len() != samples.len() {
                return Err(CommandError::Failed(anyhow::anyhow!("{} predictions for {} samples", stored.len(), samples.len())));
            }
            let mut pairs = Vec::with_capacity(samples.len());
            for (s, p) in samples.iter().zip(stored) {
                if s.id != p.sample_id {
                    return Err(CommandError::Failed(anyhow::anyhow!("prediction for sample {} found where {} was expected", p.sample_id, s.id)));
                }
                pairs.push(EvalPair::new(RewardPrediction::new(p.probabilities, &s.d, 0.5), s.labels.clone())?);
            }
            pairs
        }
        _ => return Err(CommandError::Usage("pass exactly one of --checkpoint or --predictions".into())),
    };
    let pairs: Vec<EvalPair> = pairs.into_iter().map(|p| EvalPair { prediction: p.prediction.with_threshold(a.theta), gold: p.gold }).collect();
    if let Some(path) = &a.save_predictions {
        let stored: Vec<StoredPrediction> =
            samples.iter().zip(&pairs).map(|(s, p)| StoredPrediction { sample_id: s.id, probabilities: p.prediction.probabilities.clone() }).collect();
        records::write_records(BufWriter::new(File::create(path)?), PREDICTIONS_FORMAT, RECORD_VERSION, &stored)?;
    }
    let report = MetricsReport::compute(&pairs)?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct HallucinateArgs {
    /// Caption generator.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Adapter scale at which the generator is merged.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Number of held-out scenes.
    #[arg(long, default_value_t = 500)]
    pub scenes: usize,
    /// Index of the first held-out scene in the seed stream.
    #[arg(long, default_value_t = 100_000)]
    pub offset: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 150)]
    pub max_len: usize,
    /// Also measure the rates with this reward model.
    #[arg(long)]
    pub rm: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct HallucinationOutput {
    tau: f64,
    oracle: tldr_core::metrics::HallucinationReport,
    model: Option<tldr_core::metrics::HallucinationReport>,
}

pub fn hallucinate(a: HallucinateArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&a.tau) {
        return Err(CommandError::Usage(format!("--tau {} outside [0, 1]", a.tau)));
    }
    let generator = load_checkpoint(&a.checkpoint)?.merge_tau(a.tau);
    let rm = a.rm.as_deref().map(load_checkpoint).transpose()?;
    let scenes = held_out_scenes(&WorldConfig::default(), a.seed, a.offset, a.scenes)?;
    let captions: Vec<TokenSequence> = decode_captions(&generator, &scenes, a.max_len)?;
    let oracle = oracle_hallucination(&scenes, &captions)?;
    println!("oracle");
    print!("{}", oracle.table());
    let model = match &rm {
        Some(rm) => {
            let r = model_hallucination(rm, &scenes, &captions)?;
            println!("reward model");
            print!("{}", r.table());
            Some(r)
        }
        None => None,
    };
    if let Some(out) = &a.out {
        write_json(out, &HallucinationOutput { tau: a.tau, oracle, model })?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SweepTauArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Questions come from the held-out scenes of this corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.25,0.5,1")]
    pub grid: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    pub distractors: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn sweep_tau(a: SweepTauArgs) -> CmdResult {
    if let Some(t) = a.grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(CommandError::Usage(format!("grid value {t} outside [0, 1]")));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = CorpusDir::open(&a.corpus)?;
    let items = build_toy_vqa(&corpus.test_scenes(), a.distractors, a.seed)?;
    let rows = run_sweep(&ckpt, &items, &a.grid)?;
    print!("{}", tau_table(&rows));
    if let Some(out) = &a.out {
        write_json(out, &rows)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct CorrectArgs {
    /// Reward model that flags captions.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Caption generator; defaults to the reward model's backbone without adapters.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long, default_value_t = 0.5)]
    pub theta: f64,
    /// Correction records (both modes).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn correct(a: CorrectArgs) -> CmdResult {
    let rm = load_checkpoint(&a.checkpoint)?;
    let generator = match &a.generator {
        Some(g) => load_checkpoint(g)?,
        None => rm.merge_tau(0.0),
    };
    let corpus = CorpusDir::open(&a.corpus)?;
    let captions: Vec<LabeledSample> = corpus.split(a.split).iter().filter(|s| s.task == Task::Caption).cloned().collect();
    let flagged = flag_responses(&rm, &captions, a.theta)?;
    let mut rows = Vec::new();
    let mut all: Vec<CorrectionRecord> = Vec::new();
    for mode in [GuidanceMode::Tldr, GuidanceMode::Naive] {
        let records = flagged.iter().map(|f| self_correct(&generator, &captions[f.index], &f.flags, mode)).collect::<tldr_core::Result<Vec<_>>>()?;
        rows.push((mode, CorrectionSummary::from_records(captions.len(), &records)));
        all.extend(records);
    }
    print!("{}", summary_table(&rows));
    if let Some(out) = &a.out {
        records::write_records(BufWriter::new(File::create(out)?), CORRECTIONS_FORMAT, RECORD_VERSION, &all)?;
    }
    Ok(())
}
