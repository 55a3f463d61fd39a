//! Chains of training stages. Each stage after the first starts from the
//! previous stage's best checkpoint with a fresh output head sized for its
//! own alphabet; every parameter keeps training.
//!
//! Chain state is written after every epoch, so an interrupted run resumes
//! to exactly the result an uninterrupted run would have produced.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::alphabet::Alphabet;
use crate::ctc::{min_frames, CtcInstance};
use crate::decoder::greedy_labels;
use crate::manifest::{Manifest, ManifestError};
use crate::metrics::{CorpusScore, Metric};
use crate::net::{
    backward, forward, init_params, load_checkpoint, load_optimizer, reinit_head, save_checkpoint, save_optimizer,
    Batch, Mode, ModelCheckpoint, ModelConfig, NetError, Sgd,
};
use crate::tag_codec::{decode, encode, CodecError, ConceptInventory, TaggedTranscript};

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("chain config: {0}")]
    Config(String),
    #[error("stage {stage}: {message}")]
    Data { stage: String, message: String },
    #[error("transfer check failed entering stage {stage}: {message}")]
    TransferViolation { stage: String, message: String },
    #[error("stage {stage}: non-finite loss or parameters at epoch {epoch}, batch {batch}; last finite checkpoint at {checkpoint}")]
    NonFinite { stage: String, epoch: usize, batch: usize, checkpoint: PathBuf },
    #[error("run halted after the requested number of epochs; resume to continue")]
    Halted,
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ChainError + '_ {
    move |source| ChainError::Io { path: path.to_path_buf(), source }
}

fn default_lr_decay() -> f64 {
    1.0
}
fn default_momentum() -> f64 {
    0.9
}
fn default_patience() -> usize {
    5
}
fn default_batch_size() -> usize {
    8
}
fn default_clip_norm() -> Option<f64> {
    Some(400.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub task: String,
    pub train: PathBuf,
    pub dev: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Concept inventory; absent for plain transcription.
    #[serde(default)]
    pub inventory: Option<PathBuf>,
    /// Replace every out-of-concept word run with the star symbol.
    #[serde(default)]
    pub starred: bool,
    pub epochs: usize,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Epochs without dev improvement before stopping; 0 disables early stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Dev metric; WER for plain transcription and CER otherwise when absent.
    #[serde(default)]
    pub metric: Option<Metric>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: Option<f64>,
}

impl StageSpec {
    pub fn metric(&self) -> Metric {
        self.metric.unwrap_or(if self.inventory.is_some() { Metric::Cer } else { Metric::Wer })
    }

    pub fn load_inventory(&self) -> Result<ConceptInventory, ChainError> {
        match &self.inventory {
            Some(p) => Ok(ConceptInventory::load(p)?),
            None => Ok(ConceptInventory::empty()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Saved checkpoint to seed the first stage with (its body is transplanted).
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    /// Model layout; `alphabet_size` is set per stage. Taken from
    /// `init_checkpoint` when absent.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(rename = "stage")]
    pub stages: Vec<StageSpec>,
}

impl ChainSpec {
    /// Parses a TOML chain file; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ChainError> {
        let mut spec: ChainSpec = toml::from_str(text).map_err(|e| ChainError::Config(e.to_string()))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        fix(&mut spec.output_dir);
        if let Some(p) = spec.init_checkpoint.as_mut() {
            fix(p);
        }
        for s in &mut spec.stages {
            fix(&mut s.train);
            fix(&mut s.dev);
            s.test.as_mut().map(fix);
            s.inventory.as_mut().map(fix);
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ChainError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("chain spec serializes")
    }

    /// Structural checks plus resolvability of every referenced file.
    pub fn validate(&self) -> Result<(), ChainError> {
        let bad = |m: String| Err(ChainError::Config(m));
        if self.stages.is_empty() {
            return bad("at least one [[stage]] is required".into());
        }
        if self.model.is_none() && self.init_checkpoint.is_none() {
            return bad("either [model] or init_checkpoint is required".into());
        }
        if let Some(m) = &self.model {
            let mut m = m.clone();
            m.alphabet_size = m.alphabet_size.max(2);
            m.validate().map_err(|e| ChainError::Config(e.to_string()))?;
        }
        let mut names = HashSet::new();
        for s in &self.stages {
            if !names.insert(&s.name) {
                return bad(format!("duplicate stage name `{}`", s.name));
            }
            if s.name.is_empty() || s.name.contains(['/', '\\']) || s.name.starts_with('.') {
                return bad(format!("stage name `{}` is not usable as a directory name", s.name));
            }
            if !(s.lr > 0.0 && s.lr.is_finite()) || !(s.lr_decay > 0.0) || !(0.0..1.0).contains(&s.momentum) {
                return bad(format!("stage {}: lr and lr_decay must be positive, momentum in [0, 1)", s.name));
            }
            if s.batch_size == 0 {
                return bad(format!("stage {}: batch_size must be positive", s.name));
            }
            let inventory = s.load_inventory()?;
            if s.starred && inventory.is_empty() {
                return bad(format!("stage {}: starred mode needs a concept inventory", s.name));
            }
            for p in [Some(&s.train), Some(&s.dev), s.test.as_ref()].into_iter().flatten() {
                Manifest::read(p)?;
            }
        }
        if let Some(p) = &self.init_checkpoint {
            if !p.exists() {
                return bad(format!("init_checkpoint {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("chain spec serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One utterance prepared for a stage.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub reference: TaggedTranscript,
}

#[derive(Debug, Clone)]
pub struct StageData {
    pub alphabet: Alphabet,
    pub inventory: ConceptInventory,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    /// Training utterances dropped because the model cannot emit their target
    /// in the frames it produces.
    pub skipped_infeasible: usize,
}

impl StageData {
    pub fn load(spec: &StageSpec, model: &ModelConfig) -> Result<Self, ChainError> {
        let inventory = spec.load_inventory()?;
        let alphabet = Alphabet::for_inventory(&inventory);
        let load = |path: &Path| -> Result<Vec<Example>, ChainError> {
            let m = Manifest::read(path)?;
            m.entries
                .iter()
                .map(|e| {
                    let data_err = |message: String| ChainError::Data { stage: spec.name.clone(), message };
                    let (transcript, repairs) = decode(&e.target_text, &inventory);
                    if !repairs.is_empty() {
                        return Err(data_err(format!("{}: target is malformed ({repairs:?})", e.id)));
                    }
                    let text = encode(&transcript, &inventory, spec.starred)?;
                    let labels = alphabet
                        .encode(&text)
                        .ok_or_else(|| data_err(format!("{}: target has symbols outside the alphabet", e.id)))?;
                    let features = m.load_features(e)?;
                    if features.ncols() != model.input_dim {
                        return Err(data_err(format!(
                            "{}: {} feature bins, model expects {}",
                            e.id,
                            features.ncols(),
                            model.input_dim
                        )));
                    }
                    let reference = if spec.starred { transcript.starred(&inventory) } else { transcript };
                    Ok(Example { id: e.id.clone(), features, labels, reference })
                })
                .collect()
        };
        let all_train = load(&spec.train)?;
        let total = all_train.len();
        let train: Vec<Example> = all_train
            .into_iter()
            .filter(|x| model.output_frames(x.features.nrows()).is_some_and(|t| t >= min_frames(&x.labels)))
            .collect();
        let skipped_infeasible = total - train.len();
        if skipped_infeasible > 0 {
            log::warn!("stage {}: skipped {skipped_infeasible} infeasible training utterances", spec.name);
        }
        let dev = load(&spec.dev)?;
        let test = spec.test.as_deref().map(load).transpose()?.unwrap_or_default();
        Ok(Self { alphabet, inventory, train, dev, test, skipped_infeasible })
    }
}

/// Error rates of one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub wer: f64,
    pub cer: f64,
    pub cver: f64,
}

impl From<&CorpusScore> for Scores {
    fn from(s: &CorpusScore) -> Self {
        Self { wer: s.wer(), cer: s.cer(), cver: s.cver() }
    }
}

/// Greedy-decodes `examples` in inference mode and scores them.
pub fn evaluate(
    ckpt: &ModelCheckpoint,
    examples: &[Example],
    alphabet: &Alphabet,
    inventory: &ConceptInventory,
    batch_size: usize,
) -> Result<CorpusScore, ChainError> {
    let mut score = CorpusScore::default();
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk.iter().map(|x| x.features.clone()).collect());
        let out = forward(ckpt, &batch, Mode::Infer)?;
        for (b, x) in chunk.iter().enumerate() {
            let text = alphabet.render(&greedy_labels(out.lattice.utterance(b)));
            let (hyp, _) = decode(&text, inventory);
            score.add(&x.id, &x.reference, &hyp);
        }
    }
    Ok(score)
}

/// Fresh head for `alphabet` on top of `from`'s body, with `stage` appended
/// to the lineage.
pub fn transplant(from: &ModelCheckpoint, alphabet: &Alphabet, stage: &str) -> ModelCheckpoint {
    let mut out = reinit_head(from, alphabet);
    out.lineage.push(stage.to_string());
    out
}

/// Body parameters and running statistics carried over bit for bit, head
/// freshly drawn, lineage extended by exactly this stage.
pub fn verify_transfer(prev: &ModelCheckpoint, start: &ModelCheckpoint, stage: &str) -> Result<(), ChainError> {
    let fail = |message: &str| Err(ChainError::TransferViolation { stage: stage.to_string(), message: message.to_string() });
    if !start.body_bit_eq(prev) {
        return fail("body parameters differ from the previous best checkpoint");
    }
    if start.head.bit_eq(&prev.head) {
        return fail("output head was not reinitialized");
    }
    let mut lineage = prev.lineage.clone();
    lineage.push(stage.to_string());
    if start.lineage != lineage {
        return fail("lineage was not extended by the stage name");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub task: String,
    pub starred: bool,
    pub metric: Metric,
    pub epochs_run: usize,
    /// 1-based epoch of the selected checkpoint; 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_dev_metric: f64,
    pub best_dev: Scores,
    pub dev_history: Vec<f64>,
    pub loss_history: Vec<f64>,
    pub stopped_early: bool,
    pub skipped_infeasible: usize,
    pub transfer_verified: bool,
    pub checkpoint: PathBuf,
    pub lineage: Vec<String>,
    pub test: Option<Scores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub seed: u64,
    pub complete: bool,
    pub error: Option<String>,
    pub stages: Vec<StageReport>,
}

impl ChainReport {
    pub fn final_stage(&self) -> Option<&StageReport> {
        self.stages.last()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct StageProgress {
    stage: usize,
    epochs_done: usize,
    best_epoch: usize,
    best_metric: Option<f64>,
    best_dev: Option<Scores>,
    since_best: usize,
    dev_history: Vec<f64>,
    loss_history: Vec<f64>,
    stopped_early: bool,
    transfer_verified: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChainState {
    spec_digest: String,
    completed: Vec<StageReport>,
    progress: Option<StageProgress>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the state persisted in the output directory.
    pub resume: bool,
    /// Stop (as if interrupted) after this many epochs in this invocation.
    pub halt_after_epochs: Option<usize>,
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), ChainError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let json = serde_json::to_vec_pretty(value).expect("serializes");
    fs::write(&tmp, json).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn shuffle_seed(seed: u64, stage: &str, epoch: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.finalize().into()
}

/// One pass over the training set. Returns the mean per-utterance loss, or
/// the failing batch index with the last finite parameters.
fn train_epoch(
    ckpt: &mut ModelCheckpoint,
    opt: &mut Sgd,
    data: &[Example],
    order: &[usize],
    batch_size: usize,
    lr: f64,
) -> Result<f64, (usize, Box<ModelCheckpoint>)> {
    let mut total = 0.0;
    for (bi, idx) in order.chunks(batch_size).enumerate() {
        let batch = Batch::new(idx.iter().map(|&i| data[i].features.clone()).collect());
        let out = forward(ckpt, &batch, Mode::Train).map_err(|_| (bi, Box::new(ckpt.clone())))?;
        let mut grad = Array3::zeros(out.lattice.data.dim());
        let n = idx.len() as f64;
        let mut batch_loss = 0.0;
        for (b, &i) in idx.iter().enumerate() {
            let inst = CtcInstance::new(out.lattice.utterance(b), &data[i].labels);
            let (loss, g) = inst.loss_and_grad().map_err(|_| (bi, Box::new(ckpt.clone())))?;
            batch_loss += loss;
            grad.slice_mut(ndarray::s![..g.nrows(), b, ..]).assign(&(g / n));
        }
        if !batch_loss.is_finite() {
            return Err((bi, Box::new(ckpt.clone())));
        }
        let grads = backward(ckpt, &out, grad.view()).map_err(|_| (bi, Box::new(ckpt.clone())))?;
        let before = ckpt.clone();
        opt.step(ckpt, &grads, lr);
        if let Some(stats) = out.updated_stats {
            ckpt.stats = stats;
        }
        if !ckpt.body.all_finite() || !ckpt.head.all_finite() || !ckpt.stats.all_finite() {
            return Err((bi, Box::new(before)));
        }
        total += batch_loss;
    }
    Ok(total / order.len().max(1) as f64)
}

struct StageFiles {
    dir: PathBuf,
}

impl StageFiles {
    fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    fn current(&self) -> PathBuf {
        self.dir.join("current.ckpt")
    }
    fn optimizer(&self) -> PathBuf {
        self.dir.join("optimizer.bin")
    }
    fn last_finite(&self) -> PathBuf {
        self.dir.join("last_finite.ckpt")
    }
}

/// Runs a whole chain with default options.
pub fn run_chain(spec: &ChainSpec) -> Result<ChainReport, ChainError> {
    run_chain_with(spec, &RunOptions::default())
}

pub fn run_chain_with(spec: &ChainSpec, opts: &RunOptions) -> Result<ChainReport, ChainError> {
    spec.validate()?;
    let init = spec.init_checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let base_config = match (&spec.model, &init) {
        (Some(m), Some(c)) => {
            let mut m = m.clone();
            m.alphabet_size = c.config.alphabet_size;
            if m.body_digest() != c.config.body_digest() {
                return Err(ChainError::Config("[model] does not match init_checkpoint's body layout".into()));
            }
            c.config.clone()
        }
        (Some(m), None) => m.clone(),
        (None, Some(c)) => c.config.clone(),
        (None, None) => unreachable!("validated"),
    };
    fs::create_dir_all(&spec.output_dir).map_err(io_err(&spec.output_dir))?;
    let state_path = spec.output_dir.join("state.json");
    let digest = spec.digest();
    let mut state = if opts.resume && state_path.exists() {
        let text = fs::read_to_string(&state_path).map_err(io_err(&state_path))?;
        let st: ChainState = serde_json::from_str(&text).map_err(|e| ChainError::Resume(e.to_string()))?;
        if st.spec_digest != digest {
            return Err(ChainError::Resume("chain config changed since the interrupted run".into()));
        }
        st
    } else {
        ChainState { spec_digest: digest, completed: Vec::new(), progress: None }
    };

    let mut budget = opts.halt_after_epochs;
    let result = run_stages(spec, &base_config, init.as_ref(), &mut state, &state_path, &mut budget);
    let report = ChainReport {
        seed: spec.seed,
        complete: result.is_ok(),
        error: result.as_ref().err().map(|e| e.to_string()),
        stages: state.completed.clone(),
    };
    write_json_atomic(&spec.output_dir.join("report.json"), &report)?;
    result.map(|_| report)
}

fn run_stages(
    spec: &ChainSpec,
    base_config: &ModelConfig,
    init: Option<&ModelCheckpoint>,
    state: &mut ChainState,
    state_path: &Path,
    budget: &mut Option<usize>,
) -> Result<(), ChainError> {
    for (k, stage) in spec.stages.iter().enumerate() {
        if k < state.completed.len() {
            continue;
        }
        let data = StageData::load(stage, base_config)?;
        let files = StageFiles { dir: spec.output_dir.join(&stage.name) };
        fs::create_dir_all(&files.dir).map_err(io_err(&files.dir))?;

        let (current, opt, best, progress) = match state.progress.take().filter(|p| p.stage == k) {
            Some(p) => {
                let current = load_checkpoint(files.current())?;
                let opt = load_optimizer(files.optimizer())?;
                let best = if p.best_metric.is_some() { load_checkpoint(files.best())? } else { current.clone() };
                (current, opt, best, p)
            }
            None => {
                let prev = match k {
                    0 => init.cloned(),
                    _ => Some(load_checkpoint(&state.completed[k - 1].checkpoint)?),
                };
                let start = match &prev {
                    Some(p) => {
                        let start = transplant(p, &data.alphabet, &stage.name);
                        verify_transfer(p, &start, &stage.name)?;
                        start
                    }
                    None => {
                        let mut cfg = base_config.clone();
                        cfg.alphabet_size = data.alphabet.len();
                        let mut c = init_params(&cfg, &data.alphabet.id(), spec.seed)?;
                        c.lineage.push(stage.name.clone());
                        c
                    }
                };
                let progress = StageProgress { stage: k, transfer_verified: prev.is_some(), ..Default::default() };
                let opt = Sgd::new(stage.momentum, stage.clip_norm);
                save_checkpoint(&start, files.current())?;
                save_optimizer(&opt, files.optimizer())?;
                state.progress = Some(progress.clone());
                write_json_atomic(state_path, &*state)?;
                (start.clone(), opt, start, progress)
            }
        };
        let report = run_stage_from(spec.seed, stage, &data, &files, current, opt, best, progress, budget, &mut |p| {
            state.progress = Some(p.clone());
            write_json_atomic(state_path, &*state)
        })?;
        state.completed.push(report);
        state.progress = None;
        write_json_atomic(state_path, &*state)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_stage_from(
    seed: u64,
    spec: &StageSpec,
    data: &StageData,
    files: &StageFiles,
    mut current: ModelCheckpoint,
    mut opt: Sgd,
    mut best: ModelCheckpoint,
    mut progress: StageProgress,
    budget: &mut Option<usize>,
    persist: &mut dyn FnMut(&StageProgress) -> Result<(), ChainError>,
) -> Result<StageReport, ChainError> {
    let metric = spec.metric();
    if data.train.is_empty() && spec.epochs > 0 {
        return Err(ChainError::Data { stage: spec.name.clone(), message: "no feasible training utterances".into() });
    }
    while progress.epochs_done < spec.epochs && !progress.stopped_early {
        if *budget == Some(0) {
            return Err(ChainError::Halted);
        }
        let epoch = progress.epochs_done;
        let lr = spec.lr * spec.lr_decay.powi(epoch as i32);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::from_seed(shuffle_seed(seed, &spec.name, epoch)));
        let loss = match train_epoch(&mut current, &mut opt, &data.train, &order, spec.batch_size, lr) {
            Ok(l) => l,
            Err((batch, last)) => {
                save_checkpoint(&last, files.last_finite())?;
                return Err(ChainError::NonFinite { stage: spec.name.clone(), epoch: epoch + 1, batch, checkpoint: files.last_finite() });
            }
        };
        let dev = evaluate(&current, &data.dev, &data.alphabet, &data.inventory, spec.batch_size)?;
        let m = dev.get(metric);
        log::info!("stage {} epoch {}: loss {loss:.4} dev {metric:?} {m:.4}", spec.name, epoch + 1);
        progress.epochs_done += 1;
        progress.loss_history.push(loss);
        progress.dev_history.push(m);
        if progress.best_metric.map_or(true, |b| m < b) {
            best = current.clone();
            progress.best_metric = Some(m);
            progress.best_dev = Some(Scores::from(&dev));
            progress.best_epoch = progress.epochs_done;
            progress.since_best = 0;
            save_checkpoint(&best, files.best())?;
        } else {
            progress.since_best += 1;
            if spec.patience > 0 && progress.since_best >= spec.patience {
                progress.stopped_early = true;
            }
        }
        save_checkpoint(&current, files.current())?;
        save_optimizer(&opt, files.optimizer())?;
        persist(&progress)?;
        if let Some(b) = budget.as_mut() {
            *b -= 1;
        }
    }
    if progress.best_metric.is_none() {
        // no epoch ran: the start checkpoint is the result
        let dev = evaluate(&best, &data.dev, &data.alphabet, &data.inventory, spec.batch_size)?;
        progress.best_metric = Some(dev.get(metric));
        progress.best_dev = Some(Scores::from(&dev));
        save_checkpoint(&best, files.best())?;
    }
    let test = if data.test.is_empty() {
        None
    } else {
        Some(Scores::from(&evaluate(&best, &data.test, &data.alphabet, &data.inventory, spec.batch_size)?))
    };
    Ok(StageReport {
        name: spec.name.clone(),
        task: spec.task.clone(),
        starred: spec.starred,
        metric,
        epochs_run: progress.epochs_done,
        best_epoch: progress.best_epoch,
        best_dev_metric: progress.best_metric.expect("set above"),
        best_dev: progress.best_dev.expect("set above"),
        dev_history: progress.dev_history,
        loss_history: progress.loss_history,
        stopped_early: progress.stopped_early,
        skipped_infeasible: data.skipped_infeasible,
        transfer_verified: progress.transfer_verified,
        checkpoint: files.best(),
        lineage: best.lineage.clone(),
        test,
    })
}

/// Trains one stage from `start` and returns its best checkpoint and report.
/// Checkpoints go to `dir`.
pub fn run_stage(
    seed: u64,
    spec: &StageSpec,
    data: &StageData,
    start: ModelCheckpoint,
    dir: &Path,
) -> Result<(ModelCheckpoint, StageReport), ChainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = StageFiles { dir: dir.to_path_buf() };
    let opt = Sgd::new(spec.momentum, spec.clip_norm);
    let mut budget = None;
    let report = run_stage_from(seed, spec, data, &files, start.clone(), opt, start, StageProgress::default(), &mut budget, &mut |_| Ok(()))?;
    Ok((load_checkpoint(&report.checkpoint)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_reports_line_and_field() {
        let err = ChainSpec::parse("seed = 1\noutput_dir = \"x\"\n[[stage]]\nname = 3\n", Path::new(".")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 4"), "{msg}");
        let err = ChainSpec::parse("seed = 1\noutput_dir = \"x\"\nbogus = 2\nstage = []\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let text = r#"
seed = 7
output_dir = "runs"
[[stage]]
name = "asr"
task = "asr"
train = "data/train.jsonl"
dev = "data/dev.jsonl"
epochs = 1
lr = 0.01
"#;
        let spec = ChainSpec::parse(text, Path::new("/base")).unwrap();
        assert_eq!(spec.output_dir, Path::new("/base/runs"));
        assert_eq!(spec.stages[0].train, Path::new("/base/data/train.jsonl"));
        assert_eq!(spec.stages[0].patience, 5);
        assert_eq!(spec.stages[0].metric(), Metric::Wer);
        assert!(matches!(spec.validate(), Err(ChainError::Config(_))));
    }
}
