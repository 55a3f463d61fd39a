//! Multi-seed comparison of training chains on the synthetic ladder.
//!
//! Per seed, the plain-transcription and coarse-tag rungs are trained once
//! and saved; every chain that starts from them is seeded from those saved
//! checkpoints instead of rerunning the rungs.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::curriculum::{run_chain, ChainError, ChainReport, ChainSpec, StageSpec};
use crate::metrics::Metric;
use crate::net::{ConvSpec, ModelConfig};
use crate::synthdata::{make_task_ladder_with, CorpusFiles, LadderOptions, SplitSizes, SynthError};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// Training schedule shared by every stage of the experiment.
#[derive(Debug, Clone, Serialize)]
pub struct Schedule {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub patience: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub ladder: LadderOptions,
    pub model: ModelConfig,
    /// Schedule of the upstream rungs (transcription, coarse tags, merged tags).
    pub upstream: Schedule,
    /// Schedule of the final target-domain stages.
    pub target: Schedule,
}

impl ExperimentOptions {
    /// Sizes that keep one seed's full set of chains within a few minutes on a single core.
    pub fn desk() -> Self {
        let ladder = LadderOptions {
            asr: SplitSizes { train: 240, dev: 30, test: 0 },
            ner: SplitSizes { train: 240, dev: 30, test: 0 },
            merged: SplitSizes { train: 160, dev: 30, test: 0 },
            target: SplitSizes { train: 48, dev: 40, test: 0 },
            domain_b: SplitSizes { train: 48, dev: 40, test: 0 },
            noise: 0.9,
            jitter: true,
            frames_per_char: 4,
            dim: 16,
        };
        let model = ModelConfig {
            input_dim: ladder.dim,
            conv: vec![ConvSpec { channels: 4, kernel: [3, 5], stride: [2, 2], padding: [1, 2] }],
            recurrent_layers: 2,
            hidden: 24,
            batch_norm: true,
            fc_size: 24,
            alphabet_size: 0,
            clip: 20.0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        };
        let upstream = Schedule { epochs: 24, lr: 0.003, lr_decay: 0.95, momentum: 0.9, batch_size: 8, patience: 0 };
        let target = Schedule { epochs: 40, ..upstream.clone() };
        Self { ladder, model, upstream, target }
    }
}

/// Final-stage dev CER of every compared chain for one seed.
#[derive(Debug, Clone, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Target domain trained alone.
    pub sf_only: f64,
    /// Transcription -> target domain.
    pub asr_sf: f64,
    /// Transcription -> coarse tags -> merged tags -> target domain.
    pub full_chain: f64,
    /// As `full_chain` with the last two stages in starred mode.
    pub full_chain_starred: f64,
    /// Second domain trained alone.
    pub domain_b_scratch: f64,
    /// Second domain seeded from the saved transcription -> coarse-tag checkpoint.
    pub domain_b_transfer: f64,
    /// Every transition in every chain passed the body-continuity check.
    pub transfers_verified: bool,
}

fn stage(name: &str, corpus: &CorpusFiles, starred: bool, sched: &Schedule) -> StageSpec {
    StageSpec {
        name: name.to_string(),
        task: corpus.task_id.clone(),
        train: corpus.train.clone(),
        dev: corpus.dev.clone(),
        test: None,
        inventory: (corpus.task_id != crate::synthdata::TASK_ASR).then(|| corpus.inventory.clone()),
        starred,
        epochs: sched.epochs,
        lr: sched.lr,
        lr_decay: sched.lr_decay,
        momentum: sched.momentum,
        patience: sched.patience,
        metric: Some(if corpus.task_id == crate::synthdata::TASK_ASR { Metric::Wer } else { Metric::Cer }),
        batch_size: sched.batch_size,
        clip_norm: Some(400.0),
    }
}

fn chain(seed: u64, out: PathBuf, model: Option<&ModelConfig>, init: Option<PathBuf>, stages: Vec<StageSpec>) -> ChainSpec {
    ChainSpec { seed, output_dir: out, init_checkpoint: init, model: model.cloned(), stages }
}

fn final_cer(report: &ChainReport) -> f64 {
    report.final_stage().expect("nonempty chain").best_dev.cer
}

fn verified(report: &ChainReport, seeded: bool) -> bool {
    report.stages.iter().enumerate().all(|(i, s)| s.transfer_verified || (i == 0 && !seeded))
}

/// Generates the seed's corpora under `work` and runs every chain.
pub fn run_seed(seed: u64, opts: &ExperimentOptions, work: &Path) -> Result<SeedOutcome, ExperimentError> {
    let ladder = make_task_ladder_with(seed, &opts.ladder)?;
    let corpora = ladder.write(&work.join("data"))?;
    let [asr, ner, merged, target, dom_b] = <[CorpusFiles; 5]>::try_from(corpora).expect("five corpora");
    let runs = work.join("runs");
    let (up, tgt) = (&opts.upstream, &opts.target);
    let model = Some(&opts.model);

    let base = run_chain(&chain(seed, runs.join("asr_ner"), model, None, vec![stage("asr", &asr, false, up), stage("ner", &ner, false, up)]))?;
    let asr_ckpt = base.stages[0].checkpoint.clone();
    let ner_ckpt = base.stages[1].checkpoint.clone();

    let sf_only = run_chain(&chain(seed, runs.join("sf"), model, None, vec![stage("sf_a", &target, false, tgt)]))?;
    let asr_sf = run_chain(&chain(seed, runs.join("asr_sf"), None, Some(asr_ckpt), vec![stage("sf_a", &target, false, tgt)]))?;
    let full = run_chain(&chain(
        seed,
        runs.join("full"),
        None,
        Some(ner_ckpt.clone()),
        vec![stage("sf_ab", &merged, false, up), stage("sf_a", &target, false, tgt)],
    ))?;
    let starred = run_chain(&chain(
        seed,
        runs.join("full_starred"),
        None,
        Some(ner_ckpt.clone()),
        vec![stage("sf_ab_star", &merged, true, up), stage("sf_a_star", &target, true, tgt)],
    ))?;
    let b_scratch = run_chain(&chain(seed, runs.join("b"), model, None, vec![stage("sf_b", &dom_b, false, tgt)]))?;
    let b_transfer = run_chain(&chain(seed, runs.join("asr_ner_b"), None, Some(ner_ckpt), vec![stage("sf_b", &dom_b, false, tgt)]))?;

    let transfers_verified = verified(&base, false)
        && verified(&sf_only, false)
        && verified(&asr_sf, true)
        && verified(&full, true)
        && verified(&starred, true)
        && verified(&b_scratch, false)
        && verified(&b_transfer, true);
    Ok(SeedOutcome {
        seed,
        sf_only: final_cer(&sf_only),
        asr_sf: final_cer(&asr_sf),
        full_chain: final_cer(&full),
        full_chain_starred: final_cer(&starred),
        domain_b_scratch: final_cer(&b_scratch),
        domain_b_transfer: final_cer(&b_transfer),
        transfers_verified,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
