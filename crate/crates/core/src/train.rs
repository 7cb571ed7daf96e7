//! Training loop: sample pairs, evaluate the loss, apply Adam, checkpoint.
//!
//! Every step draws its batch and noise from a generator keyed by
//! `(seed, step)`, so a run resumed from any checkpoint replays the same
//! batches as an uninterrupted one.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use dvae_nn::{Adam, Graph, Mode, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SegmentPair};
use crate::error::{Error, Result};
use crate::model::{Model, PairBatch, PairNoise};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub precision: Precision,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_grad_norm: Option<f64>,
    /// Print a progress line every this many steps; 0 disables it.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 1e-4,
            beta: 1.0,
            total_steps: 2000,
            checkpoint_every: 500,
            seed: 0,
            precision: Precision::F32,
            clip_grad_norm: None,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Param("train.batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Param(format!("train.lr {} must be positive", self.lr)));
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return Err(Error::Param(format!("train.beta {} must be >= 1", self.beta)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Param("train.checkpoint_every must be at least 1".into()));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Param("train.clip_grad_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Loss components of one step, averaged over the batch's pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub total: f64,
    /// Decoder reconstruction plus post-net reconstruction.
    pub recon: f64,
    pub elbo_recon: f64,
    pub postnet_recon: f64,
    pub kl_s: f64,
    pub kl_c: f64,
}

impl StepStats {
    pub fn kl(&self) -> f64 {
        self.kl_s + self.kl_c
    }
}

/// Generator for step `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn cast_batch<F: Scalar>(b: &PairBatch<f32>) -> PairBatch<F> {
    PairBatch {
        pairs: b.pairs,
        data: b.data.iter().map(|&v| F::lit(v as f64)).collect(),
    }
}

fn provenance(pairs: &[SegmentPair]) -> String {
    pairs
        .iter()
        .map(|p| format!("{}:{}@{}+{}@{}", p.speaker_id, p.utterances.0, p.offsets.0, p.utterances.1, p.offsets.1))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Loss, gradients and one Adam update on a prepared batch.
pub fn train_step<F: Scalar>(
    model: &mut Model<F>,
    batch: &PairBatch<F>,
    noise: &PairNoise<F>,
    adam: &Adam,
    clip: Option<f64>,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let loss = model.net.pair_loss(&mut g, &mut model.params, batch, noise, Mode::Train)?;
    let val = |v| g.scalar(v).to_f64().unwrap_or(f64::NAN);
    let stats = StepStats {
        total: val(loss.total),
        recon: val(loss.elbo_recon) + val(loss.postnet_recon),
        elbo_recon: val(loss.elbo_recon),
        postnet_recon: val(loss.postnet_recon),
        kl_s: val(loss.kl_s),
        kl_c: val(loss.kl_c),
    };
    if !stats.total.is_finite() {
        return Err(Error::Param(format!("non-finite loss {}", stats.total)));
    }
    let grads = g.backward(loss.total)?;
    grads.write_to(&mut model.params);
    if let Some(c) = clip {
        model.params.clip_grad_norm(F::lit(c));
    }
    adam.step(&mut model.params)?;
    model.params.clear_grads();
    Ok(stats)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub first: Option<StepStats>,
    pub last: Option<StepStats>,
}

pub const LOSS_LOG: &str = "loss.csv";

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("ckpt_{step:07}.dvc"))
}

/// Runs steps `start..cfg.total_steps`, where `start` is the model's Adam
/// step count (0 for a fresh model, the checkpoint step after a resume).
pub fn train_loop<F: Scalar>(dataset: &Dataset, model: &mut Model<F>, cfg: &TrainConfig, out: impl AsRef<Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = out.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::from(e).at(out))?;
    model.net.config.beta = cfg.beta;
    let start = model.params.iter().map(|p| p.step_count).max().unwrap_or(0);
    if start > cfg.total_steps {
        return Err(Error::Param(format!(
            "checkpoint is at step {start}, beyond train.total_steps {}",
            cfg.total_steps
        )));
    }
    let log_path = out.join(LOSS_LOG);
    let mut log = open_log(&log_path, start)?;
    let adam = Adam::new(cfg.lr);
    let mut summary = TrainSummary {
        checkpoints: Vec::new(),
        final_checkpoint: checkpoint_path(out, start),
        loss_log: log_path.clone(),
        first: None,
        last: None,
    };
    if start == 0 {
        let p = checkpoint_path(out, 0);
        model.save(&p, cfg.seed)?;
        summary.checkpoints.push(p);
    }
    for step in start..cfg.total_steps {
        let mut rng = step_rng(cfg.seed, step);
        let (batch, drawn) = dataset.sample_batch(cfg.batch_size, &mut rng);
        let noise = PairNoise::<F>::sample(model.config(), cfg.batch_size, &mut rng);
        let stats = train_step(model, &cast_batch(&batch), &noise, &adam, cfg.clip_grad_norm).map_err(|e| match e {
            Error::Param(detail) | Error::Domain(detail) => Error::Diverged {
                step,
                detail: format!("{detail}; batch [{}]", provenance(&drawn)),
            },
            Error::Nn(dvae_nn::NnError::NonFinite(op)) => Error::Diverged {
                step,
                detail: format!("non-finite value in {op}; batch [{}]", provenance(&drawn)),
            },
            other => other,
        })?;
        writeln!(log, "{},{},{},{}", step, stats.total, stats.recon, stats.kl()).map_err(|e| Error::from(e).at(&log_path))?;
        summary.first.get_or_insert(stats);
        summary.last = Some(stats);
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.total_steps) {
            eprintln!(
                "step {step}: total {:.5} recon {:.5} kl_s {:.4} kl_c {:.4}",
                stats.total, stats.recon, stats.kl_s, stats.kl_c
            );
        }
        let done = step + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.total_steps {
            log.flush().map_err(|e| Error::from(e).at(&log_path))?;
            let p = checkpoint_path(out, done);
            model.save(&p, cfg.seed)?;
            summary.checkpoints.push(p);
        }
    }
    log.flush().map_err(|e| Error::from(e).at(&log_path))?;
    if let Some(p) = summary.checkpoints.last() {
        summary.final_checkpoint = p.clone();
    }
    Ok(summary)
}

/// Opens the loss log for appending after keeping only rows of steps
/// before `start`.
fn open_log(path: &Path, start: u64) -> Result<File> {
    let header = "step,total,recon,kl";
    let mut kept = vec![header.to_string()];
    if start > 0 && path.exists() {
        let f = File::open(path).map_err(|e| Error::from(e).at(path))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::from(e).at(path))?;
            let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
            if step.is_some_and(|s| s < start) {
                kept.push(line);
            }
        }
    }
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::from(e).at(path))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::from(e).at(path))?;
    }
    Ok(f)
}

/// Loads a checkpoint written by [`train_loop`] to continue training.
pub fn resume<F: Scalar>(path: impl AsRef<Path>) -> Result<(Model<F>, u64)> {
    let (model, header) = Model::<f32>::load(path)?;
    Ok((model.cast(), header.step))
}
