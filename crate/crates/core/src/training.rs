//! Mini-batch training loop.
//!
//! Every mini-batch runs, in order: a reconstruction (MSE) update, an
//! optional skeletal-Laplacian update, and an optional viewpoint update in
//! which the encoder and the rotation regressor see a rotated batch. All
//! updates share one Adam state. Randomness is derived from `(seed, epoch)`
//! for shuffling and `(seed, step)` within a step, so a run resumed from a
//! checkpoint replays exactly what an uninterrupted run would have done.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::SkeletonSequence;
use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;
use crate::model::{mse_loss, stack_batch, Model, ModelConfig, NormMode};
use crate::optim::{AdamConfig, AdamState};
use crate::viewpoint::{
    rotate_batch, rotation_matrix, sample_angles, EulerAngles, SsviHead, DEFAULT_SSVI_HIDDEN, SSVI_PREFIX,
};

/// The four combinations of the Laplacian and SSVI flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Ae,
    AeL,
    Grae,
    GraeL,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ae, Variant::AeL, Variant::Grae, Variant::GraeL];

    /// `(laplacian, ssvi)`.
    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Ae => (false, false),
            Variant::AeL => (true, false),
            Variant::Grae => (false, true),
            Variant::GraeL => (true, true),
        }
    }

    pub fn from_flags(laplacian: bool, ssvi: bool) -> Self {
        match (laplacian, ssvi) {
            (false, false) => Variant::Ae,
            (true, false) => Variant::AeL,
            (false, true) => Variant::Grae,
            (true, true) => Variant::GraeL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ae => "ae",
            Variant::AeL => "ae-l",
            Variant::Grae => "grae",
            Variant::GraeL => "grae-l",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected ae, ae-l, grae or grae-l)")))
    }
}

/// How the reconstruction and Laplacian terms are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combine {
    /// One update per term, in order.
    #[default]
    Sequential,
    /// One update on `mse + μ·r_skel`.
    WeightedSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub laplacian: bool,
    pub ssvi: bool,
    pub combine: Combine,
    /// Laplacian weight in weighted-sum mode.
    pub mu: f64,
    pub grl_lambda: f64,
    pub ssvi_hidden: usize,
    /// One rotation per sequence instead of one per mini-batch.
    pub per_sequence_angles: bool,
    /// With SSVI on, reconstruction updates also see the rotated batch, so
    /// the model never trains on unrotated data.
    pub rotate_all: bool,
    /// Steps between checkpoints; 0 disables periodic saving.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            laplacian: false,
            ssvi: false,
            combine: Combine::Sequential,
            mu: 1.0,
            grl_lambda: 1.0,
            ssvi_hidden: DEFAULT_SSVI_HIDDEN,
            per_sequence_angles: false,
            rotate_all: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        (self.laplacian, self.ssvi) = variant.flags();
        self
    }

    pub fn variant(&self) -> Variant {
        Variant::from_flags(self.laplacian, self.ssvi)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad("mu must be non-negative");
        }
        if !(self.grl_lambda > 0.0 && self.grl_lambda.is_finite()) {
            return bad("grl_lambda must be positive");
        }
        if self.ssvi_hidden == 0 {
            return bad("ssvi_hidden must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

/// Losses of one mini-batch. Absent terms were not computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub mse: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r_skel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssvi: Option<f64>,
    pub wall_ms: f64,
}

impl StepRecord {
    /// Loss values as bit patterns, for reproducibility checks.
    pub fn loss_bits(&self) -> (u64, Option<u64>, Option<u64>) {
        (self.mse.to_bits(), self.r_skel.map(f64::to_bits), self.ssvi.map(f64::to_bits))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mse: f64,
    pub r_skel: Option<f64>,
    pub ssvi: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    /// Per-epoch means of each logged term.
    pub fn epoch_means(&self) -> Vec<EpochSummary> {
        let mut out: Vec<EpochSummary> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for r in &self.records {
            if out.last().is_none_or(|e| e.epoch != r.epoch) {
                out.push(EpochSummary {
                    epoch: r.epoch,
                    mse: 0.0,
                    r_skel: r.r_skel.map(|_| 0.0),
                    ssvi: r.ssvi.map(|_| 0.0),
                });
                counts.push(0);
            }
            let e = out.last_mut().expect("pushed above");
            e.mse += r.mse;
            if let (Some(acc), Some(v)) = (e.r_skel.as_mut(), r.r_skel) {
                *acc += v;
            }
            if let (Some(acc), Some(v)) = (e.ssvi.as_mut(), r.ssvi) {
                *acc += v;
            }
            *counts.last_mut().expect("pushed above") += 1;
        }
        for (e, &c) in out.iter_mut().zip(&counts) {
            let c = c as f64;
            e.mse /= c;
            e.r_skel = e.r_skel.map(|v| v / c);
            e.ssvi = e.ssvi.map(|v| v / c);
        }
        out
    }

    /// One JSON object per line.
    pub fn write_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Model, optimizer and run description stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// SplitMix64 finalizer; decorrelates derived seeds.
fn mix(seed: u64, index: u64, stream: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_STEP: u64 = 2;
const STREAM_HEAD: u64 = 3;

/// Where and how often a run saves its state.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop once this many mini-batches have been processed in total.
    pub stop_at: Option<u64>,
    pub checkpoint_path: Option<PathBuf>,
}

pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Mini-batches completed so far.
    pub step: u64,
    pub log: TrainLog,
    head: Option<SsviHead>,
}

impl Trainer {
    /// Attaches a freshly initialized regressor head when SSVI is on.
    pub fn new(mut model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let head = if config.ssvi {
            let head = SsviHead::new(model.config().latent_dim, config.ssvi_hidden, config.grl_lambda)?;
            if SsviHead::from_params(&model.params, config.grl_lambda)?.is_none() {
                head.init(&mut model.params, &mut ChaCha8Rng::seed_from_u64(mix(config.seed, 0, STREAM_HEAD)));
            }
            Some(head)
        } else {
            None
        };
        let adam = AdamState::new(config.adam());
        Ok(Trainer { model, adam, config, step: 0, log: TrainLog::default(), head })
    }

    /// Rebuilds a trainer exactly as it was when `ckpt` was written.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let meta: RunMeta =
            serde_json::from_str(&ckpt.meta).map_err(|e| Error::format("checkpoint", format!("run metadata: {e}")))?;
        let model = Model::from_parts(&meta.model, ckpt.params.clone(), ckpt.buffers.clone())?;
        let mut trainer = Trainer::new(model, meta.train)?;
        if trainer.head.is_some() != SsviHead::from_params(&trainer.model.params, 1.0)?.is_some() {
            return Err(Error::format("checkpoint", "SSVI head presence disagrees with run metadata"));
        }
        trainer.adam = ckpt.adam.clone();
        trainer.step = ckpt.step;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = RunMeta { model: self.model.config().clone(), train: self.config.clone() };
        Checkpoint {
            meta: serde_json::to_string(&meta).expect("run metadata serializes"),
            step: self.step,
            params: self.model.params.clone(),
            buffers: self.model.buffers.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn batches_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        self.batches_per_epoch(n) * self.config.epochs as u64
    }

    fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.config.seed, epoch as u64, STREAM_SHUFFLE)));
        order
    }

    /// Trains until the epoch budget (or `opts.stop_at`) is exhausted.
    ///
    /// On divergence the error is returned and the checkpoint file, if any,
    /// still holds the last good state.
    pub fn run(&mut self, data: &[SkeletonSequence], graph: Option<&SkeletonGraph>, opts: &RunOptions) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("train", "empty dataset"));
        }
        let graph = if self.config.laplacian {
            let g = graph.ok_or_else(|| Error::Config("laplacian mode needs a skeleton graph".into()))?;
            if g.joints() != self.model.config().joints {
                return Err(Error::Config(format!(
                    "graph has {} joints but the model expects {}",
                    g.joints(),
                    self.model.config().joints
                )));
            }
            Some(g)
        } else {
            None
        };
        let per_epoch = self.batches_per_epoch(data.len());
        let end = opts.stop_at.map_or(self.total_steps(data.len()), |s| s.min(self.total_steps(data.len())));
        let mut order = Vec::new();
        let mut order_epoch = usize::MAX;
        while self.step < end {
            let epoch = (self.step / per_epoch) as usize;
            if epoch != order_epoch {
                order = self.epoch_order(data.len(), epoch);
                order_epoch = epoch;
            }
            let offset = (self.step % per_epoch) as usize * self.config.batch_size;
            let idx = &order[offset..(offset + self.config.batch_size).min(data.len())];
            let batch: Vec<&SkeletonSequence> = idx.iter().map(|&i| &data[i]).collect();
            let started = Instant::now();
            let record = match self.train_batch(&batch, graph, epoch) {
                Ok(mut r) => {
                    r.wall_ms = started.elapsed().as_secs_f64() * 1e3;
                    r
                }
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step: self.step }),
                Err(e) => return Err(e),
            };
            self.log.records.push(record);
            self.step += 1;
            if let Some(path) = &opts.checkpoint_path {
                let every = self.config.checkpoint_every;
                if (every > 0 && self.step.is_multiple_of(every)) || self.step == end {
                    self.checkpoint().save(path)?;
                }
            }
        }
        Ok(())
    }

    /// One mini-batch: MSE, optional Laplacian, optional SSVI.
    fn train_batch(
        &mut self,
        batch: &[&SkeletonSequence],
        graph: Option<&SkeletonGraph>,
        epoch: usize,
    ) -> Result<StepRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, self.step, STREAM_STEP));
        let mut x = stack_batch(batch)?;
        let mut targets = Vec::new();
        if self.head.is_some() {
            let count = if self.config.per_sequence_angles { batch.len() } else { 1 };
            targets = (0..count).map(|_| sample_angles(&mut rng)).collect::<Vec<EulerAngles>>();
            if self.config.rotate_all {
                let omegas: Vec<_> = targets.iter().map(rotation_matrix).collect();
                x = rotate_batch(&x, &omegas)?;
            }
        }
        let not_head = |n: &str| !n.starts_with(SSVI_PREFIX);
        let mut record = StepRecord { step: self.step, epoch, mse: 0.0, r_skel: None, ssvi: None, wall_ms: 0.0 };

        let weighted = graph.filter(|_| self.config.combine == Combine::WeightedSum);
        {
            let mut tape = Tape::new();
            let p = self.model.params.bind_where(&mut tape, not_head);
            let input = tape.constant(x.clone());
            let model = &mut self.model;
            let enc = model.plan.encode(&mut tape, &p, input)?;
            // Running statistics advance exactly once per mini-batch.
            let recon = model.plan.decode(&mut tape, &p, enc.z, &enc.pools, NormMode::Train(&mut model.buffers))?;
            let mse = mse_loss(&mut tape, input, recon)?;
            record.mse = check(tape.value(mse).item(), self.step)?;
            let mut root = mse;
            if let Some(g) = weighted {
                let r = tape.r_skel(recon, g)?;
                record.r_skel = Some(check(tape.value(r).item(), self.step)?);
                let scaled = tape.scale(r, self.config.mu)?;
                root = tape.add(mse, scaled)?;
            }
            let mut grads = tape.backward(root)?;
            self.adam.step(&mut self.model.params, &p.collect(&mut grads))?;
        }

        if let (Some(g), None) = (graph, weighted) {
            let mut tape = Tape::new();
            let p = self.model.params.bind_where(&mut tape, not_head);
            let input = tape.constant(x.clone());
            let (recon, _) = self.model.reconstruct(&mut tape, &p, input, NormMode::Batch)?;
            let r = tape.r_skel(recon, g)?;
            record.r_skel = Some(check(tape.value(r).item(), self.step)?);
            let mut grads = tape.backward(r)?;
            self.adam.step(&mut self.model.params, &p.collect(&mut grads))?;
        }

        if let Some(head) = self.head {
            let rotated = if self.config.rotate_all {
                x
            } else {
                let omegas: Vec<_> = targets.iter().map(rotation_matrix).collect();
                rotate_batch(&x, &omegas)?
            };
            let mut tape = Tape::new();
            let p = self.model.params.bind_where(&mut tape, |n| !n.starts_with("decoder."));
            let input = tape.constant(rotated);
            let enc = self.model.plan.encode(&mut tape, &p, input)?;
            let loss = head.loss(&mut tape, &p, enc.z, &targets)?;
            record.ssvi = Some(check(tape.value(loss).item(), self.step)?);
            let mut grads = tape.backward(loss)?;
            self.adam.step(&mut self.model.params, &p.collect(&mut grads))?;
        }
        Ok(record)
    }
}

fn check(v: f64, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged { step })
    }
}

/// Trains `model` on `data` for the configured epoch budget.
pub fn train(
    model: Model,
    data: &[SkeletonSequence],
    graph: Option<&SkeletonGraph>,
    config: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    let mut trainer = Trainer::new(model, config.clone())?;
    trainer.run(data, graph, &RunOptions::default())?;
    Ok((trainer.model, trainer.log))
}

/// Seeded stream for auxiliary randomness (e.g. test-set rotations) that
/// never collides with the training streams.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX, stream.wrapping_add(16)))
}
