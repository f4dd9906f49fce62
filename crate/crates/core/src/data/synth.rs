//! Labelled synthetic motions standing in for a real capture corpus.
//!
//! Every class is a fixed pattern of per-joint, per-axis oscillations around
//! a shared rest pose. Sequences of a class differ by a small phase offset,
//! an amplitude scale and optional Gaussian noise.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, SequenceMeta, SkeletonSequence, SplitKind, COORDS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub joints: usize,
    pub frames: usize,
    /// Standard deviation of the additive coordinate noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { classes: 4, per_class: 50, joints: 9, frames: 32, noise: 0.05, seed: 0 }
    }
}

/// Fraction of each class assigned to the training side.
const TRAIN_FRACTION_PERCENT: usize = 70;
const PHASE_JITTER: f64 = 0.3;
const AMPLITUDE_JITTER: f64 = 0.1;

struct Oscillation {
    amplitude: f64,
    cycles: f64,
    phase: f64,
}

pub fn synth_dataset(config: &SynthConfig) -> Result<DatasetSplit> {
    const OP: &str = "synth_dataset";
    if config.classes < 2 {
        return Err(Error::invalid(OP, "at least two classes are required"));
    }
    if config.joints < 2 || config.frames < 2 || config.per_class == 0 {
        return Err(Error::invalid(OP, "need >= 2 joints, >= 2 frames and >= 1 sequence per class"));
    }
    if !(config.noise >= 0.0 && config.noise.is_finite()) {
        return Err(Error::invalid(OP, format!("noise must be non-negative, got {}", config.noise)));
    }
    let (m, t) = (config.joints, config.frames);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Rest pose: root at the origin, joint 1 one unit above it.
    let rest: Vec<[f64; 3]> = (0..m)
        .map(|j| match j {
            0 => [0.0, 0.0, 0.0],
            1 => [0.0, 1.0, 0.0],
            _ => [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.5), rng.random_range(-0.5..0.5)],
        })
        .collect();

    let patterns: Vec<Vec<Oscillation>> = (0..config.classes)
        .map(|_| {
            (0..m)
                .flat_map(|_| {
                    let cycles = rng.random_range(1..=4) as f64;
                    (0..COORDS)
                        .map(|_| Oscillation {
                            amplitude: rng.random_range(0.1..0.5),
                            cycles,
                            phase: rng.random_range(0.0..TAU),
                        })
                        .collect::<Vec<_>>()
                })
                .collect()
        })
        .collect();

    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::invalid(OP, e.to_string()))?;
    let n_train = (config.per_class * TRAIN_FRACTION_PERCENT + 50) / 100;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, pattern) in patterns.iter().enumerate() {
        for i in 0..config.per_class {
            let shift = rng.random_range(-PHASE_JITTER..PHASE_JITTER);
            let scale = 1.0 + rng.random_range(-AMPLITUDE_JITTER..AMPLITUDE_JITTER);
            let mut data = vec![0.0; COORDS * m * t];
            for d in 0..COORDS {
                for j in 0..m {
                    let osc = &pattern[j * COORDS + d];
                    for k in 0..t {
                        let tau = k as f64 / t as f64;
                        let mut v =
                            rest[j][d] + scale * osc.amplitude * (TAU * osc.cycles * tau + osc.phase + shift).sin();
                        if config.noise > 0.0 {
                            v += noise.sample(&mut rng);
                        }
                        data[(d * m + j) * t + k] = v;
                    }
                }
            }
            let meta =
                SequenceMeta { id: (class * config.per_class + i) as u64, label: Some(class), ..Default::default() };
            let seq = SkeletonSequence::new(Tensor::new(&[COORDS, m, t], data)?, meta)?;
            if i < n_train {
                train.push(seq);
            } else {
                test.push(seq);
            }
        }
    }
    let names = (0..config.classes).map(|c| format!("class-{c}")).collect();
    DatasetSplit::new(train, test, SplitKind::Synthetic, names)
}
