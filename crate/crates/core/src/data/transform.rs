//! Temporal resampling and pose normalization.

use serde::{Deserialize, Serialize};

use super::{SkeletonSequence, COORDS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed sequence length used unless configured otherwise.
pub const DEFAULT_FRAMES: usize = 64;

/// Linearly interpolates every joint trajectory onto `t_fixed` evenly spaced
/// samples spanning the original first and last frames.
pub fn resample_temporal(seq: &SkeletonSequence, t_fixed: usize) -> Result<SkeletonSequence> {
    if t_fixed < 2 {
        return Err(Error::invalid("resample_temporal", format!("target length must be at least 2, got {t_fixed}")));
    }
    let t = seq.frames();
    if t == t_fixed {
        return Ok(seq.clone());
    }
    let m = seq.joints();
    let src = seq.coords().data();
    let mut out = vec![0.0; COORDS * m * t_fixed];
    for (row, dst) in src.chunks(t).zip(out.chunks_mut(t_fixed)) {
        for (k, v) in dst.iter_mut().enumerate() {
            *v = if t == 1 {
                row[0]
            } else if k == t_fixed - 1 {
                row[t - 1]
            } else {
                let u = (k * (t - 1)) as f64 / (t_fixed - 1) as f64;
                let i = (u.floor() as usize).min(t - 2);
                let frac = u - i as f64;
                row[i] + frac * (row[i + 1] - row[i])
            };
        }
    }
    seq.with_coords(Tensor::new(&[COORDS, m, t_fixed], out)?)
}

/// Which joints anchor the normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizeConfig {
    /// Joint moved to the origin in every frame (spine base in NTU order).
    pub root: usize,
    /// Other end of the torso segment whose mean length becomes the unit.
    pub torso_top: usize,
}

impl NormalizeConfig {
    /// Spine base (0) to spine shoulder (20).
    pub const NTU: NormalizeConfig = NormalizeConfig { root: 0, torso_top: 20 };
}

/// Centres the root joint at the origin per frame and rescales by the mean
/// torso length over the sequence.
pub fn normalize(seq: &SkeletonSequence, config: NormalizeConfig) -> Result<SkeletonSequence> {
    const OP: &str = "normalize";
    let (m, t) = (seq.joints(), seq.frames());
    if config.root >= m || config.torso_top >= m {
        return Err(Error::invalid(OP, format!("anchor joints {config:?} out of range for {m} joints")));
    }
    let torso: f64 = (0..t)
        .map(|f| {
            let (a, b) = (seq.point(config.root, f), seq.point(config.torso_top, f));
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / t as f64;
    if !(torso > 0.0) {
        return Err(Error::invalid(OP, "mean torso length is zero"));
    }
    let mut out = seq.coords().clone();
    let data = out.data_mut();
    for d in 0..COORDS {
        for f in 0..t {
            let origin = seq.at(d, config.root, f);
            for j in 0..m {
                let i = (d * m + j) * t + f;
                data[i] = (data[i] - origin) / torso;
            }
        }
    }
    seq.with_coords(out)
}
