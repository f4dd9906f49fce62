//! Synthetic viewpoints and the adversarial rotation regressor.
//!
//! A viewpoint is an Euler triplet `(α, β, γ)` about the x, y and z axes.
//! Joints are row vectors, so a frame `X` (m × 3) is rotated as `X·Ω` with
//! `Ω = Ωx(α)·Ωy(β)·Ωz(γ)`, each factor the transpose of the usual
//! counter-clockwise column-vector rotation.
//!
//! The regressor head reads the encoder code through a gradient-reversal
//! layer: the head is trained to recover the angles while the encoder is
//! trained to make that impossible.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{SkeletonSequence, COORDS};
use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, Bound, ParamStore};
use crate::tensor::Tensor;

/// Pitch, yaw and roll in radians, each in `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl EulerAngles {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        for v in [alpha, beta, gamma] {
            if !(v.is_finite() && (0.0..TAU).contains(&v)) {
                return Err(Error::invalid("euler_angles", format!("angle {v} outside [0, 2π)")));
            }
        }
        Ok(EulerAngles { alpha, beta, gamma })
    }

    pub const ZERO: EulerAngles = EulerAngles { alpha: 0.0, beta: 0.0, gamma: 0.0 };

    /// Regression target in `[0, 1)³`.
    pub fn normalized(&self) -> [f64; 3] {
        [self.alpha / TAU, self.beta / TAU, self.gamma / TAU]
    }
}

pub type Matrix3 = [[f64; 3]; 3];

fn matmul3(a: &Matrix3, b: &Matrix3) -> Matrix3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn transpose3(a: &Matrix3) -> Matrix3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn determinant3(a: &Matrix3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// `Ωx(α)·Ωy(β)·Ωz(γ)` for row-vector right-multiplication.
pub fn rotation_matrix(angles: &EulerAngles) -> Matrix3 {
    let (sa, ca) = angles.alpha.sin_cos();
    let (sb, cb) = angles.beta.sin_cos();
    let (sg, cg) = angles.gamma.sin_cos();
    let x = [[1.0, 0.0, 0.0], [0.0, ca, sa], [0.0, -sa, ca]];
    let y = [[cb, 0.0, -sb], [0.0, 1.0, 0.0], [sb, 0.0, cb]];
    let z = [[cg, sg, 0.0], [-sg, cg, 0.0], [0.0, 0.0, 1.0]];
    matmul3(&matmul3(&x, &y), &z)
}

/// Right-multiplies every frame's `m × 3` joint matrix by `omega`.
pub fn rotate_sequence(seq: &SkeletonSequence, omega: &Matrix3) -> Result<SkeletonSequence> {
    let coords = seq.coords();
    if coords.dim(0) != COORDS {
        return Err(Error::shape("rotate_sequence", "coordinate dimension d", COORDS, coords.dim(0)));
    }
    let plane = seq.joints() * seq.frames();
    let mut out = vec![0.0; coords.numel()];
    rotate_planes(coords.data(), &mut out, plane, omega);
    seq.with_coords(Tensor::new(coords.shape(), out)?)
}

/// Three independent uniform draws in `[0, 2π)`.
pub fn sample_angles(rng: &mut impl Rng) -> EulerAngles {
    EulerAngles {
        alpha: rng.random_range(0.0..TAU),
        beta: rng.random_range(0.0..TAU),
        gamma: rng.random_range(0.0..TAU),
    }
}

/// One-hidden-layer ReLU regressor with a sigmoid readout of the three
/// normalized angles, fed through a gradient-reversal layer. Its parameters
/// live in the model's store under `ssvi.*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsviHead {
    pub latent: usize,
    pub hidden: usize,
    pub lambda: f64,
}

pub const DEFAULT_SSVI_HIDDEN: usize = 128;
pub const SSVI_PREFIX: &str = "ssvi.";

const HIDDEN_W: &str = "ssvi.hidden.weight";
const HIDDEN_B: &str = "ssvi.hidden.bias";
const OUT_W: &str = "ssvi.out.weight";
const OUT_B: &str = "ssvi.out.bias";

impl SsviHead {
    pub fn new(latent: usize, hidden: usize, lambda: f64) -> Result<Self> {
        if latent == 0 || hidden == 0 {
            return Err(Error::invalid("ssvi_head", "latent and hidden widths must be positive"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid("ssvi_head", format!("GRL strength must be positive, got {lambda}")));
        }
        Ok(SsviHead { latent, hidden, lambda })
    }

    /// Adds freshly initialized head parameters to `store`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let (l, h) = (self.latent, self.hidden);
        store.insert(HIDDEN_W, uniform_fan_in(&[l, h], l, rng));
        store.insert(HIDDEN_B, uniform_fan_in(&[h], l, rng));
        store.insert(OUT_W, uniform_fan_in(&[h, 3], h, rng));
        store.insert(OUT_B, uniform_fan_in(&[3], h, rng));
    }

    /// Recovers the head geometry from stored parameters, if present.
    pub fn from_params(store: &ParamStore, lambda: f64) -> Result<Option<Self>> {
        let Some(hw) = store.get(HIDDEN_W) else {
            return Ok(None);
        };
        let bad = || Error::format("ssvi head", "inconsistent parameter shapes");
        if hw.rank() != 2 {
            return Err(bad());
        }
        let (latent, hidden) = (hw.dim(0), hw.dim(1));
        let expect: [(&str, &[usize]); 3] = [(HIDDEN_B, &[hidden]), (OUT_W, &[hidden, 3]), (OUT_B, &[3])];
        for (name, shape) in expect {
            if store.require(name)?.shape() != shape {
                return Err(bad());
            }
        }
        SsviHead::new(latent, hidden, lambda).map(Some)
    }

    /// Sigmoid readout `[N, 3]` for codes `z [N, latent]`. The input passes
    /// through the reversal layer first.
    pub fn predict(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let reversed = tape.grl(z, self.lambda)?;
        self.readout(tape, bound, reversed)
    }

    /// Readout without the reversal layer.
    pub fn readout(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
        let h = tape.dense(input, bound.var(HIDDEN_W), bound.var(HIDDEN_B))?;
        let h = tape.relu(h)?;
        let o = tape.dense(h, bound.var(OUT_W), bound.var(OUT_B))?;
        tape.sigmoid(o)
    }

    /// L1 regression loss: batch mean of `Σ_angles |readout − angle/2π|`.
    ///
    /// `targets` holds one triplet per sample, or a single triplet shared by
    /// the whole batch.
    pub fn loss(&self, tape: &mut Tape, bound: &Bound, z: Var, targets: &[EulerAngles]) -> Result<Var> {
        let pred = self.predict(tape, bound, z)?;
        l1_angle_loss(tape, pred, targets)
    }
}

/// Rotates every sample of a `[N, 3, m, t]` batch; `omegas` holds one
/// matrix per sample or one shared by all.
pub fn rotate_batch(x: &Tensor, omegas: &[Matrix3]) -> Result<Tensor> {
    x.expect_rank("rotate_batch", 4)?;
    let n = x.dim(0);
    if x.dim(1) != COORDS {
        return Err(Error::shape("rotate_batch", "coordinate dimension d", COORDS, x.dim(1)));
    }
    if omegas.len() != n && omegas.len() != 1 {
        return Err(Error::shape("rotate_batch", "rotation count", n, omegas.len()));
    }
    let plane = x.dim(2) * x.dim(3);
    let mut out = vec![0.0; x.numel()];
    for (i, (src, dst)) in x.data().chunks(3 * plane).zip(out.chunks_mut(3 * plane)).enumerate() {
        rotate_planes(src, dst, plane, &omegas[if omegas.len() == 1 { 0 } else { i }]);
    }
    Tensor::new(x.shape(), out)
}

fn rotate_planes(src: &[f64], dst: &mut [f64], plane: usize, omega: &Matrix3) {
    for p in 0..plane {
        let v = [src[p], src[plane + p], src[2 * plane + p]];
        for c in 0..3 {
            dst[c * plane + p] = v[0] * omega[0][c] + v[1] * omega[1][c] + v[2] * omega[2][c];
        }
    }
}

/// `mean_n Σ_k |pred[n, k] − target_k/2π|` for a `[N, 3]` prediction.
pub fn l1_angle_loss(tape: &mut Tape, pred: Var, targets: &[EulerAngles]) -> Result<Var> {
    const OP: &str = "ssvi_loss";
    let p = tape.value(pred);
    p.expect_rank(OP, 2)?;
    let n = p.dim(0);
    if n == 0 {
        return Err(Error::invalid(OP, "empty batch"));
    }
    if p.dim(1) != 3 {
        return Err(Error::shape(OP, "readout width", 3, p.dim(1)));
    }
    if targets.len() != n && targets.len() != 1 {
        return Err(Error::shape(OP, "target count", n, targets.len()));
    }
    let data = (0..n).flat_map(|i| targets[if targets.len() == 1 { 0 } else { i }].normalized()).collect();
    let target = tape.constant(Tensor::new(&[n, 3], data)?);
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff)?;
    let total = tape.sum(abs)?;
    tape.scale(total, 1.0 / n as f64)
}
