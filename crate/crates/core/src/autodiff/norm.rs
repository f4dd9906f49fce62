//! Per-channel batch normalization over `(N, H, W)`.

use super::{Function, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weight of the newest batch in the running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels], momentum: BN_MOMENTUM }
    }

    /// Folds one batch's statistics into the moving averages. The running
    /// variance uses the unbiased estimate when more than one value was seen.
    pub fn update(&mut self, batch: &BatchStats) {
        let m = self.momentum;
        let correction = if batch.count > 1 { batch.count as f64 / (batch.count - 1) as f64 } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - m) * self.mean[c] + m * batch.mean[c];
            self.var[c] = (1.0 - m) * self.var[c] + m * batch.var[c] * correction;
        }
    }
}

/// Biased per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub enum BatchNormMode<'a> {
    /// Normalize with batch statistics and fold them into the running stats.
    Train(&'a mut RunningStats),
    /// Normalize with the stored running statistics.
    Eval(&'a RunningStats),
}

struct BatchNorm {
    /// (x - mean) / sqrt(var + eps), kept from the forward pass.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Whether the statistics came from the batch (and so depend on x).
    batch_stats: bool,
}

impl Function for BatchNorm {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c) = (x.dim(0), x.dim(1));
        let plane = x.dim(2) * x.dim(3);
        let count = (n * plane) as f64;
        let g = grad.data();

        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for p in off..off + plane {
                    dgamma[ch] += g[p] * self.xhat[p];
                    dbeta[ch] += g[p];
                }
            }
        }

        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; x.numel()];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * plane;
                    let scale = gamma.data()[ch] * self.inv_std[ch];
                    for p in off..off + plane {
                        dx[p] = if self.batch_stats {
                            // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                            scale * (g[p] - dbeta[ch] / count - self.xhat[p] * dgamma[ch] / count)
                        } else {
                            scale * g[p]
                        };
                    }
                }
            }
            Tensor::new(x.shape(), dx).expect("bn dx")
        });
        vec![dx, needs[1].then(|| Tensor::from_vec(dgamma)), needs[2].then(|| Tensor::from_vec(dbeta))]
    }
}

/// Mean and biased variance of one channel. The mean is accumulated relative
/// to the first element, so a constant channel has exactly that mean.
fn channel_stats(x: &[f64], n: usize, c: usize, ch: usize, plane: usize) -> (f64, f64) {
    let shift = x[ch * plane];
    let count = (n * plane) as f64;
    let mut acc = 0.0;
    for s in 0..n {
        let off = (s * c + ch) * plane;
        acc += x[off..off + plane].iter().map(|v| v - shift).sum::<f64>();
    }
    let mean = shift + acc / count;
    let mut var = 0.0;
    for s in 0..n {
        let off = (s * c + ch) * plane;
        var += x[off..off + plane].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    (mean, var / count)
}

impl Tape {
    pub fn batchnorm2d(&mut self, input: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_>, eps: f64) -> Result<Var> {
        const OP: &str = "batchnorm2d";
        let x = self.value(input);
        x.expect_rank(OP, 4)?;
        let (n, c, plane) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        if n == 0 {
            return Err(Error::invalid(OP, "batch size must be at least 1"));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid(OP, format!("eps must be positive, got {eps}")));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let t = self.value(v);
            if t.shape() != [c] {
                return Err(Error::shape(OP, format!("{name} length (channels)"), c, format!("{:?}", t.shape())));
            }
        }

        let (mean, var, batch_stats) = match &mode {
            BatchNormMode::Train(_) => {
                let (mean, var): (Vec<f64>, Vec<f64>) =
                    (0..c).map(|ch| channel_stats(x.data(), n, c, ch, plane)).unzip();
                (mean, var, true)
            }
            BatchNormMode::Eval(rs) => {
                if rs.mean.len() != c || rs.var.len() != c {
                    return Err(Error::shape(OP, "running stats length", c, rs.mean.len()));
                }
                (rs.mean.clone(), rs.var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for p in off..off + plane {
                    xhat[p] = (x.data()[p] - mean[ch]) * inv_std[ch];
                    out[p] = gd[ch] * xhat[p] + bd[ch];
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        if let BatchNormMode::Train(rs) = mode {
            if rs.mean.len() != c {
                return Err(Error::shape(OP, "running stats length", c, rs.mean.len()));
            }
            rs.update(&BatchStats { mean, var, count: n * plane });
        }
        self.apply(BatchNorm { xhat, inv_std, batch_stats }, &[input, gamma, beta], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 2 * 5).map(|i| ((i * 37 % 17) as f64).sin() * 3.0 + 1.0).collect();
        let x = tape.constant(Tensor::new(&[2, 3, 2, 5], data).unwrap());
        let gamma = tape.constant(Tensor::full(&[3], 1.0));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let mut rs = RunningStats::new(3);
        let y = tape.batchnorm2d(x, gamma, beta, BatchNormMode::Train(&mut rs), 1e-12).unwrap();
        let y = tape.value(y);
        for ch in 0..3 {
            let vals: Vec<f64> =
                (0..2).flat_map(|s| y.data()[(s * 3 + ch) * 10..(s * 3 + ch + 1) * 10].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
        assert!(rs.mean.iter().all(|m| *m != 0.0));
    }

    #[test]
    fn identical_values_map_to_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 2, 2, 2], 0.1));
        let gamma = tape.constant(Tensor::from_vec(vec![2.0, -1.5]));
        let beta = tape.constant(Tensor::from_vec(vec![0.25, -3.0]));
        let mut rs = RunningStats::new(2);
        let y = tape.batchnorm2d(x, gamma, beta, BatchNormMode::Train(&mut rs), 1e-5).unwrap();
        for (i, v) in tape.value(y).data().iter().enumerate() {
            let ch = (i / 4) % 2;
            assert_eq!(*v, [0.25, -3.0][ch]);
        }
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 1, 2], 3.0));
        let gamma = tape.constant(Tensor::from_vec(vec![1.0]));
        let beta = tape.constant(Tensor::from_vec(vec![0.0]));
        let rs = RunningStats { mean: vec![1.0], var: vec![4.0], momentum: BN_MOMENTUM };
        let y = tape.batchnorm2d(x, gamma, beta, BatchNormMode::Eval(&rs), 1e-300).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0]);
    }

    #[test]
    fn rejects_bad_eps() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 1, 2]));
        let gamma = tape.constant(Tensor::from_vec(vec![1.0]));
        let beta = tape.constant(Tensor::from_vec(vec![0.0]));
        let mut rs = RunningStats::new(1);
        assert!(tape.batchnorm2d(x, gamma, beta, BatchNormMode::Train(&mut rs), 0.0).is_err());
    }
}
