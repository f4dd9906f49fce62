//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skelae::autodiff::{Tape, Var};
use skelae::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values at least `gap` apart, shuffled: no two cells can tie under a
/// finite-difference perturbation smaller than `gap / 2`.
pub fn tie_free(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).unwrap()
}

/// Values bounded away from zero by `margin`, so ReLU kinks stay out of reach.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(margin..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// `Σ r ⊙ y` with fixed random weights `r`, so every output cell carries a
/// distinct gradient.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> skelae::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let r = tape.constant(uniform(&mut rng(seed), &shape, -1.0, 1.0));
    let prod = tape.mul(y, r)?;
    tape.sum(prod)
}

/// Direct quadruple-loop cross-correlation without bias. Each output sums
/// its taps in (c_in, kh, kw) order from +0.0.
pub fn naive_conv2d(x: &Tensor, k: &Tensor, stride: (usize, usize), pad: (usize, usize)) -> Tensor {
    let (n, ci, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, kh, kw) = (k.dim(0), k.dim(2), k.dim(3));
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (w + 2 * pad.1 - kw) / stride.1 + 1;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let ih = (oh * stride.0 + i) as isize - pad.0 as isize;
                                let iw = (ow * stride.1 + j) as isize - pad.1 as isize;
                                if ih < 0 || iw < 0 || ih as usize >= h || iw as usize >= w {
                                    continue;
                                }
                                let xv = xd[((b * ci + c) * h + ih as usize) * w + iw as usize];
                                acc += xv * kd[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * co + o) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, co, ho, wo], out).unwrap()
}

/// Transposed convolution by direct scatter: every input cell adds its
/// kernel-weighted footprint to the output.
pub fn naive_deconv2d(x: &Tensor, k: &Tensor, stride: (usize, usize), pad: (usize, usize)) -> Tensor {
    let (n, ci, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, kh, kw) = (k.dim(1), k.dim(2), k.dim(3));
    let ho = (h - 1) * stride.0 + kh - 2 * pad.0;
    let wo = (w - 1) * stride.1 + kw - 2 * pad.1;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for c in 0..ci {
            for ih in 0..h {
                for iw in 0..w {
                    let xv = x.data()[((b * ci + c) * h + ih) * w + iw];
                    for o in 0..co {
                        for i in 0..kh {
                            for j in 0..kw {
                                let oh = (ih * stride.0 + i) as isize - pad.0 as isize;
                                let ow = (iw * stride.1 + j) as isize - pad.1 as isize;
                                if oh < 0 || ow < 0 || oh as usize >= ho || ow as usize >= wo {
                                    continue;
                                }
                                out[((b * co + o) * ho + oh as usize) * wo + ow as usize] +=
                                    xv * k.data()[((c * co + o) * kh + i) * kw + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, co, ho, wo], out).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
