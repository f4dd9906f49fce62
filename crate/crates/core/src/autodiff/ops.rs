//! Elementwise, reduction and affine operations.

use super::gemm::{gemm_abt, gemm_acc, gemm_atb};
use super::{Function, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, "operand shape", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

/// Backward rule for an elementwise unary map with derivative `d(x, y)`.
struct Unary {
    name: &'static str,
    deriv: fn(f64, f64) -> f64,
}

impl Function for Unary {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let d = self.deriv;
        let data =
            inputs[0].data().iter().zip(output.data()).zip(grad.data()).map(|((&x, &y), &g)| g * d(x, y)).collect();
        vec![Some(Tensor::new(grad.shape(), data).expect("unary grad"))]
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Function for Binary {
    fn name(&self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        match self {
            Binary::Add => vec![Some(grad.clone()), Some(grad.clone())],
            Binary::Sub => vec![Some(grad.clone()), needs[1].then(|| grad.map(|g| -g))],
            Binary::Mul => vec![
                needs[0].then(|| grad.zip_map(inputs[1], |g, b| g * b)),
                needs[1].then(|| grad.zip_map(inputs[0], |g, a| g * a)),
            ],
        }
    }
}

struct Scale(f64);

impl Function for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let c = self.0;
        vec![Some(grad.map(|g| g * c))]
    }
}

/// Identity forward; multiplies the incoming gradient by `-lambda`.
struct GradientReversal {
    lambda: f64,
}

impl Function for GradientReversal {
    fn name(&self) -> &'static str {
        "grl"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let factor = -self.lambda;
        vec![Some(grad.map(|g| factor * g))]
    }
}

struct Sum;

impl Function for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.item()))]
    }
}

struct Reshape;

impl Function for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.reshape(inputs[0].shape()).expect("reshape grad"))]
    }
}

/// `y = x·W + b` for `x [N, F_in]`, `W [F_in, F_out]`, `b [F_out]`.
struct Dense;

impl Function for Dense {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, f_in, f_out) = (x.dim(0), x.dim(1), w.dim(1));
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; n * f_in];
            gemm_abt(n, f_out, f_in, grad.data(), w.data(), &mut dx);
            Tensor::new(x.shape(), dx).expect("dense dx")
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; f_in * f_out];
            gemm_atb(n, f_in, f_out, x.data(), grad.data(), &mut dw);
            Tensor::new(w.shape(), dw).expect("dense dw")
        });
        let db = needs[2].then(|| {
            let mut db = vec![0.0; f_out];
            for row in grad.data().chunks(f_out) {
                for (d, g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            Tensor::from_vec(db)
        });
        vec![dx, dw, db]
    }
}

/// Adds `bias [C]` to every spatial position of `x [N, C, H, W]`.
struct ChannelBias;

impl Function for ChannelBias {
    fn name(&self) -> &'static str {
        "channel_bias"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (c, plane) = (x.dim(1), x.dim(2) * x.dim(3));
        let db = needs[1].then(|| {
            let mut db = vec![0.0; c];
            for (i, chunk) in grad.data().chunks(plane).enumerate() {
                db[i % c] += chunk.iter().sum::<f64>();
            }
            Tensor::from_vec(db)
        });
        vec![Some(grad.clone()), db]
    }
}

/// Mean softmax cross-entropy of `logits [N, C]` against integer labels.
struct SoftmaxCrossEntropy {
    labels: Vec<usize>,
    probs: Vec<f64>,
}

impl Function for SoftmaxCrossEntropy {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let logits = inputs[0];
        let (n, c) = (logits.dim(0), logits.dim(1));
        let scale = grad.item() / n as f64;
        let mut d = self.probs.clone();
        for (i, &label) in self.labels.iter().enumerate() {
            d[i * c + label] -= 1.0;
        }
        d.iter_mut().for_each(|v| *v *= scale);
        vec![Some(Tensor::new(&[n, c], d).expect("ce grad"))]
    }
}

impl Tape {
    fn unary(&mut self, x: Var, name: &'static str, f: fn(f64) -> f64, deriv: fn(f64, f64) -> f64) -> Result<Var> {
        let out = self.value(x).map(f);
        self.apply(Unary { name, deriv }, &[x], out)
    }

    fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op.name(), ta, tb)?;
        let out = match op {
            Binary::Add => ta.zip_map(tb, |x, y| x + y),
            Binary::Sub => ta.zip_map(tb, |x, y| x - y),
            Binary::Mul => ta.zip_map(tb, |x, y| x * y),
        };
        self.apply(op, &[a, b], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.apply(Scale(c), &[x], out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", |v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "square", |v| v * v, |x, _| 2.0 * x)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Gradient reversal: the forward value is `x` itself, the backward pass
    /// hands `-lambda × grad` to `x`.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid("grl", format!("lambda must be positive, got {lambda}")));
        }
        let out = self.value(x).clone();
        self.apply(GradientReversal { lambda }, &[x], out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        self.apply(Sum, &[x], Tensor::scalar(total))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.apply(Reshape, &[x], out)
    }

    /// Collapses every dimension after the first: `[N, ...] -> [N, F]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let n = shape[0];
        let f = shape[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[n, f])
    }

    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "dense";
        let (tx, tw, tb) = (self.value(x), self.value(weight), self.value(bias));
        tx.expect_rank(OP, 2)?;
        tw.expect_rank(OP, 2)?;
        tb.expect_rank(OP, 1)?;
        let (n, f_in, f_out) = (tx.dim(0), tx.dim(1), tw.dim(1));
        if tw.dim(0) != f_in {
            return Err(Error::shape(OP, "weight rows (input features)", f_in, tw.dim(0)));
        }
        if tb.dim(0) != f_out {
            return Err(Error::shape(OP, "bias length (output features)", f_out, tb.dim(0)));
        }
        let mut out = Vec::with_capacity(n * f_out);
        for _ in 0..n {
            out.extend_from_slice(tb.data());
        }
        gemm_acc(n, f_in, f_out, tx.data(), tw.data(), &mut out);
        let out = Tensor::new(&[n, f_out], out)?;
        self.apply(Dense, &[x, weight, bias], out)
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        const OP: &str = "channel_bias";
        let (tx, tb) = (self.value(x), self.value(bias));
        tx.expect_rank(OP, 4)?;
        tb.expect_rank(OP, 1)?;
        let c = tx.dim(1);
        if tb.dim(0) != c {
            return Err(Error::shape(OP, "bias length (channels)", c, tb.dim(0)));
        }
        let plane = tx.dim(2) * tx.dim(3);
        let mut out = tx.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let b = tb.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        self.apply(ChannelBias, &[x, bias], out)
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let t = self.value(logits);
        t.expect_rank(OP, 2)?;
        let (n, c) = (t.dim(0), t.dim(1));
        if labels.len() != n {
            return Err(Error::shape(OP, "label count", n, labels.len()));
        }
        if n == 0 {
            return Err(Error::invalid(OP, "empty batch"));
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (i, (row, &label)) in t.data().chunks(c).zip(labels).enumerate() {
            if label >= c {
                return Err(Error::invalid(OP, format!("label {label} out of range for {c} classes")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            loss += z.ln() + max - row[label];
        }
        let func = SoftmaxCrossEntropy { labels: labels.to_vec(), probs };
        self.apply(func, &[logits], Tensor::scalar(loss / n as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 2.0, 0.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[2], 0.5);
    }

    #[test]
    fn dense_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.25, -4.0]).unwrap());
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let w = tape.constant(eye);
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.dense(x, w, bad).is_err());
    }

    #[test]
    fn grl_forward_identity_backward_negated() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.3));
        let y = tape.grl(x, 1.0).unwrap();
        assert_eq!(tape.value(y).item().to_bits(), 0.3f64.to_bits());
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), -1.0);
        assert!(tape.grl(x, 0.0).is_err());
    }

    #[test]
    fn grl_scaled_square() {
        // loss = grl(x, 2.5)^2 / 2 at x = 3 -> -2.5 * 3
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.grl(x, 2.5).unwrap();
        let sq = tape.square(y).unwrap();
        let loss = tape.scale(sq, 0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().item(), -7.5);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 4]));
        let loss = tape.softmax_cross_entropy(x, &[0, 3]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-15);
        assert!(tape.softmax_cross_entropy(x, &[0, 4]).is_err());
    }
}
