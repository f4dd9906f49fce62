//! Non-overlapping 2D max pooling and its index-driven inverse.

use std::sync::Arc;

use super::{Function, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Flat positions (into the pooled input) of each pooled maximum.
///
/// Produced by [`Tape::maxpool2d`] and consumed by [`Tape::maxunpool2d`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    indices: Arc<Vec<usize>>,
    /// Shape of the tensor that was pooled; the natural unpool target.
    source_shape: Vec<usize>,
}

impl IndexMap {
    pub fn new(indices: Vec<usize>, source_shape: &[usize]) -> Self {
        IndexMap { indices: Arc::new(indices), source_shape: source_shape.to_vec() }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn source_shape(&self) -> &[usize] {
        &self.source_shape
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Pooling window and what to do with extents it does not divide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolConfig {
    pub window: (usize, usize),
    /// Extend the bottom/right edges to a multiple of the window instead of
    /// rejecting the input. Padded cells never win a window.
    pub pad_to_fit: bool,
}

impl PoolConfig {
    pub fn new(window: (usize, usize)) -> Self {
        PoolConfig { window, pad_to_fit: false }
    }
}

fn pooled_extent(extent: usize, window: usize, pad: bool, dim: &str) -> Result<usize> {
    const OP: &str = "maxpool2d";
    if window == 0 {
        return Err(Error::invalid(OP, "window extents must be positive"));
    }
    if window > extent {
        return Err(Error::shape(OP, format!("{dim} (window larger than input)"), format!(">= {window}"), extent));
    }
    if !extent.is_multiple_of(window) {
        if !pad {
            return Err(Error::shape(
                OP,
                format!("{dim} (not divisible by window {window})"),
                format!("multiple of {window}"),
                extent,
            ));
        }
        return Ok(extent.div_ceil(window));
    }
    Ok(extent / window)
}

struct MaxPool {
    indices: IndexMap,
}

impl Function for MaxPool {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for (&idx, &g) in self.indices.indices().iter().zip(grad.data()) {
            d[idx] += g;
        }
        vec![Some(dx)]
    }
}

struct MaxUnpool {
    indices: IndexMap,
}

impl Function for MaxUnpool {
    fn name(&self) -> &'static str {
        "maxunpool2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let g = grad.data();
        let data = self.indices.indices().iter().map(|&i| g[i]).collect();
        vec![Some(Tensor::new(inputs[0].shape(), data).expect("unpool grad"))]
    }
}

impl Tape {
    /// Max over non-overlapping windows of `input [N, C, H, W]`.
    ///
    /// Ties resolve to the lowest flat index inside the window.
    pub fn maxpool2d(&mut self, input: Var, config: PoolConfig) -> Result<(Var, IndexMap)> {
        let x = self.value(input);
        x.expect_rank("maxpool2d", 4)?;
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (wh, ww) = config.window;
        let ho = pooled_extent(h, wh, config.pad_to_fit, "height (dim 2)")?;
        let wo = pooled_extent(w, ww, config.pad_to_fit, "width (dim 3)")?;
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut idx = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = usize::MAX;
                    let mut best_val = f64::NEG_INFINITY;
                    // Row-major scan with strict `>` keeps the lowest index on ties.
                    for i in oh * wh..((oh + 1) * wh).min(h) {
                        for j in ow * ww..((ow + 1) * ww).min(w) {
                            let pos = base + i * w + j;
                            if best == usize::MAX || xd[pos] > best_val {
                                best = pos;
                                best_val = xd[pos];
                            }
                        }
                    }
                    out.push(best_val);
                    idx.push(best);
                }
            }
        }
        let indices = IndexMap::new(idx, x.shape());
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        let var = self.apply(MaxPool { indices: indices.clone() }, &[input], out)?;
        Ok((var, indices))
    }

    /// Scatters `input` to the positions recorded in `indices` inside a zero
    /// tensor of `out_shape`. Colliding indices accumulate.
    pub fn maxunpool2d(&mut self, input: Var, indices: &IndexMap, out_shape: &[usize]) -> Result<Var> {
        const OP: &str = "maxunpool2d";
        let x = self.value(input);
        if x.numel() != indices.len() {
            return Err(Error::shape(OP, "index count", x.numel(), indices.len()));
        }
        let mut out = Tensor::new(out_shape, vec![0.0; out_shape.iter().product()])?;
        let len = out.numel();
        let d = out.data_mut();
        for (&i, &v) in indices.indices().iter().zip(x.data()) {
            if i >= len {
                return Err(Error::invalid(OP, format!("index {i} out of range for {len} elements")));
            }
            d[i] += v;
        }
        self.apply(MaxUnpool { indices: indices.clone() }, &[input], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unique_max() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let (y, idx) = tape.maxpool2d(x, PoolConfig::new((2, 2))).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        assert_eq!(idx.indices(), &[3]);
    }

    #[test]
    fn constant_input_picks_first_index() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 2, 4], 7.0));
        let (y, idx) = tape.maxpool2d(x, PoolConfig::new((2, 2))).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 7.0));
        assert_eq!(idx.indices(), &[0, 2, 8, 10]);
    }

    #[test]
    fn window_must_fit() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(tape.maxpool2d(x, PoolConfig::new((4, 1))).is_err());
        let err = tape.maxpool2d(x, PoolConfig::new((2, 2))).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
        let padded = PoolConfig { window: (2, 2), pad_to_fit: true };
        let (y, _) = tape.maxpool2d(x, padded).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn padded_cells_never_win() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 1, 3], vec![-1.0, -2.0, -3.0]).unwrap());
        let (y, idx) = tape.maxpool2d(x, PoolConfig { window: (1, 2), pad_to_fit: true }).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, -3.0]);
        assert_eq!(idx.indices(), &[0, 2]);
    }

    #[test]
    fn single_scatter() {
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::from_vec(vec![5.0]));
        let idx = IndexMap::new(vec![3], &[4]);
        let out = tape.maxunpool2d(y, &idx, &[4]).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 0.0, 5.0]);
        let bad = IndexMap::new(vec![4], &[4]);
        assert!(tape.maxunpool2d(y, &bad, &[4]).is_err());
    }
}
