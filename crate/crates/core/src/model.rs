//! Residual convolutional autoencoder over `[N, 3, m, t]` batches.
//!
//! Coordinates are channels, joints are rows and frames are columns. Each of
//! the three encoder blocks runs three `conv → ReLU` layers, adds a skip path
//! (identity, or a 1×1 projection when the width changes) and max-pools. A
//! dense layer maps the flattened final map to the code `z`; a mirror dense
//! layer maps it back. Decoder block `k` unpools with encoder block `k`'s
//! indices and runs three `deconv → ReLU → BatchNorm` layers plus its own
//! skip path, walking the widths back down to 3.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, IndexMap as PoolIndices, PoolConfig, RunningStats, Tape, Var};
use crate::data::{SkeletonSequence, COORDS};
use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, Bound, ParamStore};
use crate::tensor::Tensor;
use crate::viewpoint::{SsviHead, SSVI_PREFIX};

pub const BLOCKS: usize = 3;
pub const LAYERS_PER_BLOCK: usize = 3;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelShape {
    #[serde(rename = "1x1")]
    K1x1,
    #[serde(rename = "1x3")]
    K1x3,
}

impl KernelShape {
    pub fn extent(self) -> (usize, usize) {
        match self {
            KernelShape::K1x1 => (1, 1),
            KernelShape::K1x3 => (1, 3),
        }
    }

    fn pad(self) -> (usize, usize) {
        let (kh, kw) = self.extent();
        (kh / 2, kw / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub joints: usize,
    pub frames: usize,
    pub blocks: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<KernelShape>,
    /// `(rows, columns)` window per block.
    pub pools: Vec<(usize, usize)>,
    pub latent_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            joints: 25,
            frames: 64,
            blocks: BLOCKS,
            channels: vec![16, 32, 64],
            kernels: vec![KernelShape::K1x3; BLOCKS],
            pools: vec![(1, 2); BLOCKS],
            latent_dim: 128,
        }
    }
}

/// Shapes one encoder block sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub c_in: usize,
    pub c_out: usize,
    /// Spatial extent before pooling.
    pub pre: (usize, usize),
    /// Spatial extent after pooling.
    pub post: (usize, usize),
}

impl ModelConfig {
    /// Checks the configuration and derives every block's shapes.
    pub fn block_shapes(&self) -> Result<Vec<BlockShape>> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.blocks != BLOCKS {
            return bad(format!("blocks must be {BLOCKS}, got {}", self.blocks));
        }
        for (what, len) in
            [("channels", self.channels.len()), ("kernels", self.kernels.len()), ("pools", self.pools.len())]
        {
            if len != BLOCKS {
                return bad(format!("{what} needs {BLOCKS} entries, got {len}"));
            }
        }
        if self.joints == 0 || self.frames == 0 {
            return bad("joints and frames must be positive".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        let (mut h, mut w) = (self.joints, self.frames);
        let mut c_in = COORDS;
        let mut shapes = Vec::with_capacity(BLOCKS);
        for (k, (&c_out, &(ph, pw))) in self.channels.iter().zip(&self.pools).enumerate() {
            if c_out == 0 {
                return bad(format!("block {}: zero channels", k + 1));
            }
            if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
                return bad(format!("block {}: pool window {ph}x{pw} does not divide the {h}x{w} feature map", k + 1));
            }
            shapes.push(BlockShape { c_in, c_out, pre: (h, w), post: (h / ph, w / pw) });
            (h, w, c_in) = (h / ph, w / pw, c_out);
        }
        Ok(shapes)
    }

    /// Length of the flattened final encoder map.
    pub fn flat_features(&self) -> Result<usize> {
        let last = *self.block_shapes()?.last().expect("three blocks");
        Ok(last.c_out * last.post.0 * last.post.1)
    }

    /// Number of trainable scalars; a pure function of the configuration.
    pub fn param_count(&self) -> Result<usize> {
        Ok(Model::build(self, 0)?.params.scalar_count())
    }
}

pub type Buffers = IndexMap<String, RunningStats>;

/// How decoder BatchNorm layers pick their statistics.
pub enum NormMode<'a> {
    /// Batch statistics, folded into the running averages.
    Train(&'a mut Buffers),
    /// Batch statistics, running averages untouched.
    Batch,
    /// Stored running averages.
    Eval(&'a Buffers),
}

/// Pooling record of one encoder block, consumed by its mirror unpool.
#[derive(Debug, Clone)]
pub struct PoolRecord {
    pub indices: PoolIndices,
    pub pre_shape: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub z: Var,
    pub pools: Vec<PoolRecord>,
}

/// Forward plan: the validated configuration and its derived shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    config: ModelConfig,
    shapes: Vec<BlockShape>,
}

fn name(prefix: &str, k: usize, layer: &str, field: &str) -> String {
    format!("{prefix}.block{k}.{layer}.{field}")
}

impl Plan {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let shapes = config.block_shapes()?;
        Ok(Plan { config: config.clone(), shapes })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn shapes(&self) -> &[BlockShape] {
        &self.shapes
    }

    fn flat(&self) -> usize {
        let last = self.shapes[BLOCKS - 1];
        last.c_out * last.post.0 * last.post.1
    }

    /// `x [N, 3, m, t] → z [N, latent]`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Encoded> {
        let shape = tape.value(x).shape().to_vec();
        let expected = [COORDS, self.config.joints, self.config.frames];
        if shape.len() != 4 {
            return Err(Error::shape("encode", "input rank", 4, shape.len()));
        }
        for (i, (&e, &g)) in expected.iter().zip(&shape[1..]).enumerate() {
            if e != g {
                let dim = ["coordinates (dim 1)", "joints (dim 2)", "frames (dim 3)"][i];
                return Err(Error::shape("encode", dim, e, g));
            }
        }
        let n = shape[0];
        let mut h = x;
        let mut pools = Vec::with_capacity(BLOCKS);
        for (k, s) in self.shapes.iter().enumerate() {
            let b = k + 1;
            let kernel = self.config.kernels[k];
            let mut main = h;
            for i in 1..=LAYERS_PER_BLOCK {
                let conv = format!("conv{i}");
                main = tape.conv2d(main, p.var(&name("encoder", b, &conv, "weight")), (1, 1), kernel.pad())?;
                main = tape.add_channel_bias(main, p.var(&name("encoder", b, &conv, "bias")))?;
                main = tape.relu(main)?;
            }
            let skip = if s.c_in == s.c_out {
                h
            } else {
                let y = tape.conv2d(h, p.var(&name("encoder", b, "skip", "weight")), (1, 1), (0, 0))?;
                tape.add_channel_bias(y, p.var(&name("encoder", b, "skip", "bias")))?
            };
            let joined = tape.add(main, skip)?;
            let (pooled, indices) = tape.maxpool2d(joined, PoolConfig::new(self.config.pools[k]))?;
            pools.push(PoolRecord { indices, pre_shape: [n, s.c_out, s.pre.0, s.pre.1] });
            h = pooled;
        }
        let flat = tape.reshape(h, &[n, self.flat()])?;
        let z = tape.dense(flat, p.var("encoder.latent.weight"), p.var("encoder.latent.bias"))?;
        Ok(Encoded { z, pools })
    }

    /// `z [N, latent] → x̂ [N, 3, m, t]`, unpooling with `pools`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        pools: &[PoolRecord],
        mut mode: NormMode<'_>,
    ) -> Result<Var> {
        let zs = tape.value(z).shape().to_vec();
        if zs.len() != 2 || zs[1] != self.config.latent_dim {
            return Err(Error::shape("decode", "latent width", self.config.latent_dim, *zs.last().unwrap_or(&0)));
        }
        if pools.len() != BLOCKS {
            return Err(Error::shape("decode", "pooling records", BLOCKS, pools.len()));
        }
        let n = zs[0];
        let last = self.shapes[BLOCKS - 1];
        let h = tape.dense(z, p.var("decoder.latent.weight"), p.var("decoder.latent.bias"))?;
        let mut h = tape.reshape(h, &[n, last.c_out, last.post.0, last.post.1])?;
        for k in (0..BLOCKS).rev() {
            let b = k + 1;
            let s = self.shapes[k];
            let kernel = self.config.kernels[k];
            let up = tape.maxunpool2d(h, &pools[k].indices, &pools[k].pre_shape)?;
            let mut main = up;
            for i in 1..=LAYERS_PER_BLOCK {
                let deconv = format!("deconv{i}");
                let bn = format!("bn{i}");
                main = tape.deconv2d(main, p.var(&name("decoder", b, &deconv, "weight")), (1, 1), kernel.pad())?;
                main = tape.add_channel_bias(main, p.var(&name("decoder", b, &deconv, "bias")))?;
                main = tape.relu(main)?;
                let (gamma, beta) = (p.var(&name("decoder", b, &bn, "gamma")), p.var(&name("decoder", b, &bn, "beta")));
                let key = format!("decoder.block{b}.{bn}");
                main = match &mut mode {
                    NormMode::Train(buffers) => {
                        let stats =
                            buffers.get_mut(&key).ok_or_else(|| Error::Config(format!("missing buffer {key}")))?;
                        tape.batchnorm2d(main, gamma, beta, BatchNormMode::Train(stats), BN_EPS)?
                    }
                    NormMode::Batch => {
                        let mut scratch = RunningStats::new(if i == LAYERS_PER_BLOCK { s.c_in } else { s.c_out });
                        tape.batchnorm2d(main, gamma, beta, BatchNormMode::Train(&mut scratch), BN_EPS)?
                    }
                    NormMode::Eval(buffers) => {
                        let stats = buffers.get(&key).ok_or_else(|| Error::Config(format!("missing buffer {key}")))?;
                        tape.batchnorm2d(main, gamma, beta, BatchNormMode::Eval(stats), BN_EPS)?
                    }
                };
            }
            let skip = if s.c_in == s.c_out {
                up
            } else {
                let y = tape.deconv2d(up, p.var(&name("decoder", b, "skip", "weight")), (1, 1), (0, 0))?;
                tape.add_channel_bias(y, p.var(&name("decoder", b, "skip", "bias")))?
            };
            h = tape.add(main, skip)?;
        }
        Ok(h)
    }
}

/// Parameters, BatchNorm buffers and the forward plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub plan: Plan,
    pub params: ParamStore,
    pub buffers: Buffers,
}

impl Model {
    /// Seeded uniform fan-in initialization; BatchNorm starts at γ = 1, β = 0.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let plan = Plan::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = Buffers::new();
        for (k, s) in plan.shapes.iter().enumerate() {
            let b = k + 1;
            let (kh, kw) = config.kernels[k].extent();
            for i in 1..=LAYERS_PER_BLOCK {
                let cin = if i == 1 { s.c_in } else { s.c_out };
                let fan = cin * kh * kw;
                let conv = format!("conv{i}");
                params.insert(
                    name("encoder", b, &conv, "weight"),
                    uniform_fan_in(&[s.c_out, cin, kh, kw], fan, &mut rng),
                );
                params.insert(name("encoder", b, &conv, "bias"), uniform_fan_in(&[s.c_out], fan, &mut rng));
            }
            if s.c_in != s.c_out {
                params.insert(
                    name("encoder", b, "skip", "weight"),
                    uniform_fan_in(&[s.c_out, s.c_in, 1, 1], s.c_in, &mut rng),
                );
                params.insert(name("encoder", b, "skip", "bias"), uniform_fan_in(&[s.c_out], s.c_in, &mut rng));
            }
        }
        let flat = plan.flat();
        let latent = config.latent_dim;
        params.insert("encoder.latent.weight", uniform_fan_in(&[flat, latent], flat, &mut rng));
        params.insert("encoder.latent.bias", uniform_fan_in(&[latent], flat, &mut rng));
        params.insert("decoder.latent.weight", uniform_fan_in(&[latent, flat], latent, &mut rng));
        params.insert("decoder.latent.bias", uniform_fan_in(&[flat], latent, &mut rng));
        for (k, s) in plan.shapes.iter().enumerate().rev() {
            let b = k + 1;
            let (kh, kw) = config.kernels[k].extent();
            for i in 1..=LAYERS_PER_BLOCK {
                let cout = if i == LAYERS_PER_BLOCK { s.c_in } else { s.c_out };
                let fan = s.c_out * kh * kw;
                let deconv = format!("deconv{i}");
                let bn = format!("bn{i}");
                params.insert(
                    name("decoder", b, &deconv, "weight"),
                    uniform_fan_in(&[s.c_out, cout, kh, kw], fan, &mut rng),
                );
                params.insert(name("decoder", b, &deconv, "bias"), uniform_fan_in(&[cout], fan, &mut rng));
                params.insert(name("decoder", b, &bn, "gamma"), Tensor::full(&[cout], 1.0));
                params.insert(name("decoder", b, &bn, "beta"), Tensor::zeros(&[cout]));
                buffers.insert(format!("decoder.block{b}.{bn}"), RunningStats::new(cout));
            }
            if s.c_in != s.c_out {
                params.insert(
                    name("decoder", b, "skip", "weight"),
                    uniform_fan_in(&[s.c_out, s.c_in, 1, 1], s.c_out, &mut rng),
                );
                params.insert(name("decoder", b, "skip", "bias"), uniform_fan_in(&[s.c_in], s.c_out, &mut rng));
            }
        }
        Ok(Model { plan, params, buffers })
    }

    pub fn config(&self) -> &ModelConfig {
        self.plan.config()
    }

    /// Restores a model from stored tensors, checking every name and shape
    /// against a fresh build of `config`. An `ssvi.*` head may ride along.
    pub fn from_parts(config: &ModelConfig, params: ParamStore, buffers: Buffers) -> Result<Self> {
        let reference = Model::build(config, 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::format(
                    "model",
                    format!("parameter {name} has shape {:?}, expected {:?}", got.shape(), t.shape()),
                ));
            }
        }
        let head = params.names().filter(|n| n.starts_with(SSVI_PREFIX)).count();
        if params.len() != reference.params.len() + head {
            return Err(Error::format("model", "unexpected extra parameters"));
        }
        if head > 0 {
            match SsviHead::from_params(&params, 1.0)? {
                Some(h) if h.latent == config.latent_dim && head == 4 => {}
                _ => return Err(Error::format("model", "malformed SSVI head parameters")),
            }
        }
        for (name, stats) in &reference.buffers {
            match buffers.get(name) {
                Some(b) if b.mean.len() == stats.mean.len() && b.var.len() == stats.var.len() => {}
                _ => return Err(Error::format("model", format!("missing or malformed buffer {name}"))),
            }
        }
        if buffers.len() != reference.buffers.len() {
            return Err(Error::format("model", "unexpected extra buffers"));
        }
        Ok(Model { plan: reference.plan, params, buffers })
    }

    /// Encoder codes for a batch, without gradients.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind_where(&mut tape, |_| false);
        let input = tape.constant(x.clone());
        let enc = self.plan.encode(&mut tape, &p, input)?;
        Ok(tape.value(enc.z).clone())
    }

    /// Eval-mode reconstruction, without gradients.
    pub fn reconstruct_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind_where(&mut tape, |_| false);
        let input = tape.constant(x.clone());
        let enc = self.plan.encode(&mut tape, &p, input)?;
        let out = self.plan.decode(&mut tape, &p, enc.z, &enc.pools, NormMode::Eval(&self.buffers))?;
        Ok(tape.value(out).clone())
    }

    /// Records `decode ∘ encode` on `tape`.
    pub fn reconstruct(&self, tape: &mut Tape, p: &Bound, x: Var, mode: NormMode<'_>) -> Result<(Var, Encoded)> {
        let enc = self.plan.encode(tape, p, x)?;
        let out = self.plan.decode(tape, p, enc.z, &enc.pools, mode)?;
        Ok((out, enc))
    }
}

/// Stacks `[3, m, t]` sequences into one `[N, 3, m, t]` batch.
pub fn stack_batch(seqs: &[&SkeletonSequence]) -> Result<Tensor> {
    let first = seqs.first().ok_or_else(|| Error::invalid("stack_batch", "empty batch"))?;
    let shape = first.coords().shape().to_vec();
    let mut data = Vec::with_capacity(seqs.len() * first.coords().numel());
    for s in seqs {
        if s.coords().shape() != shape.as_slice() {
            return Err(Error::invalid(
                "stack_batch",
                format!("sequence shape {:?} differs from {:?}", s.coords().shape(), shape),
            ));
        }
        data.extend_from_slice(s.coords().data());
    }
    Tensor::new(&[seqs.len(), shape[0], shape[1], shape[2]], data)
}

/// `½ · mean_n ‖x_n − x̂_n‖²_F`.
pub fn mse_loss(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    let (a, b) = (tape.value(x).shape(), tape.value(x_hat).shape());
    if a != b {
        return Err(Error::invalid("mse_loss", format!("shapes {a:?} and {b:?} differ")));
    }
    let n = a[0];
    let diff = tape.sub(x_hat, x)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 0.5 / n as f64)
}
