//! Skeletal adjacency, degree and Laplacian matrices, and the Laplacian
//! penalty on reconstructed joint coordinates.
//!
//! For a bone set `E` over `m` joints, `W` is the symmetric 0/1 adjacency,
//! `D = diag(Σ_j W_ij)` and `L = D − W`. The quadratic form satisfies
//! `zᵀLz = Σ_{(i,j)∈E} (z_i − z_j)² = ½ Σ_ij W_ij (z_i − z_j)²`, so it is
//! zero exactly on vectors constant over each connected component.

use std::fmt::Write as _;

use crate::autodiff::{Function, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The 24 bones of the 25-joint Kinect v2 skeleton (0-based NTU order).
/// Matrices are dense `m × m`; this bounds them at 8 MiB each.
pub const MAX_JOINTS: usize = 1024;

pub const NTU25_BONES: [(usize, usize); 24] = [
    (0, 1),
    (1, 20),
    (2, 20),
    (3, 2),
    (4, 20),
    (5, 4),
    (6, 5),
    (7, 6),
    (8, 20),
    (9, 8),
    (10, 9),
    (11, 10),
    (12, 0),
    (13, 12),
    (14, 13),
    (15, 14),
    (16, 0),
    (17, 16),
    (18, 17),
    (19, 18),
    (21, 22),
    (22, 7),
    (23, 24),
    (24, 11),
];

/// A 9-joint stick figure: pelvis, chest, head, two arms of two joints, two feet.
pub const STICK9_BONES: [(usize, usize); 8] = [(0, 1), (1, 2), (1, 3), (3, 4), (1, 5), (5, 6), (0, 7), (0, 8)];

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    joints: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<f64>,
    degree: Vec<f64>,
    laplacian: Vec<f64>,
}

impl SkeletonGraph {
    /// Builds the graph; duplicate bones collapse to a single edge.
    pub fn new(joints: usize, bones: &[(usize, usize)]) -> Result<Self> {
        const OP: &str = "build_graph";
        if joints == 0 {
            return Err(Error::invalid(OP, "graph needs at least one joint"));
        }
        if joints > MAX_JOINTS {
            return Err(Error::invalid(OP, format!("{joints} joints exceeds the limit of {MAX_JOINTS}")));
        }
        let mut adjacency = vec![0.0; joints * joints];
        let mut edges = Vec::with_capacity(bones.len());
        for &(i, j) in bones {
            if i >= joints || j >= joints {
                return Err(Error::invalid(OP, format!("bone ({i}, {j}) out of range for {joints} joints")));
            }
            if i == j {
                return Err(Error::invalid(OP, format!("self-loop on joint {i}")));
            }
            if adjacency[i * joints + j] == 0.0 {
                adjacency[i * joints + j] = 1.0;
                adjacency[j * joints + i] = 1.0;
                edges.push((i.min(j), i.max(j)));
            }
        }
        let degree: Vec<f64> = adjacency.chunks(joints).map(|row| row.iter().sum()).collect();
        let mut laplacian: Vec<f64> = adjacency.iter().map(|w| -w).collect();
        for (i, d) in degree.iter().enumerate() {
            laplacian[i * joints + i] = *d;
        }
        Ok(SkeletonGraph { joints, edges, adjacency, degree, laplacian })
    }

    pub fn ntu25() -> Self {
        Self::new(25, &NTU25_BONES).expect("built-in topology is valid")
    }

    pub fn stick9() -> Self {
        Self::new(9, &STICK9_BONES).expect("built-in topology is valid")
    }

    /// Path `0 – 1 – … – (m−1)`.
    pub fn chain(joints: usize) -> Result<Self> {
        if joints > MAX_JOINTS {
            return Self::new(joints, &[]);
        }
        let bones: Vec<_> = (1..joints).map(|j| (j - 1, j)).collect();
        Self::new(joints, &bones)
    }

    /// Resolves `ntu25`, `stick9` or `chain<m>` (e.g. `chain12`).
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "ntu25" => Ok(Self::ntu25()),
            "stick9" => Ok(Self::stick9()),
            _ => match name.strip_prefix("chain").and_then(|m| m.parse::<usize>().ok()) {
                Some(m) => Self::chain(m),
                None => Err(Error::Config(format!("unknown topology `{name}` (expected ntu25, stick9 or chain<m>)"))),
            },
        }
    }

    /// Parses a bone list: one `i j` pair per line, `#` comments and blank
    /// lines ignored. The joint count is one more than the largest index
    /// unless `joints` is given.
    pub fn parse_bone_list(text: &str, joints: Option<usize>) -> Result<Self> {
        let mut bones = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut f = line.split_whitespace();
            let mut index = || -> Result<usize> {
                let tok =
                    f.next().ok_or_else(|| Error::Parse { line: n + 1, msg: "expected two joint indices".into() })?;
                tok.parse().map_err(|_| Error::Parse { line: n + 1, msg: format!("invalid joint index `{tok}`") })
            };
            let (i, j) = (index()?, index()?);
            if f.next().is_some() {
                return Err(Error::Parse { line: n + 1, msg: "more than two fields".into() });
            }
            bones.push((i, j));
        }
        let inferred = bones.iter().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(0);
        Self::new(joints.unwrap_or(inferred), &bones)
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Row-major `m × m` adjacency.
    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    /// Diagonal of the degree matrix.
    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    /// Row-major `m × m` Laplacian.
    pub fn laplacian(&self) -> &[f64] {
        &self.laplacian
    }

    pub fn trace(&self) -> f64 {
        self.degree.iter().sum()
    }

    /// `zᵀLz`.
    pub fn laplacian_quadratic(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.joints {
            return Err(Error::shape("laplacian_quadratic", "vector length", self.joints, z.len()));
        }
        Ok(quadratic(&self.laplacian, z))
    }

    /// `Σ_ij W_ij (z_i − z_j)²`, which equals `2 zᵀLz`.
    pub fn weighted_difference_sum(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.joints {
            return Err(Error::shape("weighted_difference_sum", "vector length", self.joints, z.len()));
        }
        let m = self.joints;
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                total += self.adjacency[i * m + j] * (z[i] - z[j]).powi(2);
            }
        }
        Ok(total)
    }

    /// Text dump of W, D and L with row sums of L.
    pub fn describe(&self) -> String {
        let m = self.joints;
        let mut out = String::new();
        writeln!(out, "joints: {m}").unwrap();
        writeln!(out, "bones: {}", self.edges.len()).unwrap();
        let grid = |out: &mut String, title: &str, data: &dyn Fn(usize, usize) -> f64, sums: bool| {
            writeln!(out, "{title}:").unwrap();
            for i in 0..m {
                let row: Vec<String> = (0..m).map(|j| format!("{:>3}", data(i, j))).collect();
                if sums {
                    let s: f64 = (0..m).map(|j| data(i, j)).sum();
                    writeln!(out, "  [{}]  row sum {s}", row.join(" ")).unwrap();
                } else {
                    writeln!(out, "  [{}]", row.join(" ")).unwrap();
                }
            }
        };
        grid(&mut out, "W", &|i, j| self.adjacency[i * m + j], false);
        grid(&mut out, "D", &|i, j| if i == j { self.degree[i] } else { 0.0 }, false);
        grid(&mut out, "L", &|i, j| self.laplacian[i * m + j], true);
        writeln!(out, "trace(L)={}", self.trace()).unwrap();
        out
    }
}

fn quadratic(l: &[f64], z: &[f64]) -> f64 {
    let m = z.len();
    let mut total = 0.0;
    for i in 0..m {
        let row = &l[i * m..(i + 1) * m];
        total += z[i] * row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
    }
    total
}

/// Mean of `x̂ᵀLx̂` over every (sample, coordinate, frame) column of a
/// `[N, 3, m, t]` reconstruction batch.
struct SkeletalPenalty {
    laplacian: Vec<f64>,
}

impl Function for SkeletalPenalty {
    fn name(&self) -> &'static str {
        "r_skel"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (n, d, m, t) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        // L is symmetric, so (L + Lᵀ) x̂ = 2 L x̂.
        let scale = 2.0 * grad.item() / (n * d * t) as f64;
        let mut dx = vec![0.0; x.numel()];
        for block in 0..n * d {
            let base = block * m * t;
            for i in 0..m {
                let row = &self.laplacian[i * m..(i + 1) * m];
                let out = &mut dx[base + i * t..base + (i + 1) * t];
                for (j, &lij) in row.iter().enumerate() {
                    if lij == 0.0 {
                        continue;
                    }
                    let src = &x.data()[base + j * t..base + (j + 1) * t];
                    for (o, s) in out.iter_mut().zip(src) {
                        *o += scale * lij * s;
                    }
                }
            }
        }
        vec![Some(Tensor::new(x.shape(), dx).expect("r_skel grad"))]
    }
}

impl Tape {
    /// The skeletal Laplacian regularizer of a reconstruction batch
    /// `[N, 3, m, t]`: batch mean of the (coordinate, frame) mean of `x̂ᵀLx̂`.
    pub fn r_skel(&mut self, recon: Var, graph: &SkeletonGraph) -> Result<Var> {
        const OP: &str = "r_skel";
        let x = self.value(recon);
        x.expect_rank(OP, 4)?;
        let (n, d, m, t) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        if n == 0 {
            return Err(Error::invalid(OP, "empty batch"));
        }
        if m != graph.joints() {
            return Err(Error::shape(OP, "joint dimension m (dim 2)", graph.joints(), m));
        }
        let mut total = 0.0;
        let mut column = vec![0.0; m];
        for block in x.data().chunks(m * t) {
            for k in 0..t {
                for (j, c) in column.iter_mut().enumerate() {
                    *c = block[j * t + k];
                }
                total += quadratic(graph.laplacian(), &column);
            }
        }
        let value = Tensor::scalar(total / (n * d * t) as f64);
        self.apply(SkeletalPenalty { laplacian: graph.laplacian().to_vec() }, &[recon], value)
    }
}
