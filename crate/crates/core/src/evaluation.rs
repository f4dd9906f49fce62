//! Downstream protocols: nearest neighbour and linear probes on frozen
//! codes, fine-tuning, and supervised training from scratch.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::{write_atomic, Reader, Writer};
use crate::data::SkeletonSequence;
use crate::error::{Error, Result};
use crate::model::{stack_batch, Model, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;
use crate::training::derived_rng;
use crate::viewpoint::{rotate_sequence, rotation_matrix, sample_angles};

const BANK_MAGIC: &[u8; 4] = b"SKFB";
const BANK_VERSION: u32 = 1;
const EXTRACT_BATCH: usize = 64;

/// Frozen encoder codes with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    /// `[N, D]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub split: String,
}

impl FeatureBank {
    pub fn new(features: Tensor, labels: Vec<usize>, split: impl Into<String>) -> Result<Self> {
        features.expect_rank("feature_bank", 2)?;
        if features.dim(0) != labels.len() {
            return Err(Error::shape("feature_bank", "row count", labels.len(), features.dim(0)));
        }
        Ok(FeatureBank { features, labels, split: split.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.dim(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features.data()[i * d..(i + 1) * d]
    }

    /// `"SKFB"`, u32 version, split string, u64 rows, u64 dim, u32 labels,
    /// then row-major f64 features.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(BANK_MAGIC);
        w.u32(BANK_VERSION);
        w.str(&self.split);
        w.u64(self.len() as u64);
        w.u64(self.dim() as u64);
        for &l in &self.labels {
            w.u32(l as u32);
        }
        for &v in self.features.data() {
            w.f64(v);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("feature bank", bytes);
        r.expect_magic(BANK_MAGIC)?;
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let split = r.str()?;
        let n = r.count(4)?;
        let d = r.u64()?;
        let d = usize::try_from(d).map_err(|_| r.err("dimension overflow"))?;
        if n == 0 || d == 0 {
            return Err(r.err("empty bank"));
        }
        let labels = (0..n).map(|_| r.u32().map(|l| l as usize)).collect::<Result<Vec<_>>>()?;
        if n.checked_mul(d).and_then(|c| c.checked_mul(8)).is_none_or(|b| b != r.remaining()) {
            return Err(r.err("feature payload length disagrees with header"));
        }
        let data = (0..n * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        FeatureBank::new(Tensor::new(&[n, d], data)?, labels, split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn labels_of(seqs: &[SkeletonSequence]) -> Result<Vec<usize>> {
    seqs.iter()
        .map(|s| s.label().ok_or_else(|| Error::invalid("evaluation", format!("sequence {} has no label", s.meta.id))))
        .collect()
}

/// Encoder codes of every sequence, in order. Parameters are only read.
pub fn extract_features(model: &Model, seqs: &[SkeletonSequence], split: &str) -> Result<FeatureBank> {
    let labels = labels_of(seqs)?;
    let d = model.config().latent_dim;
    let mut data = Vec::with_capacity(seqs.len() * d);
    for chunk in seqs.chunks(EXTRACT_BATCH) {
        let refs: Vec<&SkeletonSequence> = chunk.iter().collect();
        data.extend_from_slice(model.encode_batch(&stack_batch(&refs)?)?.data());
    }
    FeatureBank::new(Tensor::new(&[seqs.len(), d], data)?, labels, split)
}

/// Each sequence rotated by its own uniformly drawn Euler triplet.
pub fn randomly_rotated(seqs: &[SkeletonSequence], seed: u64) -> Result<Vec<SkeletonSequence>> {
    let mut rng = derived_rng(seed, 0);
    seqs.iter().map(|s| rotate_sequence(s, &rotation_matrix(&sample_angles(&mut rng)))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub accuracy: f64,
    /// `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lr: Option<f64>,
}

impl EvalReport {
    pub fn from_predictions(protocol: &str, classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape("eval_report", "prediction count", truth.len(), predicted.len()));
        }
        if truth.is_empty() {
            return Err(Error::invalid("eval_report", "empty test set"));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::invalid("eval_report", format!("label out of range for {classes} classes")));
            }
            confusion[t][p] += 1;
        }
        let trace: u64 = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: u64 = row.iter().sum();
                (total > 0).then(|| row[c] as f64 / total as f64)
            })
            .collect();
        Ok(EvalReport {
            protocol: protocol.into(),
            accuracy: trace as f64 / truth.len() as f64,
            per_class,
            confusion,
            epochs: None,
            lr: None,
        })
    }

    /// Aligned text grid of the confusion matrix.
    pub fn confusion_grid(&self) -> String {
        let width = self.confusion.iter().flatten().map(|v| v.to_string().len()).max().unwrap_or(1).max(4);
        let mut s = format!("{:>w$}", "t\\p", w = width);
        for c in 0..self.confusion.len() {
            let _ = write!(s, " {c:>width$}");
        }
        s.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{t:>width$}");
            for v in row {
                let _ = write!(s, " {v:>width$}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    Euclidean,
    Cosine,
}

fn class_count(a: &[usize], b: &[usize]) -> usize {
    a.iter().chain(b).max().map_or(0, |m| m + 1)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Index of the nearest train row; ties go to the lowest index.
pub fn nearest(train: &FeatureBank, query: &[f64], distance: Distance) -> usize {
    let qn = norm(query);
    let mut best = (0, f64::INFINITY);
    for i in 0..train.len() {
        let row = train.row(i);
        let d = match distance {
            Distance::Euclidean => row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            Distance::Cosine => {
                let dot: f64 = row.iter().zip(query).map(|(a, b)| a * b).sum();
                let denom = norm(row) * qn;
                if denom == 0.0 {
                    1.0
                } else {
                    1.0 - dot / denom
                }
            }
        };
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Labels each test row with its nearest train row's label.
pub fn knn1_eval(train: &FeatureBank, test: &FeatureBank, distance: Distance) -> Result<EvalReport> {
    if train.is_empty() {
        return Err(Error::invalid("knn1_eval", "empty train bank"));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape("knn1_eval", "feature dimension", train.dim(), test.dim()));
    }
    let predicted: Vec<usize> = (0..test.len()).map(|i| train.labels[nearest(train, test.row(i), distance)]).collect();
    EvalReport::from_predictions("1nn", class_count(&train.labels, &test.labels), &test.labels, &predicted)
}

/// Mini-batch Adam schedule for the supervised protocols.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl ClassifierConfig {
    /// Linear probe default.
    pub const LEP: ClassifierConfig = ClassifierConfig { epochs: 300, lr: 1e-3, batch_size: 32, seed: 0 };
    /// Fine-tuning and supervised-from-scratch default.
    pub const SUPERVISED: ClassifierConfig = ClassifierConfig { epochs: 100, lr: 1e-3, batch_size: 32, seed: 0 };

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("classifier batch_size must be ≥ 1 and lr positive".into()));
        }
        Ok(())
    }
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig::LEP
    }
}

const CLS_W: &str = "classifier.weight";
const CLS_B: &str = "classifier.bias";

/// Zero-initialized affine classifier appended to `store`.
fn add_classifier(store: &mut ParamStore, dim: usize, classes: usize) {
    store.insert(CLS_W, Tensor::zeros(&[dim, classes]));
    store.insert(CLS_B, Tensor::zeros(&[classes]));
}

fn require_all_classes(labels: &[usize], classes: usize) -> Result<()> {
    let mut seen = vec![false; classes];
    for &l in labels {
        seen[l] = true;
    }
    match seen.iter().position(|s| !s) {
        Some(c) => Err(Error::invalid("classifier", format!("class {c} is absent from the train labels"))),
        None => Ok(()),
    }
}

/// Seeded shuffled mini-batch Adam on `loss(tape, bound, batch_indices)`.
fn fit<F>(
    store: &mut ParamStore,
    n: usize,
    cfg: &ClassifierConfig,
    trainable: impl Fn(&str) -> bool,
    mut loss: F,
) -> Result<()>
where
    F: FnMut(&mut Tape, &Bound, &[usize]) -> Result<Var>,
{
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        for idx in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let p = store.bind_where(&mut tape, &trainable);
            let l = loss(&mut tape, &p, idx)?;
            let mut grads = tape.backward(l)?;
            adam.step(store, &p.collect(&mut grads))?;
        }
    }
    Ok(())
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.dim(1);
    logits
        .data()
        .chunks(c)
        .map(|row| row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0)
        .collect()
}

fn gather_rows(bank: &FeatureBank, idx: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * bank.dim());
    for &i in idx {
        data.extend_from_slice(bank.row(i));
    }
    Tensor::new(&[idx.len(), bank.dim()], data)
}

/// Linear probe: an affine softmax classifier on frozen features.
pub fn linear_eval(train: &FeatureBank, test: &FeatureBank, cfg: &ClassifierConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("linear_eval", "empty train bank"));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape("linear_eval", "feature dimension", train.dim(), test.dim()));
    }
    let classes = class_count(&train.labels, &test.labels);
    require_all_classes(&train.labels, classes)?;
    let mut store = ParamStore::new();
    add_classifier(&mut store, train.dim(), classes);
    fit(
        &mut store,
        train.len(),
        cfg,
        |_| true,
        |tape, p, idx| {
            let x = tape.constant(gather_rows(train, idx)?);
            let logits = tape.dense(x, p.var(CLS_W), p.var(CLS_B))?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            tape.softmax_cross_entropy(logits, &labels)
        },
    )?;
    let mut tape = Tape::new();
    let p = store.bind_where(&mut tape, |_| false);
    let x = tape.constant(test.features.clone());
    let logits = tape.dense(x, p.var(CLS_W), p.var(CLS_B))?;
    let predicted = argmax_rows(tape.value(logits));
    let mut report = EvalReport::from_predictions("lep", classes, &test.labels, &predicted)?;
    (report.epochs, report.lr) = (Some(cfg.epochs), Some(cfg.lr));
    Ok(report)
}

fn encoder_classifier(
    protocol: &str,
    model: &mut Model,
    train: &[SkeletonSequence],
    test: &[SkeletonSequence],
    cfg: &ClassifierConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid(protocol_op(protocol), "empty train or test set"));
    }
    let train_labels = labels_of(train)?;
    let test_labels = labels_of(test)?;
    let classes = class_count(&train_labels, &test_labels);
    require_all_classes(&train_labels, classes)?;
    let mut store = ParamStore::new();
    for (name, t) in model.params.iter().filter(|(n, _)| n.starts_with("encoder.")) {
        store.insert(name, t.clone());
    }
    add_classifier(&mut store, model.config().latent_dim, classes);
    let plan = model.plan.clone();
    fit(
        &mut store,
        train.len(),
        cfg,
        |_| true,
        |tape, p, idx| {
            let refs: Vec<&SkeletonSequence> = idx.iter().map(|&i| &train[i]).collect();
            let x = tape.constant(stack_batch(&refs)?);
            let z = plan.encode(tape, p, x)?.z;
            let logits = tape.dense(z, p.var(CLS_W), p.var(CLS_B))?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            tape.softmax_cross_entropy(logits, &labels)
        },
    )?;
    let mut predicted = Vec::with_capacity(test.len());
    for chunk in test.chunks(EXTRACT_BATCH) {
        let refs: Vec<&SkeletonSequence> = chunk.iter().collect();
        let mut tape = Tape::new();
        let p = store.bind_where(&mut tape, |_| false);
        let x = tape.constant(stack_batch(&refs)?);
        let z = plan.encode(&mut tape, &p, x)?.z;
        let logits = tape.dense(z, p.var(CLS_W), p.var(CLS_B))?;
        predicted.extend(argmax_rows(tape.value(logits)));
    }
    for (name, t) in store.iter().filter(|(n, _)| n.starts_with("encoder.")) {
        *model.params.get_mut(name).expect("encoder parameter") = t.clone();
    }
    let mut report = EvalReport::from_predictions(protocol, classes, &test_labels, &predicted)?;
    (report.epochs, report.lr) = (Some(cfg.epochs), Some(cfg.lr));
    Ok(report)
}

fn protocol_op(protocol: &str) -> &'static str {
    if protocol == "finetune" {
        "fine_tune"
    } else {
        "supervised_e2e"
    }
}

/// Trains the encoder and an appended linear classifier on labels. The
/// encoder in `model` is updated in place; the decoder is never touched.
pub fn fine_tune(
    model: &mut Model,
    train: &[SkeletonSequence],
    test: &[SkeletonSequence],
    cfg: &ClassifierConfig,
) -> Result<EvalReport> {
    encoder_classifier("finetune", model, train, test, cfg)
}

/// Encoder plus classifier trained from a fresh seeded initialization.
pub fn supervised_e2e(
    config: &ModelConfig,
    seed: u64,
    train: &[SkeletonSequence],
    test: &[SkeletonSequence],
    cfg: &ClassifierConfig,
) -> Result<EvalReport> {
    let mut model = Model::build(config, seed)?;
    encoder_classifier("supervised", &mut model, train, test, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(points: &[(f64, f64)], labels: &[usize]) -> FeatureBank {
        let data = points.iter().flat_map(|&(a, b)| [a, b]).collect();
        FeatureBank::new(Tensor::new(&[points.len(), 2], data).unwrap(), labels.to_vec(), "t").unwrap()
    }

    #[test]
    fn nearest_neighbour_geometry() {
        let train = bank(&[(0.0, 0.0), (10.0, 10.0)], &[0, 1]);
        let test = bank(&[(1.0, 1.0)], &[0]);
        let r = knn1_eval(&train, &test, Distance::Euclidean).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion, vec![vec![1, 0], vec![0, 0]]);
        assert_eq!(r.per_class, vec![Some(1.0), None]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let train = bank(&[(1.0, 0.0), (-1.0, 0.0)], &[1, 0]);
        assert_eq!(nearest(&train, &[0.0, 0.0], Distance::Euclidean), 0);
    }

    #[test]
    fn self_match_is_perfect() {
        let b = bank(&[(0.0, 1.0), (2.0, 3.0), (5.0, -1.0)], &[0, 1, 2]);
        assert_eq!(knn1_eval(&b, &b, Distance::Euclidean).unwrap().accuracy, 1.0);
        assert_eq!(knn1_eval(&b, &b, Distance::Cosine).unwrap().accuracy, 1.0);
    }

    #[test]
    fn empty_train_bank_is_rejected() {
        let empty = FeatureBank::new(Tensor::zeros(&[0, 2]).clone(), vec![], "x");
        if let Ok(empty) = empty {
            let test = bank(&[(0.0, 0.0)], &[0]);
            assert!(knn1_eval(&empty, &test, Distance::Euclidean).is_err());
        }
    }

    #[test]
    fn separable_linear_probe() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let s = i as f64 * 0.1;
            pts.push((2.0 + s, 1.0 - s));
            labels.push(0);
            pts.push((-2.0 - s, -1.0 + s));
            labels.push(1);
        }
        let b = bank(&pts, &labels);
        let cfg = ClassifierConfig { epochs: 200, ..ClassifierConfig::LEP };
        let r = linear_eval(&b, &b, &cfg).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.epochs, Some(200));
    }

    #[test]
    fn probe_rejects_missing_class() {
        let train = bank(&[(0.0, 0.0)], &[0]);
        let test = bank(&[(0.0, 0.0)], &[1]);
        assert!(linear_eval(&train, &test, &ClassifierConfig::LEP).is_err());
    }

    #[test]
    fn report_invariants() {
        let r = EvalReport::from_predictions("x", 3, &[0, 0, 1, 2, 2], &[0, 1, 1, 2, 0]).unwrap();
        let trace: u64 = (0..3).map(|c| r.confusion[c][c]).sum();
        assert_eq!(r.accuracy, trace as f64 / 5.0);
        assert_eq!(r.confusion.iter().map(|row| row.iter().sum::<u64>()).collect::<Vec<_>>(), vec![2, 1, 2]);
        assert!(r.confusion_grid().lines().count() == 4);
    }

    #[test]
    fn bank_round_trip() {
        let b = bank(&[(0.5, -1.0), (3.0, 4.0)], &[1, 0]);
        let bytes = b.encode();
        assert_eq!(FeatureBank::decode(&bytes).unwrap(), b);
        for cut in 0..bytes.len() {
            assert!(FeatureBank::decode(&bytes[..cut]).is_err());
        }
    }
}
