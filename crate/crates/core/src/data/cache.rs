//! Binary dataset cache.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      "SKDS"
//! version    u32 (= 1)
//! precision  u8  (4 = f32 payload, 8 = f64 payload)
//! split      u8  (0 cross-subject, 1 cross-view, 2 cross-setup, 3 synthetic)
//! classes    u32, then per class: u32 byte length + UTF-8 name
//! n_train    u64
//! n_test     u64
//! per sequence (train first, then test):
//!   id u64, label i64, subject i64, view i64   (-1 = absent)
//!   missing_joints u32, joints u32, frames u32
//!   3 × joints × frames coordinates, row-major (coordinate, joint, frame)
//! ```

use super::{DatasetSplit, SequenceMeta, SkeletonSequence, SplitKind, COORDS};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SKDS";
const VERSION: u32 = 1;
const WHAT: &str = "dataset cache";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

fn opt_i64<T: Into<i64>>(v: Option<T>) -> i64 {
    v.map_or(-1, Into::into)
}

pub fn encode_dataset(split: &DatasetSplit, precision: Precision) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u8(precision.width() as u8);
    w.u8(split.kind.code());
    w.u32(split.class_names.len() as u32);
    for name in &split.class_names {
        w.str(name);
    }
    w.u64(split.train.len() as u64);
    w.u64(split.test.len() as u64);
    for s in split.train.iter().chain(&split.test) {
        w.u64(s.meta.id);
        w.i64(s.meta.label.map_or(-1, |l| l as i64));
        w.i64(opt_i64(s.meta.subject));
        w.i64(opt_i64(s.meta.view));
        w.u32(s.meta.missing_joints);
        w.u32(s.joints() as u32);
        w.u32(s.frames() as u32);
        for &v in s.coords().data() {
            match precision {
                Precision::F32 => w.f32(v as f32),
                Precision::F64 => w.f64(v),
            }
        }
    }
    w.finish()
}

fn optional<T: TryFrom<i64>>(r: &Reader<'_>, v: i64, field: &str) -> Result<Option<T>> {
    if v == -1 {
        return Ok(None);
    }
    T::try_from(v).map(Some).map_err(|_| r.err(format!("{field} {v} out of range")))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetSplit> {
    let mut r = Reader::new(WHAT, bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let precision = match r.u8()? {
        4 => Precision::F32,
        8 => Precision::F64,
        p => return Err(r.err(format!("unknown precision {p}"))),
    };
    let kind = SplitKind::from_code(r.u8()?).ok_or_else(|| r.err("unknown split kind"))?;
    let classes = r.count32(4)?;
    let class_names = (0..classes).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    const HEADER: usize = 8 * 4 + 4 * 3;
    let n_train = r.count(HEADER)?;
    let n_test = r.count(HEADER)?;
    if n_train.checked_add(n_test).is_none_or(|n| n.saturating_mul(HEADER) > r.remaining()) {
        return Err(r.err("sequence counts exceed remaining data"));
    }
    let mut seqs = Vec::with_capacity(n_train + n_test);
    for _ in 0..n_train + n_test {
        let id = r.u64()?;
        let (label, subject, view) = (r.i64()?, r.i64()?, r.i64()?);
        let meta = SequenceMeta {
            id,
            label: optional::<usize>(&r, label, "label")?,
            subject: optional::<u32>(&r, subject, "subject")?,
            view: optional::<u32>(&r, view, "view")?,
            missing_joints: r.u32()?,
        };
        let (m, t) = (r.u32()? as usize, r.u32()? as usize);
        let n = COORDS
            .checked_mul(m)
            .and_then(|v| v.checked_mul(t))
            .filter(|&n| n.checked_mul(precision.width()).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| r.err(format!("sequence of {m} joints × {t} frames exceeds remaining data")))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(match precision {
                Precision::F32 => r.f32()? as f64,
                Precision::F64 => r.f64()?,
            });
        }
        let coords = Tensor::new(&[COORDS, m, t], data).map_err(|e| r.err(e.to_string()))?;
        seqs.push(SkeletonSequence::new(coords, meta).map_err(|e| r.err(e.to_string()))?);
    }
    r.finish()?;
    let test = seqs.split_off(n_train);
    DatasetSplit::new(seqs, test, kind, class_names).map_err(|e| Error::format(WHAT, e.to_string()))
}
