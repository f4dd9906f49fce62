//! Skeleton sequences, the NTU text reader, preprocessing, the synthetic
//! benchmark generator and the binary dataset cache.

mod cache;
mod corpus;
mod ntu;
mod synth;
mod transform;

pub use cache::{decode_dataset, encode_dataset, Precision};
pub use corpus::{ntu_split, NtuName, CROSS_SUBJECT_TRAIN, CROSS_VIEW_TRAIN};
pub use ntu::{parse_ntu_skeleton, write_ntu_skeleton, BodyMode, NTU_JOINTS};
pub use synth::{synth_dataset, SynthConfig};
pub use transform::{normalize, resample_temporal, NormalizeConfig, DEFAULT_FRAMES};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial coordinates per joint.
pub const COORDS: usize = 3;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceMeta {
    /// Identity used to keep train and test disjoint.
    pub id: u64,
    pub label: Option<usize>,
    pub subject: Option<u32>,
    pub view: Option<u32>,
    /// Joint-frames whose coordinates are all exactly zero (untracked joints).
    pub missing_joints: u32,
}

/// Joint coordinates over time, stored as a `3 × m × t` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    coords: Tensor,
    pub meta: SequenceMeta,
}

impl SkeletonSequence {
    pub fn new(coords: Tensor, meta: SequenceMeta) -> Result<Self> {
        const OP: &str = "skeleton_sequence";
        coords.expect_rank(OP, 3)?;
        if coords.dim(0) != COORDS {
            return Err(Error::shape(OP, "coordinate dimension d", COORDS, coords.dim(0)));
        }
        if coords.dim(1) == 0 || coords.dim(2) == 0 {
            return Err(Error::invalid(OP, "joint and frame counts must be positive"));
        }
        if !coords.is_finite() {
            return Err(Error::NonFinite { op: OP });
        }
        Ok(SkeletonSequence { coords, meta })
    }

    /// Builds a sequence from per-frame joint rows: `frames[t][j] = [x, y, z]`.
    pub fn from_frames(frames: &[Vec<[f64; 3]>], meta: SequenceMeta) -> Result<Self> {
        let t = frames.len();
        let m = frames.first().map_or(0, Vec::len);
        if t == 0 || m == 0 {
            return Err(Error::invalid("skeleton_sequence", "no frames or no joints"));
        }
        if frames.iter().any(|f| f.len() != m) {
            return Err(Error::invalid("skeleton_sequence", "frames disagree on joint count"));
        }
        let mut data = vec![0.0; COORDS * m * t];
        for (ti, frame) in frames.iter().enumerate() {
            for (j, p) in frame.iter().enumerate() {
                for d in 0..COORDS {
                    data[(d * m + j) * t + ti] = p[d];
                }
            }
        }
        Self::new(Tensor::new(&[COORDS, m, t], data)?, meta)
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn joints(&self) -> usize {
        self.coords.dim(1)
    }

    pub fn frames(&self) -> usize {
        self.coords.dim(2)
    }

    pub fn label(&self) -> Option<usize> {
        self.meta.label
    }

    #[inline]
    pub fn at(&self, d: usize, joint: usize, frame: usize) -> f64 {
        self.coords.data()[(d * self.joints() + joint) * self.frames() + frame]
    }

    /// Joint `j` at frame `t` as a point.
    pub fn point(&self, joint: usize, frame: usize) -> [f64; 3] {
        [0, 1, 2].map(|d| self.at(d, joint, frame))
    }

    /// Same metadata, new coordinates.
    pub fn with_coords(&self, coords: Tensor) -> Result<Self> {
        Self::new(coords, self.meta.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    CrossSubject,
    CrossView,
    CrossSetup,
    Synthetic,
}

impl SplitKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            SplitKind::CrossSubject => 0,
            SplitKind::CrossView => 1,
            SplitKind::CrossSetup => 2,
            SplitKind::Synthetic => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => SplitKind::CrossSubject,
            1 => SplitKind::CrossView,
            2 => SplitKind::CrossSetup,
            3 => SplitKind::Synthetic,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SkeletonSequence>,
    pub test: Vec<SkeletonSequence>,
    pub kind: SplitKind,
    /// Display names indexed by label.
    pub class_names: Vec<String>,
}

impl DatasetSplit {
    /// Rejects splits whose train and test sets share a sequence id.
    pub fn new(
        train: Vec<SkeletonSequence>,
        test: Vec<SkeletonSequence>,
        kind: SplitKind,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let ids: HashSet<u64> = train.iter().map(|s| s.meta.id).collect();
        if let Some(dup) = test.iter().find(|s| ids.contains(&s.meta.id)) {
            return Err(Error::invalid("dataset_split", format!("sequence {} is in both train and test", dup.meta.id)));
        }
        Ok(DatasetSplit { train, test, kind, class_names })
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Sequences per label, `(train, test)`.
    pub fn class_counts(&self) -> Vec<(usize, usize)> {
        let mut counts = vec![(0, 0); self.class_count()];
        for s in &self.train {
            if let Some(c) = s.label().filter(|&c| c < counts.len()) {
                counts[c].0 += 1;
            }
        }
        for s in &self.test {
            if let Some(c) = s.label().filter(|&c| c < counts.len()) {
                counts[c].1 += 1;
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_coordinate_dimension() {
        assert!(SkeletonSequence::new(Tensor::zeros(&[2, 4, 5]), SequenceMeta::default()).is_err());
        let mut t = Tensor::zeros(&[3, 4, 5]);
        t.data_mut()[7] = f64::NAN;
        assert!(SkeletonSequence::new(t, SequenceMeta::default()).is_err());
    }

    #[test]
    fn from_frames_layout() {
        let frames = vec![vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], vec![[7.0, 8.0, 9.0], [10.0, 11.0, 12.0]]];
        let s = SkeletonSequence::from_frames(&frames, SequenceMeta::default()).unwrap();
        assert_eq!((s.joints(), s.frames()), (2, 2));
        assert_eq!(s.point(1, 0), [4.0, 5.0, 6.0]);
        assert_eq!(s.point(0, 1), [7.0, 8.0, 9.0]);
    }

    #[test]
    fn split_must_be_disjoint() {
        let seq =
            |id| SkeletonSequence::new(Tensor::zeros(&[3, 1, 2]), SequenceMeta { id, ..Default::default() }).unwrap();
        assert!(DatasetSplit::new(vec![seq(1)], vec![seq(2)], SplitKind::Synthetic, vec![]).is_ok());
        assert!(DatasetSplit::new(vec![seq(1)], vec![seq(1)], SplitKind::Synthetic, vec![]).is_err());
    }
}
