//! Assembles parsed NTU files into a labelled train/test split.
//!
//! NTU file stems encode their capture metadata as `SsssCcccPpppRrrrAaaa`:
//! setup, camera, performer, replication and action, each 1-based.

use std::fmt;
use std::str::FromStr;

use super::{DatasetSplit, SkeletonSequence, SplitKind};
use crate::error::{Error, Result};

/// Performers assigned to the training side of the cross-subject split. The
/// first twenty cover the 60-class release; the rest extend it to 120.
pub const CROSS_SUBJECT_TRAIN: [u32; 53] = [
    1, 2, 4, 5, 8, 9, 13, 14, 15, 16, 17, 18, 19, 25, 27, 28, 31, 34, 35, 38, 45, 46, 47, 49, 50, 52, 53, 54, 55, 56,
    57, 58, 59, 70, 74, 78, 80, 81, 82, 83, 84, 85, 86, 89, 91, 92, 93, 94, 95, 97, 98, 100, 103,
];

/// Cameras whose recordings train the cross-view split; camera 1 tests.
pub const CROSS_VIEW_TRAIN: [u32; 2] = [2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NtuName {
    pub setup: u32,
    pub camera: u32,
    pub performer: u32,
    pub replication: u32,
    pub action: u32,
}

impl FromStr for NtuName {
    type Err = Error;

    /// Accepts a bare stem or a file name ending in `.skeleton`.
    fn from_str(name: &str) -> Result<Self> {
        let bad = || Error::invalid("ntu_name", format!("`{name}` is not of the form SsssCcccPpppRrrrAaaa"));
        let stem = name.strip_suffix(".skeleton").unwrap_or(name);
        if stem.len() != 20 || !stem.is_ascii() {
            return Err(bad());
        }
        let mut fields = [0u32; 5];
        for (k, tag) in "SCPRA".chars().enumerate() {
            let chunk = &stem[4 * k..4 * k + 4];
            if !chunk.starts_with(tag) || !chunk[1..].bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            fields[k] = chunk[1..].parse().map_err(|_| bad())?;
            if fields[k] == 0 {
                return Err(bad());
            }
        }
        let [setup, camera, performer, replication, action] = fields;
        Ok(NtuName { setup, camera, performer, replication, action })
    }
}

impl fmt::Display for NtuName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "S{:03}C{:03}P{:03}R{:03}A{:03}",
            self.setup, self.camera, self.performer, self.replication, self.action
        )
    }
}

impl NtuName {
    /// Zero-based class id.
    pub fn label(&self) -> usize {
        self.action as usize - 1
    }

    /// Whether the recording belongs to the training side of `kind`.
    /// Cross-setup trains on even setup ids.
    pub fn is_train(&self, kind: SplitKind) -> Result<bool> {
        match kind {
            SplitKind::CrossSubject => Ok(CROSS_SUBJECT_TRAIN.contains(&self.performer)),
            SplitKind::CrossView => Ok(CROSS_VIEW_TRAIN.contains(&self.camera)),
            SplitKind::CrossSetup => Ok(self.setup.is_multiple_of(2)),
            SplitKind::Synthetic => {
                Err(Error::invalid("ntu_split", "the synthetic split kind does not apply to NTU files"))
            }
        }
    }
}

/// Labels every sequence from its file name and assigns it to a side of
/// `kind`. Sequence ids are renumbered in input order so that bodies from
/// different files never collide.
pub fn ntu_split(files: Vec<(NtuName, Vec<SkeletonSequence>)>, kind: SplitKind) -> Result<DatasetSplit> {
    let classes = files.iter().map(|(n, _)| n.action as usize).max().unwrap_or(0);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut next_id = 0u64;
    for (name, seqs) in files {
        let side = if name.is_train(kind)? { &mut train } else { &mut test };
        for mut s in seqs {
            s.meta.id = next_id;
            s.meta.label = Some(name.label());
            s.meta.subject = Some(name.performer);
            s.meta.view = Some(name.camera);
            next_id += 1;
            side.push(s);
        }
    }
    let class_names = (1..=classes).map(|a| format!("A{a:03}")).collect();
    DatasetSplit::new(train, test, kind, class_names)
}
