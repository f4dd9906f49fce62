//! Reader and writer for the NTU RGB+D `.skeleton` text layout.
//!
//! ```text
//! <frame count>
//! per frame:   <body count>
//!   per body:  <body id> <9 more tracking fields>
//!              <joint count = 25>
//!              25 × <x> <y> <z> <depth/colour/orientation/state fields...>
//! ```
//!
//! Only `x y z` of each joint line are kept.

use std::fmt::Write as _;

use super::{SequenceMeta, SkeletonSequence};
use crate::error::{Error, Result};

pub const NTU_JOINTS: usize = 25;

/// Which tracked bodies become sequences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BodyMode {
    /// Only the first body to appear.
    #[default]
    First,
    /// One sequence per body id, over the frames it appears in.
    All,
    /// First two bodies side by side along the joint axis (`m = 50`);
    /// an absent body contributes zeros.
    ConcatTwo,
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, expecting: &str) -> Result<(usize, &'a str)> {
        for (i, line) in self.inner.by_ref() {
            self.last = i + 1;
            if !line.trim().is_empty() {
                return Ok((i + 1, line));
            }
        }
        Err(Error::Parse { line: self.last + 1, msg: format!("unexpected end of file, expected {expecting}") })
    }
}

fn parse_count(line_no: usize, line: &str, what: &str) -> Result<usize> {
    let mut fields = line.split_whitespace();
    let tok = fields.next().unwrap_or("");
    let n = tok
        .parse::<usize>()
        .map_err(|_| Error::Parse { line: line_no, msg: format!("expected {what}, found `{tok}`") })?;
    if fields.next().is_some() {
        return Err(Error::Parse { line: line_no, msg: format!("trailing fields after {what}") });
    }
    Ok(n)
}

fn parse_coord(line_no: usize, tok: Option<&str>) -> Result<f64> {
    let tok = tok.ok_or_else(|| Error::Parse { line: line_no, msg: "joint line has fewer than 3 fields".into() })?;
    let v = tok
        .parse::<f64>()
        .map_err(|_| Error::Parse { line: line_no, msg: format!("unparsable coordinate `{tok}`") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line: line_no, msg: format!("non-finite coordinate `{tok}`") });
    }
    Ok(v)
}

type Frame = Vec<[f64; 3]>;

/// Parses one `.skeleton` file into sequences according to `mode`.
pub fn parse_ntu_skeleton(text: &str, mode: BodyMode) -> Result<Vec<SkeletonSequence>> {
    let mut lines = Lines { inner: text.lines().enumerate(), last: 0 };
    let (ln, line) = lines.next("frame count")?;
    let frame_count = parse_count(ln, line, "frame count")?;
    if frame_count == 0 {
        return Err(Error::Parse { line: ln, msg: "file declares zero frames".into() });
    }

    // (body id, per-frame joints) in order of first appearance.
    let mut bodies: Vec<(u64, Vec<Option<Frame>>)> = Vec::new();
    for frame in 0..frame_count {
        let (ln, line) = lines.next("body count")?;
        let body_count = parse_count(ln, line, "body count")?;
        for _ in 0..body_count {
            let (ln, info) = lines.next("body info line")?;
            let tok = info.split_whitespace().next().unwrap_or("");
            let id = tok
                .parse::<u64>()
                .map_err(|_| Error::Parse { line: ln, msg: format!("expected body id, found `{tok}`") })?;
            let (ln, line) = lines.next("joint count")?;
            let joints = parse_count(ln, line, "joint count")?;
            if joints != NTU_JOINTS {
                return Err(Error::Parse { line: ln, msg: format!("expected {NTU_JOINTS} joints, found {joints}") });
            }
            let mut points = Vec::with_capacity(NTU_JOINTS);
            for _ in 0..NTU_JOINTS {
                let (ln, line) = lines.next("joint line")?;
                let mut f = line.split_whitespace();
                points.push([parse_coord(ln, f.next())?, parse_coord(ln, f.next())?, parse_coord(ln, f.next())?]);
            }
            let slot = match bodies.iter().position(|(b, _)| *b == id) {
                Some(i) => i,
                None => {
                    bodies.push((id, Vec::new()));
                    bodies.len() - 1
                }
            };
            let frames = &mut bodies[slot].1;
            frames.resize(frame + 1, None);
            if frames[frame].is_some() {
                return Err(Error::Parse { line: ln, msg: format!("body {id} appears twice in frame {frame}") });
            }
            frames[frame] = Some(points);
        }
    }
    if let Ok((ln, _)) = lines.next("") {
        return Err(Error::Parse { line: ln, msg: "unexpected content after the last frame".into() });
    }
    if bodies.is_empty() {
        return Err(Error::Parse { line: 1, msg: "no tracked bodies".into() });
    }
    for (_, frames) in &mut bodies {
        frames.resize(frame_count, None);
    }

    let build = |id: u64, frames: Vec<Frame>| -> Result<SkeletonSequence> {
        let missing = frames.iter().flatten().filter(|p| p.iter().all(|&v| v == 0.0)).count() as u32;
        SkeletonSequence::from_frames(&frames, SequenceMeta { id, missing_joints: missing, ..Default::default() })
    };

    match mode {
        BodyMode::First | BodyMode::All => {
            let take = if mode == BodyMode::First { 1 } else { bodies.len() };
            bodies
                .into_iter()
                .take(take)
                .map(|(id, frames)| build(id, frames.into_iter().flatten().collect()))
                .collect()
        }
        BodyMode::ConcatTwo => {
            let zeros = vec![[0.0; 3]; NTU_JOINTS];
            let first = &bodies[0].1;
            let second = bodies.get(1).map(|b| &b.1);
            let frames: Vec<Frame> = (0..frame_count)
                .filter(|&f| first[f].is_some() || second.is_some_and(|s| s[f].is_some()))
                .map(|f| {
                    let mut joints = first[f].clone().unwrap_or_else(|| zeros.clone());
                    joints.extend(second.and_then(|s| s[f].clone()).unwrap_or_else(|| zeros.clone()));
                    joints
                })
                .collect();
            Ok(vec![build(bodies[0].0, frames)?])
        }
    }
}

/// Writes single-body sequences as one `.skeleton` file; sequence `k` is
/// body `k` in every frame. Tracking fields are written as zeros.
pub fn write_ntu_skeleton(sequences: &[SkeletonSequence]) -> Result<String> {
    let Some(first) = sequences.first() else {
        return Err(Error::invalid("write_ntu_skeleton", "no sequences"));
    };
    let t = first.frames();
    for s in sequences {
        if s.joints() != NTU_JOINTS || s.frames() != t {
            return Err(Error::invalid(
                "write_ntu_skeleton",
                format!("sequences must all be {NTU_JOINTS} joints × {t} frames"),
            ));
        }
    }
    let mut out = String::new();
    writeln!(out, "{t}").unwrap();
    for f in 0..t {
        writeln!(out, "{}", sequences.len()).unwrap();
        for s in sequences {
            writeln!(out, "{} 0 0 0 0 0 0 0 0 2", s.meta.id).unwrap();
            writeln!(out, "{NTU_JOINTS}").unwrap();
            for j in 0..NTU_JOINTS {
                let [x, y, z] = s.point(j, f);
                writeln!(out, "{x:?} {y:?} {z:?} 0 0 0 0 0 0 0 0 2").unwrap();
            }
        }
    }
    Ok(out)
}
