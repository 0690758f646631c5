//! Skeleton graphs and attention-prior affinity matrices.
//!
//! Both prior stages mix tokens through an affinity matrix built from a
//! fixed local topology `A` plus a learned global adjustment `Â`:
//!
//! ```text
//! combined = ((A + Â) + (A + Â)ᵀ) / 2
//! ```
//!
//! For the kinematics prior `A` is the skeleton adjacency with self-loops;
//! for the trajectory prior it is a banded frame-neighborhood matrix. No
//! degree normalization is applied anywhere; the fixed entries are exactly
//! 1.0 and the symmetrized sum is left unscaled beyond the /2.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{io_err, KtpError, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

const SKEL_MAGIC: &str = "ktp-skel";
const SKEL_VERSION: &str = "v1";
const DEFAULT_SKELETON_TEXT: &str = include_str!("../data/h36m17.skel");

/// Undirected joint tree. Edges are stored as parsed; adjacency-building
/// symmetrizes, so orientation never matters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
}

impl Skeleton {
    pub fn joints(&self) -> usize {
        self.joint_names.len()
    }

    /// The 17-joint humanoid shipped with the crate (pelvis-rooted, 16 bones).
    pub fn default_h36m17() -> Skeleton {
        parse_skeleton(DEFAULT_SKELETON_TEXT).expect("bundled skeleton file is well-formed")
    }

    pub fn load(path: &Path) -> Result<Skeleton> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        parse_skeleton(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{SKEL_MAGIC} {SKEL_VERSION} {}", self.joints());
        for (i, name) in self.joint_names.iter().enumerate() {
            let _ = writeln!(out, "{i} {name}");
        }
        let _ = writeln!(out, "edges:");
        for &(a, b) in &self.edges {
            let _ = writeln!(out, "{a} {b}");
        }
        out
    }
}

/// Parse the skeleton text format:
///
/// ```text
/// ktp-skel v1 <N>
/// <index> <name>     (N lines, indices 0..N in order)
/// edges:
/// <i> <j>            (one undirected edge per line)
/// ```
pub fn parse_skeleton(text: &str) -> Result<Skeleton> {
    let mut lines = LineCursor::new(text);

    let (offset, header) = lines
        .next_line()
        .ok_or_else(|| parse_err(0, "empty skeleton file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != SKEL_MAGIC {
        return Err(parse_err(offset, "expected header `ktp-skel v1 <N>`"));
    }
    if fields[1] != SKEL_VERSION {
        return Err(parse_err(
            offset,
            &format!("unsupported skeleton version `{}`", fields[1]),
        ));
    }
    let n: usize = fields[2]
        .parse()
        .map_err(|_| parse_err(offset, &format!("bad joint count `{}`", fields[2])))?;
    if n == 0 {
        return Err(parse_err(offset, "joint count must be >= 1"));
    }

    let mut joint_names = Vec::with_capacity(n);
    for expect in 0..n {
        let (offset, line) = lines
            .next_line()
            .ok_or_else(|| parse_err(text.len(), &format!("expected {n} joint lines, got {expect}")))?;
        let mut parts = line.splitn(2, char::is_whitespace);
        let idx: usize = parts
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|_| parse_err(offset, &format!("bad joint index in `{line}`")))?;
        if idx != expect {
            return Err(parse_err(
                offset,
                &format!("joint index {idx} out of order, expected {expect}"),
            ));
        }
        let name = parts.next().map(str::trim).unwrap_or("");
        if name.is_empty() {
            return Err(parse_err(offset, &format!("joint {idx} has no name")));
        }
        joint_names.push(name.to_string());
    }

    let (offset, marker) = lines
        .next_line()
        .ok_or_else(|| parse_err(text.len(), "expected `edges:` line"))?;
    if marker.trim() != "edges:" {
        return Err(parse_err(offset, &format!("expected `edges:`, got `{marker}`")));
    }

    let mut edges = Vec::new();
    let mut seen = std::collections::HashSet::new();
    while let Some((offset, line)) = lines.next_line() {
        if line.trim().is_empty() {
            continue; // tolerate blank trailing lines
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(offset, &format!("bad edge line `{line}`")));
        }
        let a: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(offset, &format!("bad edge endpoint `{}`", fields[0])))?;
        let b: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(offset, &format!("bad edge endpoint `{}`", fields[1])))?;
        if a >= n || b >= n {
            return Err(parse_err(
                offset,
                &format!("edge ({a}, {b}) references a joint >= {n}"),
            ));
        }
        if a == b {
            return Err(parse_err(offset, &format!("self-edge ({a}, {b}) rejected")));
        }
        let key = (a.min(b), a.max(b));
        if !seen.insert(key) {
            return Err(parse_err(offset, &format!("duplicate edge ({a}, {b})")));
        }
        edges.push((a, b));
    }

    Ok(Skeleton { joint_names, edges })
}

struct LineCursor<'a> {
    text: &'a str,
    offset: usize,
}

impl<'a> LineCursor<'a> {
    fn new(text: &'a str) -> Self {
        LineCursor { text, offset: 0 }
    }

    /// Yields (byte offset of line start, line content without newline).
    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        if self.offset >= self.text.len() {
            return None;
        }
        let start = self.offset;
        let rest = &self.text[start..];
        match rest.find('\n') {
            Some(pos) => {
                self.offset = start + pos + 1;
                Some((start, rest[..pos].trim_end_matches('\r')))
            }
            None => {
                self.offset = self.text.len();
                Some((start, rest))
            }
        }
    }
}

fn parse_err(offset: usize, message: &str) -> KtpError {
    KtpError::Parse {
        offset,
        message: message.to_string(),
    }
}

/// Joint-axis local topology: `N×N` with entry 1 iff `i == j` or `(i, j)`
/// is a skeleton edge (either orientation).
pub fn build_spatial_local(skeleton: &Skeleton) -> Tensor {
    let n = skeleton.joints();
    let mut a = Tensor::eye(n);
    for &(i, j) in &skeleton.edges {
        a.data_mut()[i * n + j] = 1.0;
        a.data_mut()[j * n + i] = 1.0;
    }
    a
}

/// Frame-axis local topology: `T×T` band, entry 1 iff `|i − j| <= radius`.
pub fn build_temporal_local(frames: usize, radius: usize) -> Result<Tensor> {
    if frames == 0 {
        return Err(KtpError::Validation(
            "temporal topology needs at least one frame".into(),
        ));
    }
    if radius == 0 {
        return Err(KtpError::Validation("temporal radius must be >= 1".into()));
    }
    let mut a = Tensor::zeros(vec![frames, frames]);
    for i in 0..frames {
        for j in 0..frames {
            if i.abs_diff(j) <= radius {
                a.data_mut()[i * frames + j] = 1.0;
            }
        }
    }
    Ok(a)
}

/// Symmetrized affinity `((A + Â) + (A + Â)ᵀ) / 2`, differentiable in `Â`.
///
/// For entry (i, j) both orientations compute the same fp sum, so the
/// result is exactly symmetric, not merely up to rounding.
pub fn combine(tape: &mut Tape, local: VarId, learned: VarId) -> Result<VarId> {
    let shape = tape.value(local).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(KtpError::Validation(format!(
            "combine needs a square rank-2 topology, got {shape:?}"
        )));
    }
    let s = tape.add(local, learned)?;
    let st = tape.permute(s, &[1, 0])?;
    let sum = tape.add(s, st)?;
    tape.scale(sum, 0.5)
}
