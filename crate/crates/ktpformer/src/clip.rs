//! Pose sequence container and the `ktp-clip` text format.
//!
//! ```text
//! ktp-clip v1 <frames> <joints> <dim> <unit>
//! # name=<label>        (optional, at most once)
//! # fps=<rate>          (optional, at most once)
//! <frames · joints lines of <dim> floats, frame-major>
//! ```
//!
//! `dim` is 2 or 3; `unit` is `mm` (absolute millimetres), `norm`
//! (dimensionless image-plane coordinates), or `px` (pixels). Floats are
//! written with the shortest representation that parses back to the same
//! bits, so save/load round-trips are lossless.

use std::path::Path;

use crate::error::{io_err, KtpError, Result};
use crate::tensor::Tensor;

pub const UNITS: [&str; 3] = ["mm", "norm", "px"];

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub name: Option<String>,
    pub fps: Option<f64>,
    pub unit: String,
    /// Positions, `[frames, joints, dim]`.
    pub data: Tensor,
}

impl PoseSequence {
    pub fn new(unit: &str, data: Tensor) -> Result<PoseSequence> {
        let seq = PoseSequence {
            name: None,
            fps: None,
            unit: unit.to_string(),
            data,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.data.shape();
        if shape.len() != 3 {
            return Err(KtpError::Validation(format!(
                "pose data must be [frames, joints, dim], got {shape:?}"
            )));
        }
        if shape[0] == 0 || shape[1] == 0 {
            return Err(KtpError::Validation(
                "pose data needs at least one frame and one joint".into(),
            ));
        }
        if shape[2] != 2 && shape[2] != 3 {
            return Err(KtpError::Validation(format!(
                "pose dim must be 2 or 3, got {}",
                shape[2]
            )));
        }
        if !UNITS.contains(&self.unit.as_str()) {
            return Err(KtpError::Validation(format!(
                "unknown unit `{}` (expected mm, norm, or px)",
                self.unit
            )));
        }
        if !self.data.is_finite() {
            return Err(KtpError::Validation(
                "pose data contains non-finite values".into(),
            ));
        }
        if let Some(fps) = self.fps {
            if !fps.is_finite() || fps <= 0.0 {
                return Err(KtpError::Validation(format!("fps must be positive, got {fps}")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "ktp-clip v1 {} {} {} {}\n",
            self.frames(),
            self.joints(),
            self.dim(),
            self.unit
        );
        if let Some(name) = &self.name {
            out.push_str(&format!("# name={name}\n"));
        }
        if let Some(fps) = self.fps {
            out.push_str(&format!("# fps={fps}\n"));
        }
        let d = self.dim();
        for point in self.data.data().chunks_exact(d) {
            let line: Vec<String> = point.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.to_text()).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<PoseSequence> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        parse_clip(&text)
    }
}

fn parse_err(offset: usize, message: String) -> KtpError {
    KtpError::Parse { offset, message }
}

/// Parse the `ktp-clip` text format; errors carry the byte offset of the
/// offending line.
pub fn parse_clip(text: &str) -> Result<PoseSequence> {
    let mut offset = 0usize;
    let mut lines = Vec::new(); // (byte offset, content)
    for line in text.split('\n') {
        lines.push((offset, line));
        offset += line.len() + 1;
    }

    let mut iter = lines.into_iter();
    let (header_off, header) = loop {
        match iter.next() {
            Some((off, line)) if line.trim().is_empty() => {
                if off == 0 {
                    continue;
                }
                return Err(parse_err(off, "missing header line".into()));
            }
            Some((off, line)) => break (off, line.trim()),
            None => return Err(parse_err(0, "empty clip file".into())),
        }
    };

    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 || fields[0] != "ktp-clip" {
        return Err(parse_err(
            header_off,
            format!("bad header `{header}`: expected `ktp-clip v1 <frames> <joints> <dim> <unit>`"),
        ));
    }
    if fields[1] != "v1" {
        return Err(parse_err(
            header_off,
            format!("unsupported version `{}`", fields[1]),
        ));
    }
    let parse_dim = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| parse_err(header_off, format!("{what} `{s}` is not a count")))
    };
    let frames = parse_dim(fields[2], "frame count")?;
    let joints = parse_dim(fields[3], "joint count")?;
    let dim = parse_dim(fields[4], "dim")?;
    let unit = fields[5].to_string();

    let mut name = None;
    let mut fps = None;
    let mut values: Vec<f64> = Vec::with_capacity(frames * joints * dim);
    let expected_lines = frames * joints;
    let mut seen_lines = 0usize;

    for (off, raw) in iter {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if seen_lines > 0 {
                return Err(parse_err(off, "comments must precede pose lines".into()));
            }
            let comment = comment.trim();
            if let Some(v) = comment.strip_prefix("name=") {
                if name.replace(v.to_string()).is_some() {
                    return Err(parse_err(off, "duplicate name comment".into()));
                }
            } else if let Some(v) = comment.strip_prefix("fps=") {
                let parsed: f64 = v
                    .parse()
                    .map_err(|_| parse_err(off, format!("fps `{v}` is not a number")))?;
                if fps.replace(parsed).is_some() {
                    return Err(parse_err(off, "duplicate fps comment".into()));
                }
            } else {
                return Err(parse_err(
                    off,
                    format!("unknown comment `{comment}` (expected name= or fps=)"),
                ));
            }
            continue;
        }
        if seen_lines == expected_lines {
            return Err(parse_err(
                off,
                format!("extra pose line after the expected {expected_lines}"),
            ));
        }
        let mut count = 0usize;
        for field in line.split_whitespace() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(off, format!("`{field}` is not a number")))?;
            values.push(v);
            count += 1;
        }
        if count != dim {
            return Err(parse_err(
                off,
                format!("expected {dim} values per pose line, got {count}"),
            ));
        }
        seen_lines += 1;
    }
    if seen_lines != expected_lines {
        return Err(parse_err(
            text.len(),
            format!("expected {expected_lines} pose lines, got {seen_lines}"),
        ));
    }

    let data = Tensor::new(vec![frames, joints, dim], values)
        .map_err(|e| parse_err(header_off, format!("inconsistent dimensions: {e}")))?;
    let seq = PoseSequence {
        name,
        fps,
        unit,
        data,
    };
    seq.validate()?;
    Ok(seq)
}
