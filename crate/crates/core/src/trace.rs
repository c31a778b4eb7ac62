//! Line-delimited session trace format.
//!
//! A trace file starts with a single header line carrying the schema version,
//! frame rate, screen dimensions, and pixels-per-degree, followed by one
//! [`FrameRecord`] per line. Record floats are serialized with 9 significant
//! digits; identical inputs produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::ScreenPoint;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported trace schema version {0}")]
    UnsupportedVersion(u32),
    #[error("missing header line")]
    MissingHeader,
}

/// Trace-level metadata from the header line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub rate_hz: f64,
    pub screen_w: f64,
    pub screen_h: f64,
    pub px_per_degree: f64,
    /// Version string of the tool that wrote the trace.
    pub generator: String,
}

/// One synchronized frame: sensor sample, visible objects, and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: u64,
    pub t: f64,
    /// Corneal center (mm, camera frame), noise and slippage applied.
    pub cornea: Vector3<f64>,
    /// Visible screen objects as (id, position px).
    pub objects: Vec<(u32, ScreenPoint)>,
    /// Ground-truth gaze point (px).
    pub true_gaze: ScreenPoint,
    /// Id of the followed object, when the scripted gaze is in pursuit or
    /// fixation; `None` during free viewing and transitions.
    pub followed: Option<u32>,
}

fn fmt_f(value: f64) -> String {
    format!("{value:.8e}")
}

pub fn write_header(header: &TraceHeader) -> String {
    format!(
        "gazetrace {} rate={} screen={}x{} px_per_degree={} generator={}",
        header.version,
        header.rate_hz,
        header.screen_w,
        header.screen_h,
        header.px_per_degree,
        header.generator
    )
}

pub fn write_record(rec: &FrameRecord) -> String {
    let mut line = String::new();
    write!(
        line,
        "{} {} {} {} {} {}",
        rec.frame,
        fmt_f(rec.t),
        fmt_f(rec.cornea.x),
        fmt_f(rec.cornea.y),
        fmt_f(rec.cornea.z),
        rec.objects.len()
    )
    .unwrap();
    for (id, p) in &rec.objects {
        write!(line, " {} {} {}", id, fmt_f(p.x), fmt_f(p.y)).unwrap();
    }
    write!(
        line,
        " {} {} {}",
        fmt_f(rec.true_gaze.x),
        fmt_f(rec.true_gaze.y),
        match rec.followed {
            Some(id) => id.to_string(),
            None => "-".to_string(),
        }
    )
    .unwrap();
    line
}

pub fn write_trace_string(header: &TraceHeader, frames: &[FrameRecord]) -> String {
    let mut out = String::with_capacity(frames.len() * 120 + 80);
    out.push_str(&write_header(header));
    out.push('\n');
    for rec in frames {
        out.push_str(&write_record(rec));
        out.push('\n');
    }
    out
}

pub fn save_trace(
    path: &Path,
    header: &TraceHeader,
    frames: &[FrameRecord],
) -> Result<(), TraceError> {
    fs::write(path, write_trace_string(header, frames))?;
    Ok(())
}

fn parse_err<T>(line: usize, msg: impl Into<String>) -> Result<T, TraceError> {
    Err(TraceError::Parse {
        line,
        msg: msg.into(),
    })
}

pub fn parse_header(line: &str) -> Result<TraceHeader, TraceError> {
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some("gazetrace") {
        return parse_err(1, "expected 'gazetrace' magic");
    }
    let version: u32 = tokens
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or(TraceError::MissingHeader)?;
    if version != SCHEMA_VERSION {
        return Err(TraceError::UnsupportedVersion(version));
    }
    let mut header = TraceHeader {
        version,
        rate_hz: 0.0,
        screen_w: 0.0,
        screen_h: 0.0,
        px_per_degree: 0.0,
        generator: String::new(),
    };
    for tok in tokens {
        let (key, value) = tok.split_once('=').ok_or_else(|| TraceError::Parse {
            line: 1,
            msg: format!("malformed header token '{tok}'"),
        })?;
        match key {
            "rate" => {
                header.rate_hz = value.parse().map_err(|_| TraceError::Parse {
                    line: 1,
                    msg: format!("bad rate '{value}'"),
                })?
            }
            "screen" => {
                let (w, h) = value.split_once('x').ok_or_else(|| TraceError::Parse {
                    line: 1,
                    msg: format!("bad screen '{value}'"),
                })?;
                header.screen_w = w.parse().map_err(|_| TraceError::Parse {
                    line: 1,
                    msg: format!("bad screen width '{w}'"),
                })?;
                header.screen_h = h.parse().map_err(|_| TraceError::Parse {
                    line: 1,
                    msg: format!("bad screen height '{h}'"),
                })?;
            }
            "px_per_degree" => {
                header.px_per_degree = value.parse().map_err(|_| TraceError::Parse {
                    line: 1,
                    msg: format!("bad px_per_degree '{value}'"),
                })?
            }
            "generator" => header.generator = value.to_string(),
            _ => {} // forward compatibility: unknown keys ignored
        }
    }
    if header.rate_hz <= 0.0 || header.screen_w <= 0.0 || header.screen_h <= 0.0 {
        return parse_err(1, "header missing rate or screen dimensions");
    }
    Ok(header)
}

pub fn parse_record(line_no: usize, line: &str) -> Result<FrameRecord, TraceError> {
    let mut t = line.split_whitespace();
    let mut next_f = |name: &str| -> Result<f64, TraceError> {
        t.next()
            .and_then(|v| v.parse().ok())
            .ok_or(TraceError::Parse {
                line: line_no,
                msg: format!("missing or bad field '{name}'"),
            })
    };
    let frame = next_f("frame")? as u64;
    let time = next_f("t")?;
    let cx = next_f("cx")?;
    let cy = next_f("cy")?;
    let cz = next_f("cz")?;
    let n_obj = next_f("n_obj")? as usize;
    let mut objects = Vec::with_capacity(n_obj);
    for i in 0..n_obj {
        let id = next_f(&format!("obj{i}.id"))? as u32;
        let x = next_f(&format!("obj{i}.x"))?;
        let y = next_f(&format!("obj{i}.y"))?;
        objects.push((id, ScreenPoint::new(x, y)));
    }
    let gx = next_f("gaze.x")?;
    let gy = next_f("gaze.y")?;
    let followed = match t.next() {
        Some("-") => None,
        Some(v) => Some(v.parse().map_err(|_| TraceError::Parse {
            line: line_no,
            msg: format!("bad followed id '{v}'"),
        })?),
        None => {
            return parse_err(line_no, "missing followed field");
        }
    };
    Ok(FrameRecord {
        frame,
        t: time,
        cornea: Vector3::new(cx, cy, cz),
        objects,
        true_gaze: ScreenPoint::new(gx, gy),
        followed,
    })
}

pub fn parse_trace(content: &str) -> Result<(TraceHeader, Vec<FrameRecord>), TraceError> {
    let mut lines = content.lines();
    let header_line = lines.next().ok_or(TraceError::MissingHeader)?;
    let header = parse_header(header_line)?;
    let mut frames = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        frames.push(parse_record(i + 2, line)?);
    }
    Ok((header, frames))
}

pub fn load_trace(path: &Path) -> Result<(TraceHeader, Vec<FrameRecord>), TraceError> {
    let content = fs::read_to_string(path)?;
    parse_trace(&content)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_header() -> TraceHeader {
        TraceHeader {
            version: SCHEMA_VERSION,
            rate_hz: 100.0,
            screen_w: 500.0,
            screen_h: 300.0,
            px_per_degree: 5.0,
            generator: "test".to_string(),
        }
    }

    fn sample_record(frame: u64) -> FrameRecord {
        FrameRecord {
            frame,
            t: frame as f64 * 0.01,
            cornea: Vector3::new(-1.23456789, 2.3456789e-3, 101.5),
            objects: vec![
                (0, ScreenPoint::new(10.0, 20.0)),
                (3, ScreenPoint::new(450.5, 299.0)),
            ],
            true_gaze: ScreenPoint::new(250.0, 150.0),
            followed: if frame % 2 == 0 { Some(3) } else { None },
        }
    }

    #[test]
    fn round_trip_preserves_records() {
        let header = sample_header();
        let frames: Vec<FrameRecord> = (0..5).map(sample_record).collect();
        let text = write_trace_string(&header, &frames);
        let (h2, f2) = parse_trace(&text).unwrap();
        assert_eq!(h2, header);
        assert_eq!(f2.len(), frames.len());
        for (a, b) in frames.iter().zip(&f2) {
            assert_eq!(a.frame, b.frame);
            assert_eq!(a.followed, b.followed);
            assert_eq!(a.objects.len(), b.objects.len());
            // 9 significant digits survive the trip at these magnitudes.
            assert!((a.cornea.x - b.cornea.x).abs() < 1e-8);
            assert!((a.true_gaze.x - b.true_gaze.x).abs() < 1e-6);
        }
    }

    #[test]
    fn serialization_is_deterministic() {
        let header = sample_header();
        let frames: Vec<FrameRecord> = (0..3).map(sample_record).collect();
        assert_eq!(
            write_trace_string(&header, &frames),
            write_trace_string(&header, &frames)
        );
    }

    #[test]
    fn floats_use_nine_significant_digits() {
        let line = write_record(&sample_record(0));
        assert!(line.contains("-1.23456789e0"), "line: {line}");
    }

    #[test]
    fn rejects_unknown_version() {
        let text = "gazetrace 99 rate=100 screen=500x300 px_per_degree=5 generator=x\n";
        assert!(matches!(
            parse_trace(text),
            Err(TraceError::UnsupportedVersion(99))
        ));
    }

    #[test]
    fn reports_bad_line_numbers() {
        let header = sample_header();
        let mut text = write_trace_string(&header, &[sample_record(0)]);
        text.push_str("garbage line\n");
        match parse_trace(&text) {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
