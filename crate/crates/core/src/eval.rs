//! Angular-error metrics, fixation evaluation protocols, and comparison
//! tables.

use std::fmt::Write as _;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{eval_biquadratic, BiquadraticMap};
use crate::engine::Engine;
use crate::gpr::GprModel;
use crate::trace::FrameRecord;
use crate::types::{GazePrediction, PredictionSource, ScreenPoint};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("target {index} has no dwell frames in the trace")]
    MissingTarget { index: usize },
    #[error("target {index}: predictor produced no predictions over its window")]
    NoPredictions { index: usize },
    #[error("report line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Pixel-to-degree conversion for error reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularConfig {
    pub px_per_degree: f64,
}

impl Default for AngularConfig {
    fn default() -> Self {
        Self { px_per_degree: 5.0 }
    }
}

/// Euclidean pixel distance converted to visual degrees.
pub fn angular_error(pred: &ScreenPoint, truth: &ScreenPoint, cfg: &AngularConfig) -> f64 {
    pred.dist(truth) / cfg.px_per_degree
}

/// Anything that can predict screen gaze from a corneal sample.
pub trait GazePredictor {
    fn predict_gaze(&self, cornea: &Vector3<f64>) -> Option<GazePrediction>;
    fn label(&self) -> String;
}

impl GazePredictor for BiquadraticMap {
    fn predict_gaze(&self, cornea: &Vector3<f64>) -> Option<GazePrediction> {
        Some(GazePrediction {
            point: eval_biquadratic(self, cornea),
            variance: [0.0, 0.0],
            source: PredictionSource::Baseline,
        })
    }

    fn label(&self) -> String {
        "baseline-poly".to_string()
    }
}

impl GazePredictor for GprModel {
    fn predict_gaze(&self, cornea: &Vector3<f64>) -> Option<GazePrediction> {
        self.predict(&DVector::from_column_slice(&[cornea.x, cornea.y, cornea.z]))
            .ok()
            .map(|p| GazePrediction {
                point: p.point,
                variance: p.variance,
                source: PredictionSource::Baseline,
            })
    }

    fn label(&self) -> String {
        "baseline-gpr".to_string()
    }
}

impl GazePredictor for Engine {
    fn predict_gaze(&self, cornea: &Vector3<f64>) -> Option<GazePrediction> {
        self.predict_frozen(cornea)
    }

    fn label(&self) -> String {
        "auto-calib".to_string()
    }
}

/// Aggregated evaluation outcome for one predictor on one protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub condition: String,
    pub px_per_degree: f64,
    /// Mean angular error per protocol target, degrees.
    pub per_target: Vec<f64>,
    pub mean_deg: f64,
    pub median_deg: f64,
    pub p95_deg: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

fn aggregate(
    method: String,
    condition: String,
    cfg: &AngularConfig,
    per_target: Vec<f64>,
) -> EvalReport {
    let mean = per_target.iter().sum::<f64>() / per_target.len() as f64;
    let mut sorted = per_target.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    EvalReport {
        method,
        condition,
        px_per_degree: cfg.px_per_degree,
        mean_deg: mean,
        median_deg: quantile(&sorted, 0.5),
        p95_deg: quantile(&sorted, 0.95),
        per_target,
    }
}

/// Runs a fixation protocol: per-target mean angular error over each dwell
/// window, with learning frozen (the predictor is only queried).
///
/// Targets are located by the `followed` id in the trace, matching the
/// fixation-protocol layout.
pub fn run_protocol(
    predictor: &dyn GazePredictor,
    frames: &[FrameRecord],
    targets: &[ScreenPoint],
    condition: &str,
    cfg: &AngularConfig,
) -> Result<EvalReport, EvalError> {
    let mut per_target = Vec::with_capacity(targets.len());
    for (index, _) in targets.iter().enumerate() {
        let window: Vec<&FrameRecord> = frames
            .iter()
            .filter(|f| f.followed == Some(index as u32))
            .collect();
        if window.is_empty() {
            return Err(EvalError::MissingTarget { index });
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for f in &window {
            if let Some(pred) = predictor.predict_gaze(&f.cornea) {
                total += angular_error(&pred.point, &f.true_gaze, cfg);
                count += 1;
            }
        }
        if count == 0 {
            return Err(EvalError::NoPredictions { index });
        }
        per_target.push(total / count as f64);
    }
    Ok(aggregate(
        predictor.label(),
        condition.to_string(),
        cfg,
        per_target,
    ))
}

/// A static reference row shown alongside measured results: published
/// accuracy figures for comparable systems and conditions.
pub struct ReferenceRow {
    pub method: &'static str,
    pub setup: &'static str,
    pub error_deg: &'static str,
}

/// Published accuracy context for the comparison table.
pub fn reference_rows() -> Vec<ReferenceRow> {
    vec![
        ReferenceRow {
            method: "commercial VR eye tracker (published)",
            setup: "VR",
            error_deg: "0.5-1.0",
        },
        ReferenceRow {
            method: "9-pt calib, chin rest, poly (published)",
            setup: "VR",
            error_deg: "0.75",
        },
        ReferenceRow {
            method: "9-pt calib, chin rest, GPR (published)",
            setup: "VR",
            error_deg: "0.776",
        },
        ReferenceRow {
            method: "9-pt calib, no chin rest, poly (published)",
            setup: "VR",
            error_deg: "1.223",
        },
        ReferenceRow {
            method: "9-pt calib, no chin rest, GPR (published)",
            setup: "VR",
            error_deg: "1.248",
        },
        ReferenceRow {
            method: "pursuit auto-calib, 13-pt eval (published)",
            setup: "VR",
            error_deg: "1.822",
        },
        ReferenceRow {
            method: "adaptive AR calib, human set (published)",
            setup: "AR",
            error_deg: "0.168",
        },
        ReferenceRow {
            method: "adaptive AR calib, simulated set (published)",
            setup: "AR",
            error_deg: "1.494",
        },
        ReferenceRow {
            method: "saliency AR self-calib (published)",
            setup: "AR",
            error_deg: "5-10",
        },
    ]
}

/// Renders a comparison table: measured rows sorted by method label, then
/// the static reference annotations.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let mut rows: Vec<&EvalReport> = reports.iter().collect();
    rows.sort_by(|a, b| (a.method.as_str(), a.condition.as_str())
        .cmp(&(b.method.as_str(), b.condition.as_str())));
    let mut out = String::new();
    writeln!(
        out,
        "{:<46} {:<14} {:>10} {:>10} {:>10}",
        "method", "condition", "mean(deg)", "med(deg)", "p95(deg)"
    )
    .unwrap();
    for r in rows {
        writeln!(
            out,
            "{:<46} {:<14} {:>10.3} {:>10.3} {:>10.3}",
            r.method, r.condition, r.mean_deg, r.median_deg, r.p95_deg
        )
        .unwrap();
    }
    writeln!(out, "{:-<94}", "").unwrap();
    for r in reference_rows() {
        writeln!(
            out,
            "{:<46} {:<14} {:>10} {:>20}",
            r.method, r.setup, r.error_deg, "reference"
        )
        .unwrap();
    }
    out
}

/// Writes reports as a delimited file (one measured row per report plus
/// tagged reference rows). Reference rows are annotations, not data;
/// [`parse_report_file`] returns only the measured reports.
pub fn write_report_file(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    writeln!(out, "gazereport 1").unwrap();
    writeln!(
        out,
        "kind\tmethod\tcondition\tpx_per_degree\tmean_deg\tmedian_deg\tp95_deg\tper_target"
    )
    .unwrap();
    for r in reports {
        let per: Vec<String> = r.per_target.iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(
            out,
            "measured\t{}\t{}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{}",
            r.method,
            r.condition,
            r.px_per_degree,
            r.mean_deg,
            r.median_deg,
            r.p95_deg,
            per.join(";")
        )
        .unwrap();
    }
    for r in reference_rows() {
        writeln!(out, "reference\t{}\t{}\t{}\t\t\t\t", r.method, r.setup, r.error_deg).unwrap();
    }
    out
}

pub fn parse_report_file(content: &str) -> Result<Vec<EvalReport>, EvalError> {
    let mut reports = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if i == 0 {
            if !line.starts_with("gazereport") {
                return Err(EvalError::Parse {
                    line: 1,
                    msg: "missing gazereport header".into(),
                });
            }
            continue;
        }
        if i == 1 || line.trim().is_empty() {
            continue; // column header
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields[0] != "measured" {
            continue;
        }
        if fields.len() < 8 {
            return Err(EvalError::Parse {
                line: i + 1,
                msg: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str, name: &str| -> Result<f64, EvalError> {
            s.parse().map_err(|_| EvalError::Parse {
                line: i + 1,
                msg: format!("bad {name} '{s}'"),
            })
        };
        let per_target = fields[7]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| parse_f(s, "per_target"))
            .collect::<Result<Vec<f64>, _>>()?;
        reports.push(EvalReport {
            method: fields[1].to_string(),
            condition: fields[2].to_string(),
            px_per_degree: parse_f(fields[3], "px_per_degree")?,
            mean_deg: parse_f(fields[4], "mean_deg")?,
            median_deg: parse_f(fields[5], "median_deg")?,
            p95_deg: parse_f(fields[6], "p95_deg")?,
            per_target,
        });
    }
    Ok(reports)
}
