//! Smooth-pursuit tracklet extraction and matching.
//!
//! Correspondence between the eye and a screen object is established without
//! any calibrated mapping: over a short window, the 2D corneal trajectory and
//! the followed object's screen trajectory share the same normalized velocity
//! signature, up to a horizontal sign flip introduced by the eye-facing
//! camera. Once some mapping exists, matching switches to a guided mode that
//! validates candidates against predicted gaze.

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gpr::{GprError, GprModel};
use crate::types::ScreenPoint;

#[derive(Debug, Error)]
pub enum TrackletError {
    #[error("need {needed} samples, stream has {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("no candidate trajectories")]
    NoCandidates,
    #[error("candidate {id} has {got} frames, query has {expected}")]
    FrameMisalignment { id: u32, got: usize, expected: usize },
    #[error(transparent)]
    Gpr(#[from] GprError),
}

/// How velocity signatures are normalized before comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NormalizationMode {
    /// Scale each axis's first-difference vector to unit Euclidean norm.
    #[default]
    UnitL2,
    /// Scale so the signed elements sum to one. Oscillating motion makes the
    /// sum vanish, so this mode is kept only for side-by-side comparison.
    SumToUnity,
}

/// A windowed 2D corneal trajectory (z dropped under the constant-depth
/// assumption). Timestamps are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub frames: Vec<f64>,
    pub cornea_xy: Vec<[f64; 2]>,
}

impl Tracklet {
    pub fn new(frames: Vec<f64>, cornea_xy: Vec<[f64; 2]>) -> Self {
        assert_eq!(frames.len(), cornea_xy.len());
        debug_assert!(frames.windows(2).all(|w| w[1] > w[0]));
        Self { frames, cornea_xy }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// A screen-object trajectory aligned frame-for-frame with a query tracklet.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTrajectory {
    pub object_id: u32,
    pub points: Vec<ScreenPoint>,
}

/// Outcome of matching one query against a candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Winning object, or `None` when no similarity cleared the threshold.
    pub best_id: Option<u32>,
    /// Similarity of the winner (or the best loser when `best_id` is None).
    pub similarity: f64,
    pub per_candidate: Vec<(u32, f64)>,
}

/// Takes the most recent `n` samples of a corneal stream as a query tracklet,
/// dropping z.
pub fn extract_query(
    stream: &[(f64, Vector3<f64>)],
    n: usize,
) -> Result<Tracklet, TrackletError> {
    if stream.len() < n {
        return Err(TrackletError::InsufficientSamples {
            needed: n,
            got: stream.len(),
        });
    }
    let tail = &stream[stream.len() - n..];
    Ok(Tracklet::new(
        tail.iter().map(|(t, _)| *t).collect(),
        tail.iter().map(|(_, p)| [p.x, p.y]).collect(),
    ))
}

fn normalize(mut v: Vec<f64>, mode: NormalizationMode) -> Vec<f64> {
    let denom = match mode {
        NormalizationMode::UnitL2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        NormalizationMode::SumToUnity => v.iter().sum::<f64>(),
    };
    if denom.abs() > 0.0 {
        for x in &mut v {
            *x /= denom;
        }
    } else {
        for x in &mut v {
            *x = 0.0;
        }
    }
    v
}

/// Per-axis first differences scaled by [`NormalizationMode`]. An axis with no
/// motion maps to the zero vector.
pub fn velocity_signature(
    points: &[[f64; 2]],
    mode: NormalizationMode,
) -> (Vec<f64>, Vec<f64>) {
    debug_assert!(points.len() >= 2, "velocity signature needs >= 2 points");
    if points.len() < 2 {
        return (Vec::new(), Vec::new());
    }
    let vx: Vec<f64> = points.windows(2).map(|w| w[1][0] - w[0][0]).collect();
    let vy: Vec<f64> = points.windows(2).map(|w| w[1][1] - w[0][1]).collect();
    (normalize(vx, mode), normalize(vy, mode))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Appearance similarity of a candidate against a query signature.
///
/// The corneal horizontal velocity runs opposite to the object's (the camera
/// watches the eye mirrored), so the query's x signature is sign-reversed
/// before comparison. Distances between unit signatures are O(1) regardless
/// of window length, so the similarity sharpness uses sqrt(n) rather than the
/// raw cardinality, keeping thresholds meaningful across window sizes.
fn similarity(
    query_vx: &[f64],
    query_vy: &[f64],
    cand_vx: &[f64],
    cand_vy: &[f64],
    n: usize,
) -> f64 {
    let neg_qx: Vec<f64> = query_vx.iter().map(|x| -x).collect();
    let d_x = euclidean(&neg_qx, cand_vx);
    let d_y = euclidean(query_vy, cand_vy);
    let d = (d_x * d_x + d_y * d_y).sqrt();
    (-d / (n as f64).sqrt()).exp()
}

/// Initialization-mode matching: picks the candidate whose normalized velocity
/// signature best mirrors the query's, or `None` when the best similarity
/// stays below `tau_match`. Ties break toward the lowest object id.
pub fn match_query(
    query: &Tracklet,
    candidates: &[CandidateTrajectory],
    tau_match: f64,
    mode: NormalizationMode,
) -> Result<MatchResult, TrackletError> {
    if candidates.is_empty() {
        return Err(TrackletError::NoCandidates);
    }
    let n = query.len();
    for c in candidates {
        if c.points.len() != n {
            return Err(TrackletError::FrameMisalignment {
                id: c.object_id,
                got: c.points.len(),
                expected: n,
            });
        }
    }
    let (qx, qy) = velocity_signature(&query.cornea_xy, mode);
    let mut per_candidate = Vec::with_capacity(candidates.len());
    for c in candidates {
        let pts: Vec<[f64; 2]> = c.points.iter().map(|p| [p.x, p.y]).collect();
        let (cx, cy) = velocity_signature(&pts, mode);
        per_candidate.push((c.object_id, similarity(&qx, &qy, &cx, &cy, n)));
    }
    let mut best = per_candidate[0];
    for &(id, s) in &per_candidate[1..] {
        if s > best.1 || (s == best.1 && id < best.0) {
            best = (id, s);
        }
    }
    Ok(MatchResult {
        best_id: (best.1 >= tau_match).then_some(best.0),
        similarity: best.1,
        per_candidate,
    })
}

/// Guided matching once a mapping exists: predicts gaze for every query frame
/// through `model` and accepts the candidate with the smallest mean
/// per-frame distance to those predictions, provided it stays under `tau_px`.
pub fn guided_match(
    query_cornea: &[Vector3<f64>],
    candidates: &[CandidateTrajectory],
    model: &GprModel,
    tau_px: f64,
) -> Result<MatchResult, TrackletError> {
    if candidates.is_empty() {
        return Err(TrackletError::NoCandidates);
    }
    let n = query_cornea.len();
    for c in candidates {
        if c.points.len() != n {
            return Err(TrackletError::FrameMisalignment {
                id: c.object_id,
                got: c.points.len(),
                expected: n,
            });
        }
    }
    let predictions: Vec<ScreenPoint> = query_cornea
        .iter()
        .map(|c| {
            model
                .predict(&DVector::from_column_slice(&[c.x, c.y, c.z]))
                .map(|p| p.point)
        })
        .collect::<Result<_, _>>()?;

    let mut per_candidate = Vec::with_capacity(candidates.len());
    let mut best: Option<(u32, f64)> = None;
    for c in candidates {
        let mean_dist = c
            .points
            .iter()
            .zip(&predictions)
            .map(|(p, q)| p.dist(q))
            .sum::<f64>()
            / n as f64;
        // Report distance on the similarity scale used everywhere else.
        per_candidate.push((c.object_id, (-mean_dist / tau_px).exp()));
        if mean_dist < tau_px {
            let better = match best {
                Some((bid, bd)) => mean_dist < bd || (mean_dist == bd && c.object_id < bid),
                None => true,
            };
            if better {
                best = Some((c.object_id, mean_dist));
            }
        }
    }
    Ok(MatchResult {
        best_id: best.map(|(id, _)| id),
        similarity: best
            .map(|(_, d)| (-d / tau_px).exp())
            .unwrap_or_else(|| per_candidate.iter().map(|c| c.1).fold(0.0, f64::max)),
        per_candidate,
    })
}
