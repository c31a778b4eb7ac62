//! Shared domain types.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// 2D screen-space position in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenPoint {
    pub x: f64,
    pub y: f64,
}

impl ScreenPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &ScreenPoint) -> f64 {
        self.dist_sq(other).sqrt()
    }

    pub fn dist_sq(&self, other: &ScreenPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

impl From<(f64, f64)> for ScreenPoint {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

/// Timestamped 3D corneal-center position (millimeters, camera frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornealSample {
    /// Timestamp in seconds.
    pub t: f64,
    /// Corneal center (x, y, z) in millimeters.
    pub pos: Vector3<f64>,
}

impl CornealSample {
    pub fn new(t: f64, x: f64, y: f64, z: f64) -> Self {
        Self {
            t,
            pos: Vector3::new(x, y, z),
        }
    }
}

/// Which model family produced a gaze prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictionSource {
    /// A local tracklet model; the index is the model's position in the
    /// buffer, oldest first.
    Local(usize),
    Global,
    Baseline,
}

/// A predicted screen gaze point with its predictive variance.
///
/// `variance` is reported per output dimension in px² after any
/// de-standardization, so predictions from differently-scaled models are
/// directly comparable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazePrediction {
    pub point: ScreenPoint,
    pub variance: [f64; 2],
    pub source: PredictionSource,
}

impl GazePrediction {
    /// The scalar used for model selection and disposal checks: the mean of
    /// the per-dimension variances.
    pub fn compensated_variance(&self) -> f64 {
        0.5 * (self.variance[0] + self.variance[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn screen_point_distance() {
        let a = ScreenPoint::new(0.0, 0.0);
        let b = ScreenPoint::new(3.0, 4.0);
        assert_eq!(a.dist(&b), 5.0);
        assert_eq!(a.dist_sq(&b), 25.0);
    }

    #[test]
    fn compensated_variance_is_mean_of_dims() {
        let p = GazePrediction {
            point: ScreenPoint::new(0.0, 0.0),
            variance: [2.0, 4.0],
            source: PredictionSource::Global,
        };
        assert_eq!(p.compensated_variance(), 3.0);
    }
}
