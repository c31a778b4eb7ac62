//! Explicit fixation-target calibration: the bi-quadratic polynomial fit and
//! the GPR baseline it is compared against.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gpr::{GprError, GprHyperparams, GprModel};
use crate::trace::FrameRecord;
use crate::types::ScreenPoint;

/// Tolerance when matching a trace object position to a requested target.
const TARGET_POS_TOL: f64 = 1e-6;

/// Singular values below `max_sv * RANK_TOL` count as rank-deficient.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("target {index} at ({x:.1}, {y:.1}) has no fixation segment of {needed} frames")]
    MissingTarget {
        index: usize,
        x: f64,
        y: f64,
        needed: usize,
    },
    #[error("basis matrix rank {rank} < 9; targets are degenerate")]
    RankDeficient { rank: usize },
    #[error(transparent)]
    Gpr(#[from] GprError),
}

/// One corneal-center / known-gaze correspondence from a fixation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPair {
    /// Corneal center, mm, camera frame.
    pub cornea: Vector3<f64>,
    /// Known screen target, px.
    pub gaze: ScreenPoint,
}

/// Realistic capture ranges; pairs outside them usually indicate a bad trace.
pub fn range_warnings(pairs: &[CalibrationPair]) -> Vec<String> {
    let mut warnings = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let c = &p.cornea;
        if !(-2.5..=2.5).contains(&c.x) || !(-2.5..=3.5).contains(&c.y) || c.z < 100.0 {
            warnings.push(format!(
                "pair {i}: cornea ({:.3}, {:.3}, {:.1}) outside expected capture range",
                c.x, c.y, c.z
            ));
        }
        if !(0.0..=500.0).contains(&p.gaze.x) || !(0.0..=300.0).contains(&p.gaze.y) {
            warnings.push(format!(
                "pair {i}: gaze ({:.1}, {:.1}) outside screen",
                p.gaze.x, p.gaze.y
            ));
        }
    }
    warnings
}

/// 3x3 calibration grid inset 10% from the screen edges.
pub fn nine_point_targets(screen_w: f64, screen_h: f64) -> Vec<ScreenPoint> {
    let xs = [0.1 * screen_w, 0.5 * screen_w, 0.9 * screen_w];
    let ys = [0.1 * screen_h, 0.5 * screen_h, 0.9 * screen_h];
    let mut targets = Vec::with_capacity(9);
    for y in ys {
        for x in xs {
            targets.push(ScreenPoint::new(x, y));
        }
    }
    targets
}

/// The 9-point grid plus the four quarter-cell centers, for evaluation.
pub fn thirteen_point_targets(screen_w: f64, screen_h: f64) -> Vec<ScreenPoint> {
    let mut targets = nine_point_targets(screen_w, screen_h);
    let xs = [0.3 * screen_w, 0.7 * screen_w];
    let ys = [0.3 * screen_h, 0.7 * screen_h];
    for y in ys {
        for x in xs {
            targets.push(ScreenPoint::new(x, y));
        }
    }
    targets
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Extracts one calibration pair per target from a fixation trace.
///
/// A target's fixation segment is the set of frames whose `followed` id
/// matches the target's index and whose object table places that id at the
/// target position. The pair's cornea is the per-axis median over the
/// segment, which shrugs off blinks and outlier frames.
pub fn collect_pairs(
    frames: &[FrameRecord],
    targets: &[ScreenPoint],
    dwell_s: f64,
    rate_hz: f64,
) -> Result<Vec<CalibrationPair>, BaselineError> {
    let needed = (dwell_s * rate_hz).round().max(1.0) as usize;
    let mut pairs = Vec::with_capacity(targets.len());
    for (index, target) in targets.iter().enumerate() {
        let id = index as u32;
        let window: Vec<&FrameRecord> = frames
            .iter()
            .filter(|f| {
                f.followed == Some(id)
                    && f.objects.iter().any(|(oid, pos)| {
                        *oid == id && pos.dist(target) < TARGET_POS_TOL
                    })
            })
            .collect();
        if window.len() < needed {
            return Err(BaselineError::MissingTarget {
                index,
                x: target.x,
                y: target.y,
                needed,
            });
        }
        let mut xs: Vec<f64> = window.iter().map(|f| f.cornea.x).collect();
        let mut ys: Vec<f64> = window.iter().map(|f| f.cornea.y).collect();
        let mut zs: Vec<f64> = window.iter().map(|f| f.cornea.z).collect();
        pairs.push(CalibrationPair {
            cornea: Vector3::new(median(&mut xs), median(&mut ys), median(&mut zs)),
            gaze: *target,
        });
    }
    Ok(pairs)
}

/// Tensor-product basis over (u, v) = (cornea.x, cornea.y):
/// {1, u, v, u², uv, v², u²v, uv², u²v²}.
pub fn biquadratic_basis(u: f64, v: f64) -> [f64; 9] {
    [
        1.0,
        u,
        v,
        u * u,
        u * v,
        v * v,
        u * u * v,
        u * v * v,
        u * u * v * v,
    ]
}

/// Per-output coefficients over [`biquadratic_basis`]. Corneal z is excluded:
/// it is near-constant in this capture geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiquadraticMap {
    pub coeffs_x: [f64; 9],
    pub coeffs_y: [f64; 9],
}

/// Least-squares bi-quadratic fit of screen gaze against corneal (x, y).
pub fn fit_biquadratic(pairs: &[CalibrationPair]) -> Result<BiquadraticMap, BaselineError> {
    let n = pairs.len();
    let mut design = DMatrix::zeros(n, 9);
    for (i, p) in pairs.iter().enumerate() {
        let basis = biquadratic_basis(p.cornea.x, p.cornea.y);
        for (j, b) in basis.iter().enumerate() {
            design[(i, j)] = *b;
        }
    }
    let svd = design.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > max_sv * RANK_TOL)
        .count();
    if rank < 9 {
        return Err(BaselineError::RankDeficient { rank });
    }
    let bx = DVector::from_fn(n, |i, _| pairs[i].gaze.x);
    let by = DVector::from_fn(n, |i, _| pairs[i].gaze.y);
    let cx = svd.solve(&bx, max_sv * RANK_TOL).expect("svd solve");
    let cy = svd.solve(&by, max_sv * RANK_TOL).expect("svd solve");
    let mut coeffs_x = [0.0; 9];
    let mut coeffs_y = [0.0; 9];
    for j in 0..9 {
        coeffs_x[j] = cx[j];
        coeffs_y[j] = cy[j];
    }
    Ok(BiquadraticMap { coeffs_x, coeffs_y })
}

pub fn eval_biquadratic(map: &BiquadraticMap, cornea: &Vector3<f64>) -> ScreenPoint {
    let basis = biquadratic_basis(cornea.x, cornea.y);
    let mut x = 0.0;
    let mut y = 0.0;
    for j in 0..9 {
        x += map.coeffs_x[j] * basis[j];
        y += map.coeffs_y[j] * basis[j];
    }
    ScreenPoint::new(x, y)
}

/// Fits the standardized 3D-input GPR baseline on calibration pairs.
pub fn fit_baseline_gpr(
    pairs: &[CalibrationPair],
    hyper: GprHyperparams,
) -> Result<GprModel, BaselineError> {
    let inputs: Vec<DVector<f64>> = pairs
        .iter()
        .map(|p| DVector::from_column_slice(&[p.cornea.x, p.cornea.y, p.cornea.z]))
        .collect();
    let outputs: Vec<ScreenPoint> = pairs.iter().map(|p| p.gaze).collect();
    Ok(GprModel::fit(hyper, &inputs, &outputs, true)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    /// A synthetic forward gaze map (cornea -> screen), exactly bi-quadratic,
    /// with mild curvature and the camera's horizontal mirror.
    fn toy_map() -> BiquadraticMap {
        BiquadraticMap {
            coeffs_x: [250.0, -95.0, 3.0, 1.5, -2.0, 0.8, 0.4, -0.2, 0.1],
            coeffs_y: [140.0, 2.5, 48.0, 0.9, 1.2, -1.1, 0.3, 0.15, -0.05],
        }
    }

    fn toy_cornea(i: usize) -> Vector3<f64> {
        // Irregular spread across the capture range.
        let u = -2.3 + 4.4 * ((i * 7 % 11) as f64 / 10.0);
        let v = -2.2 + 5.4 * ((i * 5 % 13) as f64 / 12.0);
        Vector3::new(u, v, 100.0 + 0.3 * u.abs())
    }

    fn toy_pairs(n: usize) -> Vec<CalibrationPair> {
        let map = toy_map();
        (0..n)
            .map(|i| {
                let cornea = toy_cornea(i);
                CalibrationPair {
                    cornea,
                    gaze: eval_biquadratic(&map, &cornea),
                }
            })
            .collect()
    }

    fn fixation_frames(
        targets: &[ScreenPoint],
        cornea_of: impl Fn(&ScreenPoint) -> Vector3<f64>,
        frames_per_target: usize,
    ) -> Vec<FrameRecord> {
        let mut out = Vec::new();
        let mut frame = 0u64;
        for (k, target) in targets.iter().enumerate() {
            for _ in 0..frames_per_target {
                out.push(FrameRecord {
                    frame,
                    t: frame as f64 / 100.0,
                    cornea: cornea_of(target),
                    objects: vec![(k as u32, *target)],
                    true_gaze: *target,
                    followed: Some(k as u32),
                });
                frame += 1;
            }
        }
        out
    }

    #[test]
    fn collect_pairs_noiseless_recovers_ground_truth() {
        let targets = nine_point_targets(500.0, 300.0);
        let frames = fixation_frames(
            &targets,
            |t| Vector3::new(t.x / 100.0 - 2.5, t.y / 100.0 - 1.0, 101.0),
            100,
        );
        let pairs = collect_pairs(&frames, &targets, 1.0, 100.0).unwrap();
        assert_eq!(pairs.len(), 9);
        for (p, t) in pairs.iter().zip(&targets) {
            assert!((p.cornea.x - (t.x / 100.0 - 2.5)).abs() < 1e-12);
            assert_eq!(p.gaze, *t);
        }
    }

    #[test]
    fn collect_pairs_missing_target_errors() {
        let targets = nine_point_targets(500.0, 300.0);
        let frames = fixation_frames(&targets[..8], |_| Vector3::zeros(), 100);
        match collect_pairs(&frames, &targets, 1.0, 100.0) {
            Err(BaselineError::MissingTarget { index, .. }) => assert_eq!(index, 8),
            other => panic!("expected MissingTarget, got {other:?}"),
        }
    }

    #[test]
    fn collect_pairs_median_concentrates_under_noise() {
        // Monte-Carlo: with sigma = 0.02 mm over 100 frames, the per-axis
        // median lands within 0.01 mm of truth in nearly every trial.
        let mut rng = StdRng::seed_from_u64(99);
        let noise = Normal::new(0.0, 0.02).unwrap();
        let target = ScreenPoint::new(250.0, 150.0);
        let truth = Vector3::new(0.5, -0.25, 101.0);
        let mut hits = 0;
        let trials = 1000;
        for _ in 0..trials {
            let frames = fixation_frames(std::slice::from_ref(&target), |_| truth, 100)
                .into_iter()
                .map(|mut f| {
                    f.cornea += Vector3::new(
                        noise.sample(&mut rng),
                        noise.sample(&mut rng),
                        noise.sample(&mut rng),
                    );
                    f
                })
                .collect::<Vec<_>>();
            let pairs = collect_pairs(&frames, &[target], 1.0, 100.0).unwrap();
            let err = (pairs[0].cornea - truth).abs();
            if err.x < 0.01 && err.y < 0.01 && err.z < 0.01 {
                hits += 1;
            }
        }
        assert!(hits >= 990, "median concentrated in only {hits}/{trials}");
    }

    #[test]
    fn fit_recovers_exact_biquadratic_coefficients() {
        let truth = toy_map();
        let pairs = toy_pairs(12);
        let fitted = fit_biquadratic(&pairs).unwrap();
        for j in 0..9 {
            assert!(
                (fitted.coeffs_x[j] - truth.coeffs_x[j]).abs() < 1e-8,
                "coeff x[{j}]"
            );
            assert!(
                (fitted.coeffs_y[j] - truth.coeffs_y[j]).abs() < 1e-8,
                "coeff y[{j}]"
            );
        }
        for p in &pairs {
            assert!(eval_biquadratic(&fitted, &p.cornea).dist(&p.gaze) < 1e-8);
        }
    }

    #[test]
    fn collinear_points_are_rank_deficient() {
        let pairs: Vec<CalibrationPair> = (0..9)
            .map(|i| CalibrationPair {
                cornea: Vector3::new(i as f64 * 0.5 - 2.0, 0.3, 101.0),
                gaze: ScreenPoint::new(i as f64 * 50.0, 150.0),
            })
            .collect();
        assert!(matches!(
            fit_biquadratic(&pairs),
            Err(BaselineError::RankDeficient { .. })
        ));
    }

    #[test]
    fn fit_matches_normal_equations_oracle_under_noise() {
        let mut rng = StdRng::seed_from_u64(7);
        let noise = Normal::new(0.0, 0.02).unwrap();
        let truth = toy_map();
        let targets = nine_point_targets(500.0, 300.0);
        // Invert the toy map's affine part to spread corneas over a grid.
        let pairs: Vec<CalibrationPair> = targets
            .iter()
            .map(|t| {
                let u = (250.0 - t.x) / 95.0 + noise.sample(&mut rng);
                let v = (t.y - 140.0) / 48.0 + noise.sample(&mut rng);
                let cornea = Vector3::new(u, v, 101.0);
                CalibrationPair {
                    cornea,
                    gaze: eval_biquadratic(&truth, &cornea),
                }
            })
            .collect();

        let fitted = fit_biquadratic(&pairs).unwrap();

        // Independent oracle: solve the normal equations directly.
        let n = pairs.len();
        let mut a = DMatrix::zeros(n, 9);
        for (i, p) in pairs.iter().enumerate() {
            let b = biquadratic_basis(p.cornea.x, p.cornea.y);
            for j in 0..9 {
                a[(i, j)] = b[j];
            }
        }
        let ata = a.transpose() * &a;
        let atb_x = a.transpose() * DVector::from_fn(n, |i, _| pairs[i].gaze.x);
        let oracle_x = ata.lu().solve(&atb_x).unwrap();
        for j in 0..9 {
            assert!(
                (fitted.coeffs_x[j] - oracle_x[j]).abs() < 1e-6 * (1.0 + oracle_x[j].abs()),
                "coeff {j}: {} vs oracle {}",
                fitted.coeffs_x[j],
                oracle_x[j]
            );
        }
        // Data was generated exactly from the basis family, so residuals
        // vanish regardless of the input perturbation.
        for p in &pairs {
            assert!(eval_biquadratic(&fitted, &p.cornea).dist(&p.gaze) < 1e-7);
        }
    }

    #[test]
    fn eval_zero_and_constant_coefficients() {
        let zero = BiquadraticMap {
            coeffs_x: [0.0; 9],
            coeffs_y: [0.0; 9],
        };
        let c = Vector3::new(1.0, -2.0, 100.0);
        assert_eq!(eval_biquadratic(&zero, &c), ScreenPoint::new(0.0, 0.0));

        let mut constant = zero.clone();
        constant.coeffs_x[0] = 1.0;
        constant.coeffs_y[0] = 1.0;
        assert_eq!(eval_biquadratic(&constant, &c), ScreenPoint::new(1.0, 1.0));
    }

    #[test]
    fn eval_is_affine_in_coefficients() {
        let a = toy_map();
        let mut b = toy_map();
        for j in 0..9 {
            b.coeffs_x[j] = 0.5 * j as f64 - 1.0;
            b.coeffs_y[j] = 0.25 * j as f64;
        }
        let mut sum = a.clone();
        for j in 0..9 {
            sum.coeffs_x[j] += b.coeffs_x[j];
            sum.coeffs_y[j] += b.coeffs_y[j];
        }
        let c = Vector3::new(0.7, -1.3, 101.0);
        let pa = eval_biquadratic(&a, &c);
        let pb = eval_biquadratic(&b, &c);
        let ps = eval_biquadratic(&sum, &c);
        assert!((ps.x - (pa.x + pb.x)).abs() < 1e-10);
        assert!((ps.y - (pa.y + pb.y)).abs() < 1e-10);
    }

    #[test]
    fn baseline_gpr_reproduces_noiseless_targets() {
        // Corneas on the calibration grid geometry.
        let map = toy_map();
        let pairs: Vec<CalibrationPair> = [-1.8f64, 0.0, 1.8]
            .iter()
            .flat_map(|&u| [-2.0f64, 0.5, 3.0].map(|v| (u, v)))
            .map(|(u, v)| {
                let cornea = Vector3::new(u, v, 100.0 + 0.3 * u.abs());
                CalibrationPair {
                    cornea,
                    gaze: eval_biquadratic(&map, &cornea),
                }
            })
            .collect();
        let model = fit_baseline_gpr(&pairs, GprHyperparams::standardized_default()).unwrap();
        for p in &pairs {
            let x = DVector::from_column_slice(&[p.cornea.x, p.cornea.y, p.cornea.z]);
            let pred = model.predict(&x).unwrap();
            assert!(
                pred.point.dist(&p.gaze) < 0.1,
                "residual {:.4} px at ({:.0}, {:.0})",
                pred.point.dist(&p.gaze),
                p.gaze.x,
                p.gaze.y
            );
        }
    }

    #[test]
    fn baseline_gpr_single_pair_reverts_to_label() {
        let pair = CalibrationPair {
            cornea: Vector3::new(0.5, 0.5, 101.0),
            gaze: ScreenPoint::new(123.0, 45.0),
        };
        let model = fit_baseline_gpr(&[pair], GprHyperparams::standardized_default()).unwrap();
        let at_pair = model
            .predict(&DVector::from_column_slice(&[0.5, 0.5, 101.0]))
            .unwrap();
        assert!(at_pair.point.dist(&pair.gaze) < 0.5);
        let far = model
            .predict(&DVector::from_column_slice(&[5000.0, 5000.0, 101.0]))
            .unwrap();
        // With one label, the output mean is the label itself.
        assert!(far.point.dist(&pair.gaze) < 1e-9);
    }

    #[test]
    fn range_warnings_flag_out_of_range_pairs() {
        let good = CalibrationPair {
            cornea: Vector3::new(0.0, 0.0, 101.0),
            gaze: ScreenPoint::new(250.0, 150.0),
        };
        let bad = CalibrationPair {
            cornea: Vector3::new(9.0, 0.0, 101.0),
            gaze: ScreenPoint::new(250.0, 150.0),
        };
        assert!(range_warnings(&[good]).is_empty());
        assert_eq!(range_warnings(&[good, bad]).len(), 1);
    }

    #[test]
    fn target_grids_have_expected_layout() {
        let nine = nine_point_targets(500.0, 300.0);
        assert_eq!(nine.len(), 9);
        assert_eq!(nine[0], ScreenPoint::new(50.0, 30.0));
        assert_eq!(nine[8], ScreenPoint::new(450.0, 270.0));
        let thirteen = thirteen_point_targets(500.0, 300.0);
        assert_eq!(thirteen.len(), 13);
        assert_eq!(thirteen[9], ScreenPoint::new(150.0, 90.0));
    }
}
