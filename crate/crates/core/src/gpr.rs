//! Gaussian process regression primitives.
//!
//! A [`GprModel`] regresses d-dimensional inputs onto 2D screen targets with a
//! squared-exponential kernel that folds observation noise into the
//! covariance. The model maintains its covariance matrix and that matrix's
//! inverse; observations are appended with a bordered-block inverse update so
//! online growth never re-factorizes from scratch (a full refresh runs every
//! [`REFRESH_INTERVAL`] updates to bound drift).

use nalgebra::{Cholesky, DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::ScreenPoint;

/// Floor on the bordered-update Schur complement; at or below this the new
/// row is linearly dependent on the existing ones.
pub const EPS_PD: f64 = 1e-10;

/// Standard deviations below this are treated as degenerate and clamped.
pub const EPS_STD: f64 = 1e-9;

/// Full inverse re-factorization cadence, in incremental updates.
pub const REFRESH_INTERVAL: usize = 64;

#[derive(Debug, Error)]
pub enum GprError {
    #[error("model has no training pairs")]
    EmptyModel,
    #[error("bordered update is singular (schur complement {0:.3e})")]
    SingularUpdate(f64),
    #[error("no block at index {0} (composite holds {1})")]
    NoSuchBlock(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,
}

/// Kernel hyperparameters: maximum allowable covariance, noise variance, and
/// length scale, all in the units of the data the model is fit on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GprHyperparams {
    pub sigma_f_sq: f64,
    pub sigma_n_sq: f64,
    pub kernel_width: f64,
}

impl GprHyperparams {
    pub fn new(sigma_f_sq: f64, sigma_n_sq: f64, kernel_width: f64) -> Result<Self, GprError> {
        if !(sigma_f_sq > 0.0) {
            return Err(GprError::InvalidHyperparams(format!(
                "sigma_f_sq must be positive, got {sigma_f_sq}"
            )));
        }
        if !(sigma_n_sq >= 0.0) {
            return Err(GprError::InvalidHyperparams(format!(
                "sigma_n_sq must be non-negative, got {sigma_n_sq}"
            )));
        }
        if !(kernel_width > 0.0) {
            return Err(GprError::InvalidHyperparams(format!(
                "kernel_width must be positive, got {kernel_width}"
            )));
        }
        Ok(Self {
            sigma_f_sq,
            sigma_n_sq,
            kernel_width,
        })
    }

    /// Defaults for models fit on mean-centered unit-variance data
    /// (explicit-calibration baseline and the global model).
    pub fn standardized_default() -> Self {
        Self {
            sigma_f_sq: 1.2,
            sigma_n_sq: 1e-6,
            kernel_width: 5.0,
        }
    }

    /// Defaults for the online global model. Pursuit-derived labels carry a
    /// few pixels of lag bias and noise, so the global model assumes more
    /// observation noise than the fixation-calibrated baseline.
    pub fn global_default() -> Self {
        Self {
            sigma_f_sq: 1.2,
            sigma_n_sq: 1e-3,
            kernel_width: 5.0,
        }
    }

    /// Defaults for local tracklet models, which run on raw units
    /// (millimeter inputs, pixel outputs).
    pub fn local_default() -> Self {
        Self {
            sigma_f_sq: 150.0 * 150.0,
            sigma_n_sq: 5.0 * 5.0,
            kernel_width: 1.0,
        }
    }
}

/// Squared-exponential covariance with noise folded in. The Kronecker delta
/// fires on training-point identity (`same_point`), not on coordinate
/// coincidence, so duplicate fixation samples stay valid whenever
/// `sigma_n_sq > 0`.
pub fn kernel_eval(
    a: &DVector<f64>,
    b: &DVector<f64>,
    same_point: bool,
    hyper: &GprHyperparams,
) -> f64 {
    let d_sq = (a - b).norm_squared();
    let l = hyper.kernel_width;
    let mut k = hyper.sigma_f_sq * (-d_sq / (2.0 * l * l)).exp();
    if same_point {
        k += hyper.sigma_n_sq;
    }
    k
}

/// Covariance between all pairs of training points. The diagonal carries the
/// noise term.
pub fn build_covariance(points: &[DVector<f64>], hyper: &GprHyperparams) -> DMatrix<f64> {
    let n = points.len();
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let k = kernel_eval(&points[i], &points[j], i == j, hyper);
            cov[(i, j)] = k;
            cov[(j, i)] = k;
        }
    }
    cov
}

/// Per-dimension offset and scale for mean-centered unit-variance data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Standardizer {
    /// Fits per-dimension mean and standard deviation. Dimensions with
    /// standard deviation below [`EPS_STD`] get scale 1.
    pub fn fit(data: &[DVector<f64>]) -> Result<Self, GprError> {
        if data.len() < 2 {
            return Err(GprError::InsufficientData {
                needed: 2,
                got: data.len(),
            });
        }
        let dim = data[0].len();
        let n = data.len() as f64;
        let mut mean = DVector::zeros(dim);
        for v in data {
            mean += v;
        }
        mean /= n;
        let mut var = DVector::zeros(dim);
        for v in data {
            let d = v - &mean;
            var += d.component_mul(&d);
        }
        var /= n;
        let scale = var.map(|s: f64| {
            let sd = s.sqrt();
            if sd < EPS_STD {
                1.0
            } else {
                sd
            }
        });
        Ok(Self { mean, scale })
    }

    /// A degenerate standardizer that only re-centers on a single sample.
    pub fn centered_on(sample: &DVector<f64>) -> Self {
        Self {
            mean: sample.clone(),
            scale: DVector::from_element(sample.len(), 1.0),
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        (v - &self.mean).component_div(&self.scale)
    }

    pub fn invert(&self, v: &DVector<f64>) -> DVector<f64> {
        v.component_mul(&self.scale) + &self.mean
    }
}

/// A mean prediction with its per-dimension predictive variance (both in the
/// caller's raw units).
#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    pub point: ScreenPoint,
    pub variance: [f64; 2],
}

impl Prediction {
    pub fn compensated_variance(&self) -> f64 {
        0.5 * (self.variance[0] + self.variance[1])
    }
}

/// A Gaussian process regression model over d-dimensional inputs and 2D
/// outputs.
///
/// When standardizers are present, training data is held in standardized
/// (model) space; inputs are standardized on the way in and predictions are
/// de-standardized on the way out. Local tracklet models carry no
/// standardizers and run on raw units.
#[derive(Debug, Clone)]
pub struct GprModel {
    inputs: Vec<DVector<f64>>,
    outputs: Vec<Vector2<f64>>,
    hyper: GprHyperparams,
    input_standardizer: Option<Standardizer>,
    output_standardizer: Option<Standardizer>,
    cov: DMatrix<f64>,
    cov_inv: DMatrix<f64>,
    updates_since_refresh: usize,
}

impl GprModel {
    /// An empty model in raw units.
    pub fn new(hyper: GprHyperparams) -> Self {
        Self {
            inputs: Vec::new(),
            outputs: Vec::new(),
            hyper,
            input_standardizer: None,
            output_standardizer: None,
            cov: DMatrix::zeros(0, 0),
            cov_inv: DMatrix::zeros(0, 0),
            updates_since_refresh: 0,
        }
    }

    /// Batch-fits a model. With `standardize`, input and output standardizers
    /// are fit on the given data first (a single pair degenerates to
    /// re-centering only).
    pub fn fit(
        hyper: GprHyperparams,
        inputs: &[DVector<f64>],
        outputs: &[ScreenPoint],
        standardize: bool,
    ) -> Result<Self, GprError> {
        if inputs.is_empty() {
            return Err(GprError::EmptyModel);
        }
        assert_eq!(inputs.len(), outputs.len(), "input/output length mismatch");
        let out_vecs: Vec<DVector<f64>> = outputs
            .iter()
            .map(|p| DVector::from_column_slice(&[p.x, p.y]))
            .collect();
        let (std_in, std_out) = if standardize {
            if inputs.len() == 1 {
                (
                    Some(Standardizer::centered_on(&inputs[0])),
                    Some(Standardizer::centered_on(&out_vecs[0])),
                )
            } else {
                (
                    Some(Standardizer::fit(inputs)?),
                    Some(Standardizer::fit(&out_vecs)?),
                )
            }
        } else {
            (None, None)
        };

        let model_inputs: Vec<DVector<f64>> = match &std_in {
            Some(s) => inputs.iter().map(|v| s.apply(v)).collect(),
            None => inputs.to_vec(),
        };
        let model_outputs: Vec<Vector2<f64>> = match &std_out {
            Some(s) => out_vecs
                .iter()
                .map(|v| {
                    let sv = s.apply(v);
                    Vector2::new(sv[0], sv[1])
                })
                .collect(),
            None => out_vecs.iter().map(|v| Vector2::new(v[0], v[1])).collect(),
        };

        let cov = build_covariance(&model_inputs, &hyper);
        let chol = Cholesky::new(cov.clone()).ok_or(GprError::NotPositiveDefinite)?;
        let cov_inv = chol.inverse();
        Ok(Self {
            inputs: model_inputs,
            outputs: model_outputs,
            hyper,
            input_standardizer: std_in,
            output_standardizer: std_out,
            cov,
            cov_inv,
            updates_since_refresh: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn hyper(&self) -> &GprHyperparams {
        &self.hyper
    }

    pub fn input_standardizer(&self) -> Option<&Standardizer> {
        self.input_standardizer.as_ref()
    }

    pub fn output_standardizer(&self) -> Option<&Standardizer> {
        self.output_standardizer.as_ref()
    }

    /// Training pairs in raw (de-standardized) units.
    pub fn raw_pairs(&self) -> Vec<(DVector<f64>, ScreenPoint)> {
        self.inputs
            .iter()
            .zip(&self.outputs)
            .map(|(x, y)| {
                let xr = match &self.input_standardizer {
                    Some(s) => s.invert(x),
                    None => x.clone(),
                };
                let yv = DVector::from_column_slice(&[y[0], y[1]]);
                let yr = match &self.output_standardizer {
                    Some(s) => s.invert(&yv),
                    None => yv,
                };
                (xr, ScreenPoint::new(yr[0], yr[1]))
            })
            .collect()
    }

    /// Appends one observation, growing the covariance by a bordered
    /// row/column and updating the maintained inverse with the block-bordering
    /// identity. Fails with [`GprError::SingularUpdate`] when the Schur
    /// complement falls to [`EPS_PD`] (a duplicate point with zero noise); the
    /// model is untouched on failure.
    pub fn add_observation(&mut self, x: &DVector<f64>, y: ScreenPoint) -> Result<(), GprError> {
        let xs = match &self.input_standardizer {
            Some(s) => s.apply(x),
            None => x.clone(),
        };
        let yv = DVector::from_column_slice(&[y.x, y.y]);
        let ys = match &self.output_standardizer {
            Some(s) => {
                let v = s.apply(&yv);
                Vector2::new(v[0], v[1])
            }
            None => Vector2::new(yv[0], yv[1]),
        };

        let n = self.inputs.len();
        let k_self = self.hyper.sigma_f_sq + self.hyper.sigma_n_sq;
        if n == 0 {
            self.cov = DMatrix::from_element(1, 1, k_self);
            self.cov_inv = DMatrix::from_element(1, 1, 1.0 / k_self);
            self.inputs.push(xs);
            self.outputs.push(ys);
            return Ok(());
        }

        let b = DVector::from_fn(n, |i, _| kernel_eval(&self.inputs[i], &xs, false, &self.hyper));
        let e = &self.cov_inv * &b;
        let schur = k_self - b.dot(&e);
        if schur <= EPS_PD {
            return Err(GprError::SingularUpdate(schur));
        }

        let mut cov = DMatrix::zeros(n + 1, n + 1);
        cov.view_mut((0, 0), (n, n)).copy_from(&self.cov);
        for i in 0..n {
            cov[(i, n)] = b[i];
            cov[(n, i)] = b[i];
        }
        cov[(n, n)] = k_self;

        let mut inv = DMatrix::zeros(n + 1, n + 1);
        {
            let mut top = inv.view_mut((0, 0), (n, n));
            top.copy_from(&self.cov_inv);
            // A⁻¹ + e eᵀ / s
            top.ger(1.0 / schur, &e, &e, 1.0);
        }
        for i in 0..n {
            inv[(i, n)] = -e[i] / schur;
            inv[(n, i)] = -e[i] / schur;
        }
        inv[(n, n)] = 1.0 / schur;

        self.cov = cov;
        self.cov_inv = inv;
        self.inputs.push(xs);
        self.outputs.push(ys);
        self.updates_since_refresh += 1;
        if self.updates_since_refresh >= REFRESH_INTERVAL {
            self.refresh_inverse()?;
        }
        Ok(())
    }

    /// Re-factorizes the covariance and recomputes its inverse from scratch.
    pub fn refresh_inverse(&mut self) -> Result<(), GprError> {
        let chol = Cholesky::new(self.cov.clone()).ok_or(GprError::NotPositiveDefinite)?;
        self.cov_inv = chol.inverse();
        self.updates_since_refresh = 0;
        Ok(())
    }

    /// Posterior mean and variance at `x`. The variance is shared across
    /// output dimensions in model space and scaled per dimension on
    /// de-standardization.
    pub fn predict(&self, x: &DVector<f64>) -> Result<Prediction, GprError> {
        let n = self.inputs.len();
        if n == 0 {
            return Err(GprError::EmptyModel);
        }
        let xs = match &self.input_standardizer {
            Some(s) => s.apply(x),
            None => x.clone(),
        };
        let k_star =
            DVector::from_fn(n, |i, _| kernel_eval(&self.inputs[i], &xs, false, &self.hyper));
        let w = &self.cov_inv * &k_star;
        let k_ss = self.hyper.sigma_f_sq + self.hyper.sigma_n_sq;
        let var_model = (k_ss - k_star.dot(&w)).max(0.0);

        let mut mean = Vector2::zeros();
        for (wi, yi) in w.iter().zip(&self.outputs) {
            mean += *wi * yi;
        }

        match &self.output_standardizer {
            Some(s) => {
                let m = s.invert(&DVector::from_column_slice(&[mean[0], mean[1]]));
                Ok(Prediction {
                    point: ScreenPoint::new(m[0], m[1]),
                    variance: [
                        var_model * s.scale[0] * s.scale[0],
                        var_model * s.scale[1] * s.scale[1],
                    ],
                })
            }
            None => Ok(Prediction {
                point: ScreenPoint::new(mean[0], mean[1]),
                variance: [var_model, var_model],
            }),
        }
    }

    /// Max-abs residual of `cov · cov_inv − I`; diagnostic for tests.
    pub fn inverse_residual(&self) -> f64 {
        let n = self.inputs.len();
        if n == 0 {
            return 0.0;
        }
        let prod = &self.cov * &self.cov_inv;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((prod[(i, j)] - target).abs());
            }
        }
        worst
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

/// Independent GPR blocks forming a block-diagonal system covariance.
///
/// Cross-block kernel entries are never computed; removal of a block is exact
/// deletion with no inverse correction on the survivors.
#[derive(Debug, Clone, Default)]
pub struct BlockDiagonalModel {
    blocks: Vec<GprModel>,
}

impl BlockDiagonalModel {
    pub fn new() -> Self {
        Self { blocks: Vec::new() }
    }

    pub fn push_block(&mut self, model: GprModel) {
        self.blocks.push(model);
    }

    pub fn remove_block(&mut self, index: usize) -> Result<GprModel, GprError> {
        if index >= self.blocks.len() {
            return Err(GprError::NoSuchBlock(index, self.blocks.len()));
        }
        Ok(self.blocks.remove(index))
    }

    pub fn blocks(&self) -> &[GprModel] {
        &self.blocks
    }

    pub fn block_mut(&mut self, index: usize) -> Option<&mut GprModel> {
        self.blocks.get_mut(index)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}
