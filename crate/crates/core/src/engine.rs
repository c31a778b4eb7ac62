//! The online auto-calibration controller.
//!
//! The engine consumes synchronized frames (corneal sample plus visible
//! screen objects) and maintains two model families:
//!
//! * a ring of at most `m` local GPR models, one per matched tracklet, whose
//!   covariances form a block-diagonal system matrix (blocks never interact);
//! * a global GPR model fit on space-diverse pairs retained by a 6×4 screen
//!   grid sampler (at most 4 pairs per cell, so the global covariance stays
//!   within 96×96).
//!
//! Every frame the current tracklet is extended with a validity-gated pair,
//! the best local and global predictions are compared on compensated
//! variance, and a persistent confidence collapse of the global model
//! relative to the locals disposes it for rebuilding from scratch.

use std::collections::VecDeque;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::CalibrationPair;
use crate::gpr::{BlockDiagonalModel, GprError, GprHyperparams, GprModel, Prediction};
use crate::tracklet::{self, CandidateTrajectory, NormalizationMode, Tracklet};
use crate::types::{CornealSample, GazePrediction, PredictionSource, ScreenPoint};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("no local models in the buffer")]
    EmptyBuffer,
    #[error("sampler has {pairs} pairs over {cells} cells; need >= 4 pairs over >= 2 cells")]
    InsufficientDiversity { pairs: usize, cells: usize },
    #[error(transparent)]
    Gpr(#[from] GprError),
}

/// All engine tunables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineParams {
    /// Samples required before an initialization match is attempted.
    pub n_min: usize,
    /// Pair count at which a tracklet completes and the buffer rotates.
    pub n_max: usize,
    /// Local-model ring capacity (m).
    pub buffer_capacity: usize,
    /// Similarity threshold for initialization matching.
    pub tau_match: f64,
    /// Prediction-distance gate for guided matching, px.
    pub tau_px: f64,
    /// Confidence-ratio threshold for disposal bookkeeping.
    pub rho: f64,
    /// Consecutive unhealthy frames before the global model is disposed (W).
    pub disposal_window: usize,
    /// Consecutive guided rejections that close the current tracklet.
    pub reject_limit: usize,
    pub grid_cols: usize,
    pub grid_rows: usize,
    /// Retained pairs per grid cell.
    pub cell_capacity: usize,
    /// Occupied-cell floor before a (re)built global model is accepted;
    /// prevents overconfident patch models right after disposal.
    pub min_rebuild_cells: usize,
    /// Pair count below which the global model is considered immature and
    /// exempt from residual-route disposal (it is still being rebuilt from
    /// fresh coverage anyway).
    pub disposal_min_global_pairs: usize,
    /// Occupied-cell floor for residual-route disposal. Until coverage is
    /// broad, large residuals in freshly visited regions are expected
    /// extrapolation error, not slippage.
    pub disposal_min_global_cells: usize,
    pub screen_w: f64,
    pub screen_h: f64,
    pub local_hyper: GprHyperparams,
    pub global_hyper: GprHyperparams,
    pub normalization: NormalizationMode,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            n_min: 40,
            n_max: 50,
            buffer_capacity: 10,
            tau_match: 0.6,
            tau_px: 40.0,
            rho: 2.0,
            disposal_window: 10,
            reject_limit: 10,
            grid_cols: 6,
            grid_rows: 4,
            cell_capacity: 4,
            min_rebuild_cells: 6,
            disposal_min_global_pairs: 48,
            disposal_min_global_cells: 18,
            screen_w: 500.0,
            screen_h: 300.0,
            local_hyper: GprHyperparams::local_default(),
            global_hyper: GprHyperparams::global_default(),
            normalization: NormalizationMode::UnitL2,
        }
    }
}

impl EngineParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(8..=15).contains(&self.buffer_capacity) {
            return Err(format!(
                "buffer_capacity {} outside [8, 15]",
                self.buffer_capacity
            ));
        }
        if self.n_min < 2 || self.n_max < self.n_min {
            return Err(format!(
                "tracklet bounds n_min={} n_max={} invalid",
                self.n_min, self.n_max
            ));
        }
        if self.grid_cols == 0 || self.grid_rows == 0 || self.cell_capacity == 0 {
            return Err("grid dimensions and cell capacity must be positive".into());
        }
        if self.tau_px <= 0.0 || self.rho <= 0.0 {
            return Err("tau_px and rho must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tau_match) {
            return Err(format!("tau_match {} outside (0, 1]", self.tau_match));
        }
        if self.disposal_window == 0 || self.reject_limit == 0 {
            return Err("disposal_window and reject_limit must be positive".into());
        }
        if self.screen_w <= 0.0 || self.screen_h <= 0.0 {
            return Err("screen dimensions must be positive".into());
        }
        Ok(())
    }
}

/// A pair retained by the grid sampler, scored by the predictive variance of
/// the local model that admitted it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetainedPair {
    pub pair: CalibrationPair,
    pub acquisition_variance: f64,
}

/// Screen-space grid retaining the best few pairs per cell.
///
/// "Best" means lowest acquisition variance: when a full cell is offered a
/// better pair, the retained pair with the highest variance makes room.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSampler {
    cols: usize,
    rows: usize,
    cell_capacity: usize,
    screen_w: f64,
    screen_h: f64,
    cells: Vec<Vec<RetainedPair>>,
    revision: u64,
}

impl GridSampler {
    pub fn new(cols: usize, rows: usize, cell_capacity: usize, screen_w: f64, screen_h: f64) -> Self {
        Self {
            cols,
            rows,
            cell_capacity,
            screen_w,
            screen_h,
            cells: vec![Vec::new(); cols * rows],
            revision: 0,
        }
    }

    /// Half-open cells; the final row/column is closed so boundary points on
    /// the far edges still land in the grid.
    fn cell_index(&self, gaze: &ScreenPoint) -> usize {
        let col = ((gaze.x / (self.screen_w / self.cols as f64)) as usize).min(self.cols - 1);
        let row = ((gaze.y / (self.screen_h / self.rows as f64)) as usize).min(self.rows - 1);
        row * self.cols + col
    }

    /// Offers a pair; out-of-screen pairs are dropped. Returns true when the
    /// sampler changed.
    pub fn insert(&mut self, pair: CalibrationPair, acquisition_variance: f64) -> bool {
        if !(0.0..=self.screen_w).contains(&pair.gaze.x)
            || !(0.0..=self.screen_h).contains(&pair.gaze.y)
        {
            return false;
        }
        let idx = self.cell_index(&pair.gaze);
        let cell = &mut self.cells[idx];
        let retained = RetainedPair {
            pair,
            acquisition_variance,
        };
        if cell.len() < self.cell_capacity {
            cell.push(retained);
            self.revision += 1;
            return true;
        }
        let (worst_idx, worst_var) = cell
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.acquisition_variance))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        if acquisition_variance < worst_var {
            cell[worst_idx] = retained;
            self.revision += 1;
            return true;
        }
        false
    }

    pub fn len(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn occupied_cells(&self) -> usize {
        self.cells.iter().filter(|c| !c.is_empty()).count()
    }

    /// Retained pairs in deterministic order (cells row-major, insertion
    /// order inside a cell).
    pub fn pairs(&self) -> impl Iterator<Item = &RetainedPair> {
        self.cells.iter().flatten()
    }

    pub fn clear(&mut self) {
        for c in &mut self.cells {
            c.clear();
        }
        self.revision += 1;
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }
}

/// Builds a standardized global model from all retained pairs.
pub fn rebuild_global(
    sampler: &GridSampler,
    hyper: GprHyperparams,
) -> Result<GprModel, EngineError> {
    let pairs: Vec<&RetainedPair> = sampler.pairs().collect();
    let cells = sampler.occupied_cells();
    if pairs.len() < 4 || cells < 2 {
        return Err(EngineError::InsufficientDiversity {
            pairs: pairs.len(),
            cells,
        });
    }
    let inputs: Vec<DVector<f64>> = pairs
        .iter()
        .map(|r| DVector::from_column_slice(&[r.pair.cornea.x, r.pair.cornea.y, r.pair.cornea.z]))
        .collect();
    let outputs: Vec<ScreenPoint> = pairs.iter().map(|r| r.pair.gaze).collect();
    Ok(GprModel::fit(hyper, &inputs, &outputs, true)?)
}

/// Ring of local models over a block-diagonal composite; index 0 is oldest.
#[derive(Debug, Clone, Default)]
pub struct LocalModelBuffer {
    composite: BlockDiagonalModel,
    created_frames: Vec<u64>,
    capacity: usize,
}

impl LocalModelBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            composite: BlockDiagonalModel::new(),
            created_frames: Vec::new(),
            capacity,
        }
    }

    /// Adds the newest model, evicting the oldest block when full. Returns
    /// the evicted model's creation frame, if any.
    pub fn push(&mut self, model: GprModel, created_frame: u64) -> Option<u64> {
        let mut evicted = None;
        if self.composite.len() == self.capacity {
            self.composite.remove_block(0).expect("nonempty ring");
            evicted = Some(self.created_frames.remove(0));
        }
        self.composite.push_block(model);
        self.created_frames.push(created_frame);
        evicted
    }

    pub fn len(&self) -> usize {
        self.composite.len()
    }

    pub fn is_empty(&self) -> bool {
        self.composite.is_empty()
    }

    pub fn models(&self) -> &[GprModel] {
        self.composite.blocks()
    }

    pub fn newest_mut(&mut self) -> Option<&mut GprModel> {
        let last = self.composite.len().checked_sub(1)?;
        self.composite.block_mut(last)
    }

    pub fn created_frames(&self) -> &[u64] {
        &self.created_frames
    }

    /// Prediction from the model with the lowest predictive variance at
    /// `x`; ties go to the most recent model.
    pub fn best_local(&self, x: &DVector<f64>) -> Result<(usize, Prediction), EngineError> {
        if self.is_empty() {
            return Err(EngineError::EmptyBuffer);
        }
        let mut best: Option<(usize, Prediction)> = None;
        for (i, model) in self.models().iter().enumerate() {
            let p = model.predict(x)?;
            let replace = match &best {
                Some((_, b)) => p.compensated_variance() <= b.compensated_variance(),
                None => true,
            };
            if replace {
                best = Some((i, p));
            }
        }
        Ok(best.expect("buffer nonempty"))
    }
}

/// Chooses between the best-local and global predictions on compensated
/// variance; exact ties go to the global model.
pub fn select_prediction(local: GazePrediction, global: GazePrediction) -> GazePrediction {
    if global.compensated_variance() <= local.compensated_variance() {
        global
    } else {
        local
    }
}

/// Residual evidence from the current frame's matched pair.
#[derive(Debug, Clone, Copy)]
pub struct Residuals {
    /// Squared distance, global prediction to matched screen point (px²).
    pub global_sq: f64,
    /// Squared distance, best-local prediction to matched point (px²).
    pub local_sq: f64,
}

/// Smoothing factor for the global model's residual baseline (~50-frame
/// memory at 100 Hz).
const RESIDUAL_EMA_ALPHA: f64 = 0.02;

/// Counts consecutive frames on which the global model looks significantly
/// less trustworthy than the locals, and signals disposal after a full
/// window of them.
///
/// Two routes mark a frame unhealthy:
///
/// * the confidence ratio `var_g > rho · var_l`;
/// * when a validity-gated pair is available, a *sudden* global residual —
///   one that exceeds `rho²` times the global model's own recent healthy
///   residual level while also exceeding `rho` times the local residual
///   scale.
///
/// GP predictive variance depends only on input geometry and cannot see a
/// slippage event, so the residual route is what ties disposal to actual
/// mapping shifts; the recent-baseline comparison keeps steady pursuit-label
/// bias (lag) from masquerading as one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisposalMonitor {
    rho: f64,
    window: usize,
    counter: usize,
    residual_baseline: Option<f64>,
}

impl DisposalMonitor {
    pub fn new(rho: f64, window: usize) -> Self {
        Self {
            rho,
            window,
            counter: 0,
            residual_baseline: None,
        }
    }

    pub fn counter(&self) -> usize {
        self.counter
    }

    pub fn reset(&mut self) {
        self.counter = 0;
    }

    /// Full reset including the learned residual baseline (used on
    /// disposal).
    pub fn reset_baseline(&mut self) {
        self.counter = 0;
        self.residual_baseline = None;
    }

    /// Feeds one frame of evidence; returns true when the global model
    /// should be disposed.
    pub fn observe(&mut self, var_g: f64, var_l: f64, residuals: Option<Residuals>) -> bool {
        let variance_collapse = var_g > self.rho * var_l;
        let residual_collapse = residuals
            .map(|r| {
                let vs_local = r.global_sq > self.rho * (var_l + r.local_sq);
                let sudden = match self.residual_baseline {
                    Some(b) => r.global_sq > self.rho * self.rho * b.max(1e-12),
                    None => false,
                };
                vs_local && sudden
            })
            .unwrap_or(false);
        if variance_collapse || residual_collapse {
            self.counter += 1;
            if self.counter >= self.window {
                self.counter = 0;
                return true;
            }
        } else {
            self.counter = 0;
            // Track the healthy residual level only; a collapse in progress
            // must not drag the baseline up.
            if let Some(r) = residuals {
                self.residual_baseline = Some(match self.residual_baseline {
                    Some(b) => (1.0 - RESIDUAL_EMA_ALPHA) * b + RESIDUAL_EMA_ALPHA * r.global_sq,
                    None => r.global_sq,
                });
            }
        }
        false
    }
}

/// Engine lifecycle events worth logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EngineEvent {
    GlobalDisposed {
        frame: u64,
        t: f64,
    },
    GlobalRebuilt {
        frame: u64,
        t: f64,
        pairs: usize,
        cells: usize,
    },
    TrackletOpened {
        frame: u64,
        t: f64,
        object_id: u32,
        seeded_by_match: bool,
    },
}

#[derive(Debug, Clone)]
struct PendingFrame {
    t: f64,
    cornea: Vector3<f64>,
    objects: Vec<(u32, ScreenPoint)>,
    /// Gaze prediction at push time; models only change while the pending
    /// window is empty (tracklet lifecycle) or on disposal, which refreshes
    /// the cache.
    predicted: Option<ScreenPoint>,
}

#[derive(Debug, Clone, Copy)]
struct ActiveTracklet {
    reject_streak: usize,
}

struct PredictOutcome {
    selected: GazePrediction,
    local: Option<(usize, Prediction)>,
    global: Option<Prediction>,
}

/// The online auto-calibration engine. Single-writer: `process_frame` calls
/// are strictly sequential; read-only prediction queries may be served from
/// a clone.
#[derive(Debug, Clone)]
pub struct Engine {
    params: EngineParams,
    buffer: LocalModelBuffer,
    sampler: GridSampler,
    global: Option<GprModel>,
    sampler_rev_built: u64,
    /// Occupied cells at the last successful rebuild.
    built_cells: usize,
    monitor: DisposalMonitor,
    pending: VecDeque<PendingFrame>,
    active: Option<ActiveTracklet>,
    frame_index: u64,
    events: Vec<EngineEvent>,
}

impl Engine {
    pub fn new(params: EngineParams) -> Self {
        let sampler = GridSampler::new(
            params.grid_cols,
            params.grid_rows,
            params.cell_capacity,
            params.screen_w,
            params.screen_h,
        );
        Self {
            buffer: LocalModelBuffer::new(params.buffer_capacity),
            sampler,
            global: None,
            sampler_rev_built: 0,
            built_cells: 0,
            monitor: DisposalMonitor::new(params.rho, params.disposal_window),
            pending: VecDeque::with_capacity(params.n_min + 1),
            active: None,
            frame_index: 0,
            events: Vec::new(),
            params,
        }
    }

    pub fn params(&self) -> &EngineParams {
        &self.params
    }

    pub fn buffer(&self) -> &LocalModelBuffer {
        &self.buffer
    }

    pub fn sampler(&self) -> &GridSampler {
        &self.sampler
    }

    pub fn global(&self) -> Option<&GprModel> {
        self.global.as_ref()
    }

    pub fn events(&self) -> &[EngineEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<EngineEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn frame_index(&self) -> u64 {
        self.frame_index
    }

    /// Advances the engine by one frame and returns the selected gaze
    /// prediction once any model exists. Never fails; matching and learning
    /// degrade gracefully on odd inputs (empty screens, singular updates).
    pub fn process_frame(
        &mut self,
        sample: &CornealSample,
        objects: &[(u32, ScreenPoint)],
    ) -> Option<GazePrediction> {
        self.frame_index += 1;
        let matched = self.learn_step(sample, objects);
        let outcome = self.predict_internal(&sample.pos);

        if let Some(out) = &outcome {
            match (&out.global, &out.local) {
                (Some(g), Some((_, l))) => {
                    let mature = self
                        .global
                        .as_ref()
                        .map(|m| m.len() >= self.params.disposal_min_global_pairs)
                        .unwrap_or(false)
                        && self.built_cells >= self.params.disposal_min_global_cells;
                    let residuals = if mature {
                        matched.map(|gaze| Residuals {
                            global_sq: g.point.dist_sq(&gaze),
                            local_sq: l.point.dist_sq(&gaze),
                        })
                    } else {
                        None
                    };
                    let dispose = self.monitor.observe(
                        g.compensated_variance(),
                        l.compensated_variance(),
                        residuals,
                    );
                    if dispose {
                        self.dispose_global(sample.t);
                    }
                }
                _ => self.monitor.reset(),
            }
        }
        outcome.map(|o| o.selected)
    }

    /// Read-only prediction; used while learning is frozen (evaluation
    /// protocols) and by concurrent snapshot readers.
    pub fn predict_frozen(&self, cornea: &Vector3<f64>) -> Option<GazePrediction> {
        self.predict_internal(cornea).map(|o| o.selected)
    }

    /// Convenience wrapper for trace playback.
    pub fn process_record(&mut self, rec: &crate::trace::FrameRecord) -> Option<GazePrediction> {
        self.process_frame(
            &CornealSample {
                t: rec.t,
                pos: rec.cornea,
            },
            &rec.objects,
        )
    }

    /// Compensated variances of every available model at `cornea`
    /// (locals oldest-first, then the global model). Exposed so selection
    /// optimality can be audited from outside.
    pub fn candidate_variances(&self, cornea: &Vector3<f64>) -> (Vec<f64>, Option<f64>) {
        let x = DVector::from_column_slice(&[cornea.x, cornea.y, cornea.z]);
        let locals = self
            .buffer
            .models()
            .iter()
            .map(|m| m.predict(&x).expect("local models are nonempty").compensated_variance())
            .collect();
        let global = self
            .global
            .as_ref()
            .map(|g| g.predict(&x).expect("global model is nonempty").compensated_variance());
        (locals, global)
    }

    fn predict_internal(&self, cornea: &Vector3<f64>) -> Option<PredictOutcome> {
        let x = DVector::from_column_slice(&[cornea.x, cornea.y, cornea.z]);
        let local = self.buffer.best_local(&x).ok();
        let global = self
            .global
            .as_ref()
            .map(|g| g.predict(&x).expect("global model is nonempty"));
        let selected = match (&local, &global) {
            (Some((i, l)), Some(g)) => select_prediction(
                tag(l, PredictionSource::Local(*i)),
                tag(g, PredictionSource::Global),
            ),
            (Some((i, l)), None) => tag(l, PredictionSource::Local(*i)),
            (None, Some(g)) => tag(g, PredictionSource::Global),
            (None, None) => return None,
        };
        Some(PredictOutcome {
            selected,
            local,
            global,
        })
    }

    /// Runs matching and model updates; returns the screen point of this
    /// frame's validity-gated pair when one was admitted.
    fn learn_step(
        &mut self,
        sample: &CornealSample,
        objects: &[(u32, ScreenPoint)],
    ) -> Option<ScreenPoint> {
        if self.active.is_some() {
            return self.guided_update(sample, objects);
        }
        self.try_open_tracklet(sample, objects)
    }

    /// Extends the current tracklet with a pair validated by the current
    /// local model (guided matching over this frame's window).
    fn guided_update(
        &mut self,
        sample: &CornealSample,
        objects: &[(u32, ScreenPoint)],
    ) -> Option<ScreenPoint> {
        let tau_px = self.params.tau_px;
        let candidates: Vec<CandidateTrajectory> = objects
            .iter()
            .map(|(id, p)| CandidateTrajectory {
                object_id: *id,
                points: vec![*p],
            })
            .collect();

        let accept = if candidates.is_empty() {
            None
        } else {
            let model = self.buffer.models().last().expect("active tracklet has a model");
            match tracklet::guided_match(&[sample.pos], &candidates, model, tau_px) {
                Ok(result) => result.best_id.and_then(|id| {
                    let gaze = objects.iter().find(|(oid, _)| *oid == id).unwrap().1;
                    let x = DVector::from_column_slice(&[
                        sample.pos.x,
                        sample.pos.y,
                        sample.pos.z,
                    ]);
                    let acq_var = model.predict(&x).ok()?.compensated_variance();
                    Some((gaze, acq_var))
                }),
                Err(_) => None,
            }
        };

        match accept {
            Some((gaze, acq_var)) => {
                let x =
                    DVector::from_column_slice(&[sample.pos.x, sample.pos.y, sample.pos.z]);
                let model = self.buffer.newest_mut().expect("active tracklet has a model");
                if model.add_observation(&x, gaze).is_err() {
                    // Degenerate update; treat as a rejection.
                    return self.note_rejection(sample.t);
                }
                let complete = model.len() >= self.params.n_max;
                if let Some(a) = &mut self.active {
                    a.reject_streak = 0;
                }
                self.sampler.insert(
                    CalibrationPair {
                        cornea: sample.pos,
                        gaze,
                    },
                    acq_var,
                );
                if complete {
                    self.complete_tracklet(sample.t);
                }
                Some(gaze)
            }
            None => self.note_rejection(sample.t),
        }
    }

    fn note_rejection(&mut self, t: f64) -> Option<ScreenPoint> {
        let streak = {
            let a = self.active.as_mut().expect("rejection outside a tracklet");
            a.reject_streak += 1;
            a.reject_streak
        };
        if streak >= self.params.reject_limit {
            self.complete_tracklet(t);
        }
        None
    }

    /// Accumulates a sliding window and, once full, attempts to open a new
    /// tracklet: candidates must mirror the corneal velocity signature, and
    /// — whenever any model already exists — stay spatially consistent with
    /// predicted gaze over the whole window. The double gate keeps free
    /// viewing from seeding false correspondences.
    fn try_open_tracklet(
        &mut self,
        sample: &CornealSample,
        objects: &[(u32, ScreenPoint)],
    ) -> Option<ScreenPoint> {
        let predicted = self.predict_internal(&sample.pos).map(|o| o.selected.point);
        self.pending.push_back(PendingFrame {
            t: sample.t,
            cornea: sample.pos,
            objects: objects.to_vec(),
            predicted,
        });
        if self.pending.len() > self.params.n_min {
            self.pending.pop_front();
        }
        if self.pending.len() < self.params.n_min {
            return None;
        }

        // Candidates are the objects visible in every frame of the window.
        let first = &self.pending[0];
        let mut candidates: Vec<CandidateTrajectory> = Vec::new();
        'outer: for (id, _) in &first.objects {
            let mut points = Vec::with_capacity(self.pending.len());
            for f in &self.pending {
                match f.objects.iter().find(|(oid, _)| oid == id) {
                    Some((_, p)) => points.push(*p),
                    None => continue 'outer,
                }
            }
            candidates.push(CandidateTrajectory {
                object_id: *id,
                points,
            });
        }

        // Spatial gate from the models learned so far.
        let predictions: Option<Vec<ScreenPoint>> =
            self.pending.iter().map(|f| f.predicted).collect();
        if let Some(predictions) = predictions {
            candidates.retain(|c| {
                let mean_dist = c
                    .points
                    .iter()
                    .zip(&predictions)
                    .map(|(p, q)| p.dist(q))
                    .sum::<f64>()
                    / predictions.len() as f64;
                mean_dist < self.params.tau_px
            });
        }
        if candidates.is_empty() {
            return None;
        }

        let query = Tracklet::new(
            self.pending.iter().map(|f| f.t).collect(),
            self.pending.iter().map(|f| [f.cornea.x, f.cornea.y]).collect(),
        );
        let result = tracklet::match_query(
            &query,
            &candidates,
            self.params.tau_match,
            self.params.normalization,
        )
        .ok()?;
        let best_id = result.best_id?;

        let trajectory = candidates
            .into_iter()
            .find(|c| c.object_id == best_id)
            .unwrap();
        let inputs: Vec<DVector<f64>> = self
            .pending
            .iter()
            .map(|f| DVector::from_column_slice(&[f.cornea.x, f.cornea.y, f.cornea.z]))
            .collect();
        let model =
            match GprModel::fit(self.params.local_hyper, &inputs, &trajectory.points, false) {
                Ok(m) => m,
                Err(_) => return None,
            };
        // Score window pairs by the freshly-fit model's own variance.
        let acq_vars: Vec<f64> = inputs
            .iter()
            .map(|x| {
                model
                    .predict(x)
                    .map(|p| p.compensated_variance())
                    .unwrap_or(f64::MAX)
            })
            .collect();
        for ((x, gaze), var) in inputs.iter().zip(&trajectory.points).zip(acq_vars) {
            self.sampler.insert(
                CalibrationPair {
                    cornea: Vector3::new(x[0], x[1], x[2]),
                    gaze: *gaze,
                },
                var,
            );
        }
        let last_gaze = *trajectory.points.last().unwrap();
        let guided = !self.buffer.is_empty() || self.global.is_some();
        self.buffer.push(model, self.frame_index);
        self.active = Some(ActiveTracklet { reject_streak: 0 });
        self.pending.clear();
        self.events.push(EngineEvent::TrackletOpened {
            frame: self.frame_index,
            t: sample.t,
            object_id: best_id,
            seeded_by_match: !guided,
        });
        Some(last_gaze)
    }

    /// Closes the current tracklet; the buffer rotates (the model stays as
    /// the newest ring entry) and the global model refreshes if the sampler
    /// changed.
    fn complete_tracklet(&mut self, t: f64) {
        self.active = None;
        if self.sampler.revision() != self.sampler_rev_built {
            self.try_rebuild_global(t);
        }
    }

    fn try_rebuild_global(&mut self, t: f64) {
        if self.sampler.occupied_cells() < self.params.min_rebuild_cells {
            return;
        }
        match rebuild_global(&self.sampler, self.params.global_hyper) {
            Ok(model) => {
                self.events.push(EngineEvent::GlobalRebuilt {
                    frame: self.frame_index,
                    t,
                    pairs: self.sampler.len(),
                    cells: self.sampler.occupied_cells(),
                });
                self.global = Some(model);
                self.sampler_rev_built = self.sampler.revision();
                self.built_cells = self.sampler.occupied_cells();
            }
            Err(_) => {}
        }
    }

    fn dispose_global(&mut self, t: f64) {
        self.global = None;
        self.sampler.clear();
        self.sampler_rev_built = self.sampler.revision();
        self.built_cells = 0;
        self.monitor.reset_baseline();
        self.events.push(EngineEvent::GlobalDisposed {
            frame: self.frame_index,
            t,
        });
        // The pending window's cached guidance is stale now.
        let updates: Vec<Option<ScreenPoint>> = self
            .pending
            .iter()
            .map(|f| {
                let x = DVector::from_column_slice(&[f.cornea.x, f.cornea.y, f.cornea.z]);
                self.buffer.best_local(&x).ok().map(|(_, p)| p.point)
            })
            .collect();
        for (f, u) in self.pending.iter_mut().zip(updates) {
            f.predicted = u;
        }
    }

    pub fn snapshot(&self) -> EngineSnapshot {
        EngineSnapshot {
            params: self.params.clone(),
            frame_index: self.frame_index,
            local_models: self
                .buffer
                .models()
                .iter()
                .zip(self.buffer.created_frames())
                .map(|(m, created)| LocalModelSnapshot {
                    created_frame: *created,
                    pairs: m
                        .raw_pairs()
                        .into_iter()
                        .map(|(x, y)| ([x[0], x[1], x[2]], [y.x, y.y]))
                        .collect(),
                })
                .collect(),
            sampler_pairs: self.sampler.pairs().copied().collect(),
            global_built: self.global.is_some(),
        }
    }

    pub fn from_snapshot(snap: EngineSnapshot) -> Result<Self, EngineError> {
        let mut engine = Engine::new(snap.params);
        engine.frame_index = snap.frame_index;
        for lm in snap.local_models {
            let inputs: Vec<DVector<f64>> = lm
                .pairs
                .iter()
                .map(|(x, _)| DVector::from_column_slice(x))
                .collect();
            let outputs: Vec<ScreenPoint> = lm
                .pairs
                .iter()
                .map(|(_, y)| ScreenPoint::new(y[0], y[1]))
                .collect();
            let model = GprModel::fit(engine.params.local_hyper, &inputs, &outputs, false)?;
            engine.buffer.push(model, lm.created_frame);
        }
        for r in snap.sampler_pairs {
            engine.sampler.insert(r.pair, r.acquisition_variance);
        }
        if snap.global_built {
            engine.global = Some(rebuild_global(&engine.sampler, engine.params.global_hyper)?);
            engine.sampler_rev_built = engine.sampler.revision();
        }
        Ok(engine)
    }
}

fn tag(p: &Prediction, source: PredictionSource) -> GazePrediction {
    GazePrediction {
        point: p.point,
        variance: p.variance,
        source,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalModelSnapshot {
    pub created_frame: u64,
    pub pairs: Vec<([f64; 3], [f64; 2])>,
}

/// Serializable engine state; covariance matrices are rebuilt on restore.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineSnapshot {
    pub params: EngineParams,
    pub frame_index: u64,
    pub local_models: Vec<LocalModelSnapshot>,
    pub sampler_pairs: Vec<RetainedPair>,
    pub global_built: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn pair_at(x: f64, y: f64, gaze: ScreenPoint) -> CalibrationPair {
        CalibrationPair {
            cornea: Vector3::new(x, y, 100.0),
            gaze,
        }
    }

    fn small_local_model(center: f64, rng: &mut StdRng) -> GprModel {
        let mut m = GprModel::new(GprHyperparams::local_default());
        for i in 0..8 {
            let u = center + i as f64 * 0.01;
            m.add_observation(
                &DVector::from_column_slice(&[u, -u, 100.0 + rng.gen_range(-0.01..0.01)]),
                ScreenPoint::new(250.0 - 100.0 * u, 150.0 + 50.0 * u),
            )
            .unwrap();
        }
        m
    }

    #[test]
    fn sampler_keeps_cell_counts_bounded() {
        let mut sampler = GridSampler::new(6, 4, 4, 500.0, 300.0);
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..500 {
            let gaze = ScreenPoint::new(rng.gen_range(0.0..500.0), rng.gen_range(0.0..300.0));
            sampler.insert(pair_at(0.0, 0.0, gaze), rng.gen_range(0.0..100.0));
        }
        assert!(sampler.len() <= 96);
        for cell in 0..24 {
            let count = sampler
                .pairs()
                .filter(|r| sampler.cell_index(&r.pair.gaze) == cell)
                .count();
            assert!(count <= 4);
        }
    }

    #[test]
    fn sampler_retains_lowest_variances_per_cell() {
        // All offers into one cell; retained set must be the 4 lowest.
        let mut sampler = GridSampler::new(6, 4, 4, 500.0, 300.0);
        let mut rng = StdRng::seed_from_u64(2);
        let mut offered = Vec::new();
        for _ in 0..60 {
            let var = rng.gen_range(0.0..50.0);
            offered.push(var);
            sampler.insert(pair_at(0.0, 0.0, ScreenPoint::new(10.0, 10.0)), var);
        }
        offered.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut retained: Vec<f64> = sampler.pairs().map(|r| r.acquisition_variance).collect();
        retained.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(retained.len(), 4);
        for (r, o) in retained.iter().zip(&offered[..4]) {
            assert_eq!(r, o);
        }
    }

    #[test]
    fn sampler_ignores_worse_offer_into_full_cell() {
        let mut sampler = GridSampler::new(6, 4, 2, 500.0, 300.0);
        let g = ScreenPoint::new(5.0, 5.0);
        sampler.insert(pair_at(0.0, 0.0, g), 1.0);
        sampler.insert(pair_at(0.0, 0.0, g), 2.0);
        let rev = sampler.revision();
        assert!(!sampler.insert(pair_at(0.0, 0.0, g), 3.0));
        assert_eq!(sampler.revision(), rev);
    }

    #[test]
    fn sampler_drops_offscreen_pairs() {
        let mut sampler = GridSampler::new(6, 4, 4, 500.0, 300.0);
        assert!(!sampler.insert(pair_at(0.0, 0.0, ScreenPoint::new(-1.0, 10.0)), 1.0));
        assert!(!sampler.insert(pair_at(0.0, 0.0, ScreenPoint::new(10.0, 301.0)), 1.0));
        assert!(sampler.is_empty());
    }

    #[test]
    fn sampler_boundary_points_land_in_last_cells() {
        let sampler = GridSampler::new(6, 4, 4, 500.0, 300.0);
        assert_eq!(sampler.cell_index(&ScreenPoint::new(500.0, 300.0)), 23);
        assert_eq!(sampler.cell_index(&ScreenPoint::new(0.0, 0.0)), 0);
    }

    #[test]
    fn rebuild_requires_diversity() {
        let mut sampler = GridSampler::new(6, 4, 4, 500.0, 300.0);
        for i in 0..4 {
            sampler.insert(
                pair_at(i as f64 * 0.01, 0.0, ScreenPoint::new(10.0 + i as f64, 10.0)),
                1.0,
            );
        }
        // 4 pairs, single cell: not diverse enough.
        assert!(matches!(
            rebuild_global(&sampler, GprHyperparams::standardized_default()),
            Err(EngineError::InsufficientDiversity { cells: 1, .. })
        ));
        sampler.insert(pair_at(1.0, 1.0, ScreenPoint::new(400.0, 250.0)), 1.0);
        assert!(rebuild_global(&sampler, GprHyperparams::standardized_default()).is_ok());
    }

    #[test]
    fn rebuild_at_capacity_builds_96_point_model() {
        let mut sampler = GridSampler::new(6, 4, 4, 500.0, 300.0);
        let mut rng = StdRng::seed_from_u64(3);
        // Four pairs into each of the 24 cells.
        for row in 0..4 {
            for col in 0..6 {
                for k in 0..4 {
                    let gaze = ScreenPoint::new(
                        col as f64 * (500.0 / 6.0) + 10.0 + k as f64 * 5.0,
                        row as f64 * 75.0 + 10.0 + k as f64 * 3.0,
                    );
                    sampler.insert(
                        pair_at(
                            2.5 - gaze.x / 100.0 + rng.gen_range(-0.01..0.01),
                            gaze.y / 50.0 - 2.5,
                            gaze,
                        ),
                        rng.gen_range(0.0..10.0),
                    );
                }
            }
        }
        assert_eq!(sampler.len(), 96);
        let model = rebuild_global(&sampler, GprHyperparams::standardized_default()).unwrap();
        assert_eq!(model.len(), 96);
        assert_eq!(model.covariance().nrows(), 96);
    }

    #[test]
    fn rebuild_is_deterministic() {
        let mut sampler = GridSampler::new(6, 4, 4, 500.0, 300.0);
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..40 {
            let gaze = ScreenPoint::new(rng.gen_range(0.0..500.0), rng.gen_range(0.0..300.0));
            sampler.insert(
                pair_at(2.5 - gaze.x / 100.0, gaze.y / 50.0 - 2.5, gaze),
                rng.gen_range(0.0..10.0),
            );
        }
        let a = rebuild_global(&sampler, GprHyperparams::standardized_default()).unwrap();
        let b = rebuild_global(&sampler, GprHyperparams::standardized_default()).unwrap();
        let x = DVector::from_column_slice(&[0.3, 0.4, 100.0]);
        let pa = a.predict(&x).unwrap();
        let pb = b.predict(&x).unwrap();
        assert_eq!(pa.point, pb.point);
        assert_eq!(pa.variance, pb.variance);
    }

    #[test]
    fn best_local_matches_exhaustive_argmin() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut buffer = LocalModelBuffer::new(10);
        for i in 0..10 {
            buffer.push(small_local_model(i as f64 * 0.3 - 1.5, &mut rng), i);
        }
        for _ in 0..50 {
            let x = DVector::from_column_slice(&[
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                100.0,
            ]);
            let (best_idx, best) = buffer.best_local(&x).unwrap();
            // Brute-force oracle over every model.
            let vars: Vec<f64> = buffer
                .models()
                .iter()
                .map(|m| m.predict(&x).unwrap().compensated_variance())
                .collect();
            let oracle = vars
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            assert_eq!(best.compensated_variance(), oracle);
            assert_eq!(vars[best_idx], oracle);
        }
    }

    #[test]
    fn best_local_empty_buffer_errors() {
        let buffer = LocalModelBuffer::new(10);
        assert!(matches!(
            buffer.best_local(&DVector::from_column_slice(&[0.0, 0.0, 100.0])),
            Err(EngineError::EmptyBuffer)
        ));
    }

    #[test]
    fn best_local_prefers_model_with_nearby_data() {
        let mut rng = StdRng::seed_from_u64(9);
        let mut buffer = LocalModelBuffer::new(10);
        buffer.push(small_local_model(-1.5, &mut rng), 0);
        buffer.push(small_local_model(1.5, &mut rng), 1);
        let near_first = DVector::from_column_slice(&[-1.48, 1.48, 100.0]);
        let (idx, _) = buffer.best_local(&near_first).unwrap();
        assert_eq!(idx, 0);
        let near_second = DVector::from_column_slice(&[1.52, -1.52, 100.0]);
        let (idx, _) = buffer.best_local(&near_second).unwrap();
        assert_eq!(idx, 1);
    }

    #[test]
    fn buffer_eviction_drops_oldest_and_keeps_count() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut buffer = LocalModelBuffer::new(8);
        for i in 0..8 {
            buffer.push(small_local_model(i as f64 * 0.1, &mut rng), i);
        }
        assert_eq!(buffer.len(), 8);
        let evicted = buffer.push(small_local_model(2.0, &mut rng), 99);
        assert_eq!(evicted, Some(0));
        assert_eq!(buffer.len(), 8);
        assert_eq!(buffer.created_frames()[0], 1);
        assert_eq!(*buffer.created_frames().last().unwrap(), 99);
    }

    #[test]
    fn selection_tie_goes_to_global() {
        let l = GazePrediction {
            point: ScreenPoint::new(1.0, 1.0),
            variance: [4.0, 4.0],
            source: PredictionSource::Local(0),
        };
        let g = GazePrediction {
            point: ScreenPoint::new(2.0, 2.0),
            variance: [4.0, 4.0],
            source: PredictionSource::Global,
        };
        assert_eq!(select_prediction(l, g).source, PredictionSource::Global);
    }

    #[test]
    fn selection_prefers_lower_variance() {
        let l = GazePrediction {
            point: ScreenPoint::new(1.0, 1.0),
            variance: [1.0, 1.0],
            source: PredictionSource::Local(3),
        };
        let g = GazePrediction {
            point: ScreenPoint::new(2.0, 2.0),
            variance: [4.0, 4.0],
            source: PredictionSource::Global,
        };
        assert_eq!(
            select_prediction(l, g).source,
            PredictionSource::Local(3)
        );
        let l2 = GazePrediction {
            variance: [16.0, 16.0],
            ..l
        };
        let g2 = GazePrediction {
            variance: [4.0, 4.0],
            ..g
        };
        assert_eq!(select_prediction(l2, g2).source, PredictionSource::Global);
    }

    #[test]
    fn selection_agrees_with_recomputed_compensation() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..200 {
            let l = GazePrediction {
                point: ScreenPoint::new(0.0, 0.0),
                variance: [rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)],
                source: PredictionSource::Local(0),
            };
            let g = GazePrediction {
                point: ScreenPoint::new(0.0, 0.0),
                variance: [rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)],
                source: PredictionSource::Global,
            };
            let picked = select_prediction(l, g);
            let expect_global = 0.5 * (g.variance[0] + g.variance[1])
                <= 0.5 * (l.variance[0] + l.variance[1]);
            assert_eq!(picked.source == PredictionSource::Global, expect_global);
        }
    }

    #[test]
    fn monitor_disposes_after_persistent_collapse() {
        let mut monitor = DisposalMonitor::new(2.0, 10);
        for i in 0..9 {
            assert!(!monitor.observe(3.0, 1.0, None), "fired early at {i}");
        }
        assert!(monitor.observe(3.0, 1.0, None));
        assert_eq!(monitor.counter(), 0);
    }

    #[test]
    fn monitor_resets_on_single_frame_recovery() {
        let mut monitor = DisposalMonitor::new(2.0, 10);
        for _ in 0..9 {
            assert!(!monitor.observe(3.0, 1.0, None));
        }
        assert!(!monitor.observe(1.0, 1.0, None)); // recovery resets
        for _ in 0..9 {
            assert!(!monitor.observe(3.0, 1.0, None));
        }
        assert!(monitor.observe(3.0, 1.0, None));
    }

    #[test]
    fn monitor_residual_route_fires_on_consistent_global_error() {
        let mut monitor = DisposalMonitor::new(2.0, 10);
        // Healthy: global residual comparable to local scale.
        for _ in 0..20 {
            assert!(!monitor.observe(
                1.0,
                40.0,
                Some(Residuals {
                    global_sq: 36.0,
                    local_sq: 16.0,
                })
            ));
        }
        // Slippage: global off by ~20 px while locals stay at ~4 px.
        for i in 0..9 {
            assert!(
                !monitor.observe(
                    1.0,
                    40.0,
                    Some(Residuals {
                        global_sq: 400.0,
                        local_sq: 16.0,
                    })
                ),
                "fired early at {i}"
            );
        }
        assert!(monitor.observe(
            1.0,
            40.0,
            Some(Residuals {
                global_sq: 400.0,
                local_sq: 16.0,
            })
        ));
    }

    #[test]
    fn engine_first_frame_has_no_prediction() {
        let mut engine = Engine::new(EngineParams::default());
        let out = engine.process_frame(
            &CornealSample::new(0.0, 0.0, 0.0, 100.0),
            &[(0, ScreenPoint::new(100.0, 100.0))],
        );
        assert!(out.is_none());
    }

    #[test]
    fn snapshot_round_trip_preserves_predictions() {
        let mut rng = StdRng::seed_from_u64(17);
        let mut engine = Engine::new(EngineParams::default());
        // Hand-build state: a couple of local models and a sampler spread.
        for i in 0..3 {
            engine
                .buffer
                .push(small_local_model(i as f64 * 0.4 - 0.4, &mut rng), i);
        }
        for _ in 0..30 {
            let gaze = ScreenPoint::new(rng.gen_range(0.0..500.0), rng.gen_range(0.0..300.0));
            engine.sampler.insert(
                pair_at(2.5 - gaze.x / 100.0, gaze.y / 50.0 - 2.5, gaze),
                rng.gen_range(0.0..10.0),
            );
        }
        engine.try_rebuild_global(0.0);
        assert!(engine.global.is_some());

        let snap = engine.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        let restored = Engine::from_snapshot(serde_json::from_str(&json).unwrap()).unwrap();

        let orig_pairs: Vec<RetainedPair> = engine.sampler.pairs().copied().collect();
        let rest_pairs: Vec<RetainedPair> = restored.sampler.pairs().copied().collect();
        assert_eq!(orig_pairs.len(), rest_pairs.len(), "sampler sizes differ");
        for (a, b) in orig_pairs.iter().zip(&rest_pairs) {
            assert_eq!(a.pair.cornea, b.pair.cornea, "sampler pair mismatch");
        }

        for _ in 0..20 {
            let c = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 100.0);
            let a = engine.predict_frozen(&c).unwrap();
            let b = restored.predict_frozen(&c).unwrap();
            assert!(
                a.point.dist(&b.point) < 1e-9,
                "a={:?} src={:?} var={:?}  b={:?} src={:?} var={:?}",
                a.point,
                a.source,
                a.variance,
                b.point,
                b.source,
                b.variance
            );
            assert_eq!(a.source, b.source);
        }
    }

    #[test]
    fn params_validation_rejects_bad_capacity() {
        let mut p = EngineParams::default();
        p.buffer_capacity = 4;
        assert!(p.validate().is_err());
        p.buffer_capacity = 12;
        assert!(p.validate().is_ok());
    }
}
