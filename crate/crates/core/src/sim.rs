//! Deterministic synthetic HMD session generator.
//!
//! Produces traces of moving screen objects, a scripted gaze behavior
//! (pursuit with lag, saccadic transitions, free viewing), a ground-truth
//! cornea mapping with injectable slippage, and sensor noise presets. The
//! same scripts, map, and seed always produce byte-identical traces.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::biquadratic_basis;
use crate::trace::FrameRecord;
use crate::types::ScreenPoint;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid script: field '{field}': {msg}")]
    InvalidScript { field: String, msg: String },
    #[error("ground-truth map is not injective over the screen (grid check failed)")]
    NotInjective,
}

fn script_err<T>(field: &str, msg: impl Into<String>) -> Result<T, SimError> {
    Err(SimError::InvalidScript {
        field: field.to_string(),
        msg: msg.into(),
    })
}

/// A timed additive corneal offset, modeling headset slippage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlippageEvent {
    pub at_s: f64,
    pub dx_mm: f64,
    pub dy_mm: f64,
}

/// Exact bi-quadratic screen→cornea mapping with depth model and slippage.
///
/// The horizontal coefficient runs negative: the eye-facing camera sees the
/// cornea move opposite to the object's horizontal motion. The map is checked
/// for injectivity on a 50×30 grid at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMap {
    /// Tensor coefficients over (u, v) = (x/screen_w, y/screen_h).
    pub coeffs_x: [f64; 9],
    pub coeffs_y: [f64; 9],
    /// Depth in mm: `z = depth_base + depth_du·u + depth_dv·v`.
    pub depth_base: f64,
    pub depth_du: f64,
    pub depth_dv: f64,
    /// Amplitude of a non-polynomial warp term (mm); zero for the exact
    /// bi-quadratic world.
    pub warp_mm: f64,
    pub slippage: Vec<SlippageEvent>,
    pub screen_w: f64,
    pub screen_h: f64,
}

impl GroundTruthMap {
    pub fn new(
        coeffs_x: [f64; 9],
        coeffs_y: [f64; 9],
        screen_w: f64,
        screen_h: f64,
    ) -> Result<Self, SimError> {
        let map = Self {
            coeffs_x,
            coeffs_y,
            depth_base: 100.5,
            depth_du: 0.4,
            depth_dv: 0.3,
            warp_mm: 0.0,
            slippage: Vec::new(),
            screen_w,
            screen_h,
        };
        map.check_injective()?;
        Ok(map)
    }

    /// The stock mapping: cornea x ∈ [−2.5, 2.5] mirrored against screen x,
    /// cornea y ∈ [−2.5, 3.5], with mild quadratic curvature.
    pub fn default_for_screen(screen_w: f64, screen_h: f64) -> Self {
        // Affine span plus quadratic terms around 2% of it; small enough that
        // the inverse stays near-bi-quadratic, large enough to be seen.
        let coeffs_x = [2.5, -5.0, 0.0, 0.10, -0.06, 0.0, 0.0, 0.0, 0.0];
        let coeffs_y = [-2.5, 0.0, 6.0, 0.0, 0.05, -0.12, 0.0, 0.0, 0.0];
        Self::new(coeffs_x, coeffs_y, screen_w, screen_h).expect("stock map is injective")
    }

    /// Adds a small non-polynomial warp; exercises the statistical baselines
    /// where the polynomial family is misspecified.
    pub fn with_warp(mut self, warp_mm: f64) -> Self {
        self.warp_mm = warp_mm;
        self
    }

    fn check_injective(&self) -> Result<(), SimError> {
        // Per-axis monotonicity over a 50x30 grid implies injectivity on the
        // rectangle for a tensor-quadratic map.
        let cols = 50;
        let rows = 30;
        for r in 0..rows {
            let y = self.screen_h * r as f64 / (rows - 1) as f64;
            let mut prev = f64::INFINITY;
            for c in 0..cols {
                let x = self.screen_w * c as f64 / (cols - 1) as f64;
                let p = self.base_map(ScreenPoint::new(x, y));
                if p.x >= prev {
                    return Err(SimError::NotInjective);
                }
                prev = p.x;
            }
        }
        for c in 0..cols {
            let x = self.screen_w * c as f64 / (cols - 1) as f64;
            let mut prev = f64::NEG_INFINITY;
            for r in 0..rows {
                let y = self.screen_h * r as f64 / (rows - 1) as f64;
                let p = self.base_map(ScreenPoint::new(x, y));
                if p.y <= prev {
                    return Err(SimError::NotInjective);
                }
                prev = p.y;
            }
        }
        Ok(())
    }

    fn base_map(&self, gaze: ScreenPoint) -> Vector2<f64> {
        let u = gaze.x / self.screen_w;
        let v = gaze.y / self.screen_h;
        let basis = biquadratic_basis(u, v);
        let mut cx = 0.0;
        let mut cy = 0.0;
        for j in 0..9 {
            cx += self.coeffs_x[j] * basis[j];
            cy += self.coeffs_y[j] * basis[j];
        }
        if self.warp_mm != 0.0 {
            use std::f64::consts::TAU;
            cx += self.warp_mm * (TAU * u).sin() * (TAU * v).cos();
            cy += self.warp_mm * (TAU * v).sin() * (TAU * u).cos();
        }
        Vector2::new(cx, cy)
    }

    fn slippage_offset(&self, t: f64) -> Vector2<f64> {
        let mut off = Vector2::zeros();
        for e in &self.slippage {
            if t >= e.at_s {
                off += Vector2::new(e.dx_mm, e.dy_mm);
            }
        }
        off
    }

    /// Noise-free corneal center for a gaze point at time `t` (slippage
    /// applied, depth model included).
    pub fn map(&self, gaze: ScreenPoint, t: f64) -> Vector3<f64> {
        let xy = self.base_map(gaze) + self.slippage_offset(t);
        let u = gaze.x / self.screen_w;
        let v = gaze.y / self.screen_h;
        let z = self.depth_base + self.depth_du * u + self.depth_dv * v;
        Vector3::new(xy.x, xy.y, z)
    }

    /// Returns a copy whose corneal outputs shift by `offset` after `at_s`.
    pub fn inject_slippage(&self, at_s: f64, offset: (f64, f64)) -> Self {
        let mut out = self.clone();
        out.slippage.push(SlippageEvent {
            at_s,
            dx_mm: offset.0,
            dy_mm: offset.1,
        });
        out
    }
}

/// Trajectory families for scripted screen objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Ping-pong between two endpoints.
    Linear { from: (f64, f64), to: (f64, f64) },
    /// Constant angular speed around a center.
    Circular {
        center: (f64, f64),
        radius: f64,
        phase: f64,
    },
    /// Catmull-Rom spline through waypoints, looped, traversed at constant
    /// speed.
    WaypointSpline { waypoints: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: u32,
    pub kind: TrajectoryKind,
    pub speed_px_s: f64,
}

/// The moving-object script for one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub duration_s: f64,
    pub rate_hz: f64,
    pub objects: Vec<ObjectSpec>,
}

/// One gaze behavior interval; `follow: None` is free viewing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub follow: Option<u32>,
}

/// Scripted gaze behavior: what is followed when, pursuit lag, and pursuit
/// noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeScript {
    pub segments: Vec<GazeSegment>,
    pub lag_ms: f64,
    pub pursuit_sigma_px: f64,
}

/// Sensor-noise presets for the two capture conditions, plus a noiseless
/// mode for oracle tests. Constants are tuned so the explicit-calibration
/// GPR baseline lands in the published accuracy bands for each condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePreset {
    pub cornea_sigma_mm: f64,
    pub drift_mm_per_s: f64,
    /// Bounded jitter on corneal depth (mm).
    pub depth_jitter_mm: f64,
}

impl NoisePreset {
    pub fn noiseless() -> Self {
        Self {
            cornea_sigma_mm: 0.0,
            drift_mm_per_s: 0.0,
            depth_jitter_mm: 0.0,
        }
    }

    /// Head stabilized by a chin rest: white sensor noise only.
    pub fn chin_rest() -> Self {
        Self {
            cornea_sigma_mm: 0.0375,
            drift_mm_per_s: 0.0,
            depth_jitter_mm: 0.02,
        }
    }

    /// Free head: more sensor noise plus a slow headset drift.
    pub fn no_chin_rest() -> Self {
        Self {
            cornea_sigma_mm: 0.0550,
            drift_mm_per_s: 0.0012,
            depth_jitter_mm: 0.02,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "noiseless" => Some(Self::noiseless()),
            "chin-rest" => Some(Self::chin_rest()),
            "no-chin-rest" => Some(Self::no_chin_rest()),
            _ => None,
        }
    }
}

fn clamp_to_screen(p: ScreenPoint, w: f64, h: f64) -> ScreenPoint {
    ScreenPoint::new(p.x.clamp(0.0, w), p.y.clamp(0.0, h))
}

/// Object position at time `t`, before screen clamping.
fn object_position(spec: &ObjectSpec, t: f64) -> ScreenPoint {
    match &spec.kind {
        TrajectoryKind::Linear { from, to } => {
            let dx = to.0 - from.0;
            let dy = to.1 - from.1;
            let leg = (dx * dx + dy * dy).sqrt().max(1e-9);
            let s = (spec.speed_px_s * t) / leg;
            // Ping-pong parameter in [0, 1].
            let cycle = s.rem_euclid(2.0);
            let u = if cycle <= 1.0 { cycle } else { 2.0 - cycle };
            ScreenPoint::new(from.0 + u * dx, from.1 + u * dy)
        }
        TrajectoryKind::Circular {
            center,
            radius,
            phase,
        } => {
            let omega = spec.speed_px_s / radius.max(1e-9);
            let a = phase + omega * t;
            ScreenPoint::new(center.0 + radius * a.cos(), center.1 + radius * a.sin())
        }
        TrajectoryKind::WaypointSpline { waypoints } => catmull_rom_at(waypoints, spec.speed_px_s, t),
    }
}

/// Closed Catmull-Rom spline through `pts`, traversed at approximately
/// constant speed via per-segment arc-length parameterization.
fn catmull_rom_at(pts: &[(f64, f64)], speed: f64, t: f64) -> ScreenPoint {
    let n = pts.len();
    debug_assert!(n >= 3, "spline needs at least 3 waypoints");
    let seg_len = |i: usize| -> f64 {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt().max(1e-9)
    };
    let total: f64 = (0..n).map(seg_len).sum();
    let mut dist = (speed * t).rem_euclid(total);
    let mut seg = 0;
    while dist > seg_len(seg) {
        dist -= seg_len(seg);
        seg = (seg + 1) % n;
    }
    let u = dist / seg_len(seg);
    let p0 = pts[(seg + n - 1) % n];
    let p1 = pts[seg];
    let p2 = pts[(seg + 1) % n];
    let p3 = pts[(seg + 2) % n];
    let u2 = u * u;
    let u3 = u2 * u;
    let blend = |a: f64, b: f64, c: f64, d: f64| {
        0.5 * ((2.0 * b)
            + (-a + c) * u
            + (2.0 * a - 5.0 * b + 4.0 * c - d) * u2
            + (-a + 3.0 * b - 3.0 * c + d) * u3)
    };
    ScreenPoint::new(
        blend(p0.0, p1.0, p2.0, p3.0),
        blend(p0.1, p1.1, p2.1, p3.1),
    )
}

fn validate_scene(scene: &SceneScript) -> Result<(), SimError> {
    if scene.duration_s <= 0.0 {
        return script_err("duration_s", "must be positive");
    }
    if scene.rate_hz <= 0.0 {
        return script_err("rate_hz", "must be positive");
    }
    let mut seen = std::collections::BTreeSet::new();
    for obj in &scene.objects {
        if !seen.insert(obj.id) {
            return script_err("objects.id", format!("duplicate object id {}", obj.id));
        }
        if !(30.0..=300.0).contains(&obj.speed_px_s) {
            return script_err(
                "objects.speed_px_s",
                format!(
                    "object {} speed {} outside perceivable pursuit range [30, 300]",
                    obj.id, obj.speed_px_s
                ),
            );
        }
        if let TrajectoryKind::WaypointSpline { waypoints } = &obj.kind {
            if waypoints.len() < 3 {
                return script_err("objects.kind.waypoints", "spline needs >= 3 waypoints");
            }
        }
        if let TrajectoryKind::Circular { radius, .. } = &obj.kind {
            if *radius <= 0.0 {
                return script_err("objects.kind.radius", "must be positive");
            }
        }
    }
    Ok(())
}

fn validate_gaze(gaze: &GazeScript, scene: &SceneScript) -> Result<(), SimError> {
    if gaze.segments.is_empty() {
        return script_err("gaze.segments", "must not be empty");
    }
    let mut cursor = 0.0;
    for (i, seg) in gaze.segments.iter().enumerate() {
        if (seg.start_s - cursor).abs() > 1e-9 {
            return script_err(
                "gaze.segments",
                format!("segment {i} starts at {} but previous ends at {}", seg.start_s, cursor),
            );
        }
        if seg.end_s <= seg.start_s {
            return script_err("gaze.segments", format!("segment {i} has non-positive length"));
        }
        if let Some(id) = seg.follow {
            if !scene.objects.iter().any(|o| o.id == id) {
                return script_err(
                    "gaze.segments.follow",
                    format!("segment {i} follows unknown object {id}"),
                );
            }
        }
        cursor = seg.end_s;
    }
    if (cursor - scene.duration_s).abs() > 1e-9 {
        return script_err(
            "gaze.segments",
            format!("segments end at {cursor}, scene lasts {}", scene.duration_s),
        );
    }
    if gaze.lag_ms < 0.0 {
        return script_err("gaze.lag_ms", "must be non-negative");
    }
    if gaze.pursuit_sigma_px < 0.0 {
        return script_err("gaze.pursuit_sigma_px", "must be non-negative");
    }
    Ok(())
}

/// Maximum frames a saccadic transition may take.
const SACCADE_FRAMES: usize = 3;

struct GazeState {
    current: ScreenPoint,
    /// Remaining (frames, step) of an in-flight saccade.
    saccade: Option<(usize, Vector2<f64>)>,
    free_velocity: Vector2<f64>,
}

/// Generates a game-style session trace. Deterministic for a fixed seed.
pub fn generate(
    scene: &SceneScript,
    gaze: &GazeScript,
    map: &GroundTruthMap,
    preset: &NoisePreset,
    seed: u64,
) -> Result<Vec<FrameRecord>, SimError> {
    validate_scene(scene)?;
    validate_gaze(gaze, scene)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drift_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let drift_dir = Vector2::new(drift_angle.cos(), drift_angle.sin());
    let pursuit_noise = Normal::new(0.0, gaze.pursuit_sigma_px.max(1e-300)).unwrap();
    let sensor_noise = Normal::new(0.0, preset.cornea_sigma_mm.max(1e-300)).unwrap();
    let depth_noise = Normal::new(0.0, preset.depth_jitter_mm.max(1e-300)).unwrap();

    let n_frames = (scene.duration_s * scene.rate_hz).round() as u64;
    let dt = 1.0 / scene.rate_hz;
    let lag_s = gaze.lag_ms / 1000.0;
    let mut frames = Vec::with_capacity(n_frames as usize);

    let mut state = GazeState {
        current: ScreenPoint::new(map.screen_w / 2.0, map.screen_h / 2.0),
        saccade: None,
        free_velocity: Vector2::zeros(),
    };
    let mut prev_follow: Option<Option<u32>> = None;

    for frame in 0..n_frames {
        let t = frame as f64 * dt;
        let objects: Vec<(u32, ScreenPoint)> = scene
            .objects
            .iter()
            .map(|o| {
                (
                    o.id,
                    clamp_to_screen(object_position(o, t), map.screen_w, map.screen_h),
                )
            })
            .collect();

        let segment = gaze
            .segments
            .iter()
            .find(|s| t >= s.start_s && t < s.end_s)
            .or_else(|| gaze.segments.last())
            .expect("validated non-empty");

        // Desired gaze target for this frame.
        let desired = match segment.follow {
            Some(id) => {
                let spec = scene.objects.iter().find(|o| o.id == id).unwrap();
                let lagged = (t - lag_s).max(0.0);
                let base = clamp_to_screen(object_position(spec, lagged), map.screen_w, map.screen_h);
                if gaze.pursuit_sigma_px > 0.0 {
                    ScreenPoint::new(
                        base.x + pursuit_noise.sample(&mut rng),
                        base.y + pursuit_noise.sample(&mut rng),
                    )
                } else {
                    base
                }
            }
            None => {
                // Bounded random walk.
                state.free_velocity += Vector2::new(
                    rng.gen_range(-30.0..30.0) * dt,
                    rng.gen_range(-30.0..30.0) * dt,
                );
                state.free_velocity *= 0.98;
                let mut p = Vector2::new(state.current.x, state.current.y)
                    + state.free_velocity * dt * scene.rate_hz * 0.2;
                if p.x < 0.0 || p.x > map.screen_w {
                    state.free_velocity.x = -state.free_velocity.x;
                }
                if p.y < 0.0 || p.y > map.screen_h {
                    state.free_velocity.y = -state.free_velocity.y;
                }
                p.x = p.x.clamp(0.0, map.screen_w);
                p.y = p.y.clamp(0.0, map.screen_h);
                ScreenPoint::new(p.x, p.y)
            }
        };

        // Segment changes trigger a saccade spread over at most 3 frames.
        if prev_follow != Some(segment.follow) && prev_follow.is_some() {
            let jump = Vector2::new(desired.x - state.current.x, desired.y - state.current.y);
            state.saccade = Some((SACCADE_FRAMES, jump / SACCADE_FRAMES as f64));
        }
        prev_follow = Some(segment.follow);

        let (true_gaze, in_saccade) = match &mut state.saccade {
            Some((left, step)) => {
                let g = ScreenPoint::new(state.current.x + step.x, state.current.y + step.y);
                *left -= 1;
                let done = *left == 0;
                let step_copy = *step;
                if done {
                    state.saccade = None;
                } else {
                    state.saccade = Some((*left, step_copy));
                }
                (g, true)
            }
            None => (desired, false),
        };
        state.current = true_gaze;

        let mut cornea = map.map(true_gaze, t);
        cornea.x += preset.drift_mm_per_s * t * drift_dir.x;
        cornea.y += preset.drift_mm_per_s * t * drift_dir.y;
        if preset.cornea_sigma_mm > 0.0 {
            cornea.x += sensor_noise.sample(&mut rng);
            cornea.y += sensor_noise.sample(&mut rng);
            cornea.z += sensor_noise.sample(&mut rng);
        }
        if preset.depth_jitter_mm > 0.0 {
            let j: f64 = depth_noise.sample(&mut rng);
            cornea.z += j.clamp(-3.0 * preset.depth_jitter_mm, 3.0 * preset.depth_jitter_mm);
        }

        frames.push(FrameRecord {
            frame,
            t,
            cornea,
            objects,
            true_gaze,
            followed: if in_saccade { None } else { segment.follow },
        });
    }
    Ok(frames)
}

/// Generates a fixation-protocol trace: per target, a short saccadic
/// transition, then `dwell_s` of steady fixation. Each target appears as a
/// screen object whose id is the target's index; `followed` is set only
/// during the dwell.
pub fn fixation_protocol(
    targets: &[ScreenPoint],
    dwell_s: f64,
    rate_hz: f64,
    map: &GroundTruthMap,
    preset: &NoisePreset,
    seed: u64,
) -> Result<Vec<FrameRecord>, SimError> {
    if targets.is_empty() {
        return script_err("targets", "must not be empty");
    }
    if dwell_s <= 0.0 {
        return script_err("dwell_s", "must be positive");
    }
    if rate_hz <= 0.0 {
        return script_err("rate_hz", "must be positive");
    }
    for (i, tgt) in targets.iter().enumerate() {
        if !(0.0..=map.screen_w).contains(&tgt.x) || !(0.0..=map.screen_h).contains(&tgt.y) {
            return script_err("targets", format!("target {i} outside screen"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drift_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let drift_dir = Vector2::new(drift_angle.cos(), drift_angle.sin());
    let sensor_noise = Normal::new(0.0, preset.cornea_sigma_mm.max(1e-300)).unwrap();
    let depth_noise = Normal::new(0.0, preset.depth_jitter_mm.max(1e-300)).unwrap();

    let dwell_frames = (dwell_s * rate_hz).round() as usize;
    let mut frames = Vec::new();
    let mut frame: u64 = 0;
    let dt = 1.0 / rate_hz;
    let mut prev = ScreenPoint::new(map.screen_w / 2.0, map.screen_h / 2.0);

    for (k, target) in targets.iter().enumerate() {
        // Saccade from the previous position in 3 linear jumps.
        for s in 1..=SACCADE_FRAMES {
            let t = frame as f64 * dt;
            let u = s as f64 / SACCADE_FRAMES as f64;
            let g = ScreenPoint::new(
                prev.x + u * (target.x - prev.x),
                prev.y + u * (target.y - prev.y),
            );
            frames.push(make_fixation_frame(
                frame, t, g, k as u32, *target, None, map, preset, &mut rng,
                &sensor_noise, &depth_noise, drift_dir,
            ));
            frame += 1;
        }
        for _ in 0..dwell_frames {
            let t = frame as f64 * dt;
            frames.push(make_fixation_frame(
                frame,
                t,
                *target,
                k as u32,
                *target,
                Some(k as u32),
                map,
                preset,
                &mut rng,
                &sensor_noise,
                &depth_noise,
                drift_dir,
            ));
            frame += 1;
        }
        prev = *target;
    }
    Ok(frames)
}

#[allow(clippy::too_many_arguments)]
fn make_fixation_frame(
    frame: u64,
    t: f64,
    gaze: ScreenPoint,
    object_id: u32,
    object_pos: ScreenPoint,
    followed: Option<u32>,
    map: &GroundTruthMap,
    preset: &NoisePreset,
    rng: &mut ChaCha8Rng,
    sensor_noise: &Normal<f64>,
    depth_noise: &Normal<f64>,
    drift_dir: Vector2<f64>,
) -> FrameRecord {
    let mut cornea = map.map(gaze, t);
    cornea.x += preset.drift_mm_per_s * t * drift_dir.x;
    cornea.y += preset.drift_mm_per_s * t * drift_dir.y;
    if preset.cornea_sigma_mm > 0.0 {
        cornea.x += sensor_noise.sample(rng);
        cornea.y += sensor_noise.sample(rng);
        cornea.z += sensor_noise.sample(rng);
    }
    if preset.depth_jitter_mm > 0.0 {
        let j: f64 = depth_noise.sample(rng);
        cornea.z += j.clamp(-3.0 * preset.depth_jitter_mm, 3.0 * preset.depth_jitter_mm);
    }
    FrameRecord {
        frame,
        t,
        cornea,
        objects: vec![(object_id, object_pos)],
        true_gaze: gaze,
        followed,
    }
}

/// A five-object mobile-game scene sweeping the whole screen, used as the
/// default simulation scenario.
pub fn default_scene(duration_s: f64, rate_hz: f64, screen_w: f64, screen_h: f64) -> SceneScript {
    let w = screen_w;
    let h = screen_h;
    SceneScript {
        duration_s,
        rate_hz,
        objects: vec![
            ObjectSpec {
                id: 0,
                kind: TrajectoryKind::Linear {
                    from: (0.08 * w, 0.15 * h),
                    to: (0.92 * w, 0.35 * h),
                },
                speed_px_s: 120.0,
            },
            ObjectSpec {
                id: 1,
                kind: TrajectoryKind::Circular {
                    center: (0.5 * w, 0.5 * h),
                    radius: 0.32 * h,
                    phase: 0.7,
                },
                speed_px_s: 90.0,
            },
            ObjectSpec {
                id: 2,
                kind: TrajectoryKind::WaypointSpline {
                    waypoints: vec![
                        (0.12 * w, 0.85 * h),
                        (0.45 * w, 0.2 * h),
                        (0.85 * w, 0.8 * h),
                        (0.6 * w, 0.9 * h),
                        (0.2 * w, 0.45 * h),
                    ],
                },
                speed_px_s: 140.0,
            },
            ObjectSpec {
                id: 3,
                kind: TrajectoryKind::Linear {
                    from: (0.9 * w, 0.9 * h),
                    to: (0.1 * w, 0.1 * h),
                },
                speed_px_s: 160.0,
            },
            ObjectSpec {
                id: 4,
                kind: TrajectoryKind::WaypointSpline {
                    waypoints: vec![
                        (0.85 * w, 0.15 * h),
                        (0.65 * w, 0.7 * h),
                        (0.3 * w, 0.75 * h),
                        (0.15 * w, 0.3 * h),
                        (0.55 * w, 0.1 * h),
                    ],
                },
                speed_px_s: 110.0,
            },
        ],
    }
}

/// A gaze script hopping between the scene's objects with occasional free
/// viewing; deterministic for a given seed.
pub fn default_gaze_script(scene: &SceneScript, seed: u64) -> GazeScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let ids: Vec<u32> = scene.objects.iter().map(|o| o.id).collect();
    let mut segments = Vec::new();
    let mut t = 0.0;
    let mut last: Option<u32> = None;
    while t < scene.duration_s {
        // Mostly pursuit; every few segments a short free-view break.
        let free = !segments.is_empty() && rng.gen_bool(0.18);
        let (follow, len) = if free {
            (None, rng.gen_range(0.5..1.0))
        } else {
            let mut id = ids[rng.gen_range(0..ids.len())];
            if Some(id) == last && ids.len() > 1 {
                id = ids[(ids.iter().position(|x| *x == id).unwrap() + 1) % ids.len()];
            }
            last = Some(id);
            (Some(id), rng.gen_range(1.8..3.5))
        };
        let end = (t + len).min(scene.duration_s);
        segments.push(GazeSegment {
            start_s: t,
            end_s: end,
            follow,
        });
        t = end;
    }
    GazeScript {
        segments,
        lag_ms: 30.0,
        pursuit_sigma_px: 2.5,
    }
}
