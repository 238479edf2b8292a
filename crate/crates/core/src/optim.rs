//! The optimization loop: warmup on a coarse sphere with frozen cameras,
//! then joint refinement of shape and cameras with periodic remeshing.

use std::fs;
use std::ops::Range;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use crate::camera::{cameras_to_json, Camera};
use crate::losses::{LossReport, LossWeights};
use crate::mesh::{make_icosphere, TriMesh};
use crate::pipeline::{build_plan, gradient_with_plan, LossConfig, ParamLayout, PipelineError, CAM_PARAMS};
use crate::scene::Scene;
use crate::topology::remesh;

/// Consecutive failed iterations after which the run is aborted.
pub const MAX_NONFINITE_STREAK: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub total_iters: usize,
    pub warmup_iters: usize,
    /// Iterations at which the warmup sphere is subdivided.
    pub subdivide_at: Vec<usize>,
    /// Fractions of `total_iters` at which the shape is remeshed.
    pub remesh_fracs: Vec<f64>,
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    /// Warm restart period of the cosine schedule; `None` means `total_iters / 5`.
    pub restart_period: Option<usize>,
    /// Maximum gradient norm of each parameter block.
    pub clip_norm: f64,
    /// Learning-rate multiplier of the camera blocks.
    pub camera_lr_scale: f64,
    pub k: usize,
    pub blur_start: f64,
    pub blur_end: f64,
    pub weights: LossWeights,
    pub voxel_resolution: usize,
    pub seed: u64,
    /// Subdivision level and radius of the initial sphere.
    pub init_level: u32,
    pub init_radius: f64,
    /// Writes a checkpoint every this many iterations; 0 disables checkpoints.
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> OptimConfig {
        OptimConfig {
            total_iters: 50_000,
            warmup_iters: 500,
            subdivide_at: vec![100, 300],
            remesh_fracs: vec![0.2, 0.4, 0.6],
            lr0: 0.01,
            lr_min: 0.0,
            momentum: 0.9,
            restart_period: None,
            clip_norm: 1.0,
            camera_lr_scale: 0.1,
            k: 6,
            blur_start: 5e-5,
            blur_end: 1e-6,
            weights: LossWeights::default(),
            voxel_resolution: 32,
            seed: 0,
            init_level: 0,
            init_radius: 0.5,
            checkpoint_every: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.total_iters > 0, "total_iters must be positive");
        ensure!(
            self.warmup_iters < self.total_iters,
            "warmup_iters ({}) must be below total_iters ({})",
            self.warmup_iters,
            self.total_iters
        );
        ensure!(self.blur_start > 0.0 && self.blur_end > 0.0, "blur radii must be positive");
        ensure!(self.blur_end <= self.blur_start, "blur_end must not exceed blur_start");
        ensure!(self.lr0 > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr0, "invalid learning rates");
        ensure!((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)");
        ensure!(self.clip_norm > 0.0, "clip_norm must be positive");
        ensure!(self.camera_lr_scale >= 0.0 && self.camera_lr_scale.is_finite(), "camera_lr_scale must be finite and non-negative");
        ensure!(self.k > 0, "k must be positive");
        ensure!(self.voxel_resolution >= 2, "voxel_resolution must be at least 2");
        ensure!(self.init_radius > 0.0, "init_radius must be positive");
        ensure!(self.restart_period != Some(0), "restart_period must be positive");
        for f in &self.remesh_fracs {
            ensure!(*f > 0.0 && *f < 1.0, "remesh fraction {f} outside (0, 1)");
        }
        for w in [
            self.weights.tex_l1,
            self.weights.tex_pyramid,
            self.weights.mask_mse,
            self.weights.mask_bidt,
            self.weights.edge,
            self.weights.laplacian,
        ] {
            ensure!(w >= 0.0 && w.is_finite(), "loss weights must be finite and non-negative");
        }
        Ok(())
    }

    /// Sets the iteration budget. The warmup keeps at most a sixth of the
    /// budget; when it has to shrink, the subdivision iterations shrink with it.
    pub fn with_iters(mut self, total: usize) -> OptimConfig {
        self.total_iters = total;
        let cap = total / 6;
        if self.warmup_iters > cap && self.warmup_iters > 0 {
            let s = cap as f64 / self.warmup_iters as f64;
            self.warmup_iters = cap;
            self.subdivide_at = self.subdivide_at.iter().map(|&i| (i as f64 * s).round() as usize).collect();
        }
        self
    }

    pub fn period(&self) -> usize {
        self.restart_period.unwrap_or(self.total_iters / 5).max(1)
    }

    /// Iterations at which a remesh happens, in increasing order.
    pub fn remesh_iters(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .remesh_fracs
            .iter()
            .map(|f| (f * self.total_iters as f64).round() as usize)
            .filter(|&i| i > 0 && i < self.total_iters)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Blur radius decaying geometrically from `blur_start` to `blur_end`.
pub fn blur_schedule(iter: usize, cfg: &OptimConfig) -> f64 {
    if iter == 0 {
        return cfg.blur_start;
    }
    if iter >= cfg.total_iters {
        return cfg.blur_end;
    }
    let s = iter as f64 / cfg.total_iters as f64;
    cfg.blur_start * (cfg.blur_end / cfg.blur_start).powf(s)
}

/// Cosine annealing with warm restarts.
pub fn cosine_lr(iter: usize, period: usize, lr0: f64, lr_min: f64) -> f64 {
    assert!(period > 0, "cosine period must be positive");
    let phase = (iter % period) as f64 / period as f64;
    lr_min + (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * phase).cos()) / 2.0
}

/// A flat-vector range clipped as one unit, with its learning-rate multiplier.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub range: Range<usize>,
    pub lr_scale: f64,
}

/// Blocks clipped independently: all offsets, then `r`, `t` and `f` of each
/// camera. Camera blocks are left out when `camera_lr_scale` is `None`
/// (cameras frozen).
pub fn param_blocks(layout: ParamLayout, camera_lr_scale: Option<f64>) -> Vec<ParamBlock> {
    let mut out = Vec::new();
    if layout.vertices > 0 {
        out.push(ParamBlock {
            range: 0..3 * layout.vertices,
            lr_scale: 1.0,
        });
    }
    if let Some(lr_scale) = camera_lr_scale {
        for i in 0..layout.cameras {
            let o = layout.cam_offset(i);
            for range in [o..o + 3, o + 3..o + 6, o + 6..o + CAM_PARAMS] {
                out.push(ParamBlock { range, lr_scale });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    /// Step applied; the number of blocks whose gradient was clipped.
    Applied { clipped: usize },
    /// Gradient was not finite; nothing changed.
    Skipped,
}

/// Per-block norm clipping followed by a heavy-ball momentum step
/// `v ← m·v + g`, `x ← x − lr·s·v` with `s` the block's multiplier.
/// Coordinates outside `blocks` are untouched.
pub fn clip_and_step(
    params: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    blocks: &[ParamBlock],
    lr: f64,
    momentum: f64,
    max_norm: f64,
) -> StepOutcome {
    assert_eq!(params.len(), grad.len());
    assert_eq!(params.len(), velocity.len());
    if blocks.iter().any(|b| grad[b.range.clone()].iter().any(|g| !g.is_finite())) {
        log::warn!("non-finite gradient, step skipped");
        return StepOutcome::Skipped;
    }
    let mut clipped = 0;
    for b in blocks {
        let norm = grad[b.range.clone()].iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if norm > max_norm {
            clipped += 1;
            max_norm / norm
        } else {
            1.0
        };
        let step = lr * b.lr_scale;
        for i in b.range.clone() {
            velocity[i] = momentum * velocity[i] + scale * grad[i];
            params[i] -= step * velocity[i];
        }
    }
    StepOutcome::Applied { clipped }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub phase: Phase,
    pub lr: f64,
    pub blur: f64,
    pub vertices: usize,
    pub skipped: bool,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// Mutable state of a run between iterations.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub iteration: usize,
    pub velocity: Vec<f64>,
    pub blur: f64,
    pub lr: f64,
    pub phase: Phase,
    pub history: Vec<HistoryRow>,
}

impl OptimState {
    fn new(layout: ParamLayout, cfg: &OptimConfig) -> OptimState {
        OptimState {
            iteration: 0,
            velocity: vec![0.0; layout.len()],
            blur: cfg.blur_start,
            lr: cfg.lr0,
            phase: Phase::Warmup,
            history: Vec::new(),
        }
    }

    fn reset_velocity(&mut self, layout: ParamLayout) {
        self.velocity = vec![0.0; layout.len()];
    }
}

/// Topology changes during a run.
#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Subdivided { iter: usize, vertices: usize },
    Remeshed { iter: usize, vertices: usize, components: usize },
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub mesh: TriMesh,
    pub cameras: Vec<Camera>,
    pub initial_mesh: TriMesh,
    /// Mesh right after each remesh.
    pub remeshed: Vec<TriMesh>,
    pub history: Vec<HistoryRow>,
    pub events: Vec<Event>,
}

fn loss_config(cfg: &OptimConfig, mesh: &TriMesh, blur: f64, phase: Phase) -> Result<LossConfig> {
    let mut lc = LossConfig::new(mesh.mean_edge_length()?);
    lc.k = cfg.k;
    lc.blur = blur;
    lc.weights = match phase {
        Phase::Warmup => cfg.weights.without_texture(),
        Phase::Joint => cfg.weights,
    };
    Ok(lc)
}

fn set_offsets(mesh: &mut TriMesh, flat: &[f64]) {
    for (i, o) in mesh.offsets_mut().iter_mut().enumerate() {
        o.x = flat[3 * i];
        o.y = flat[3 * i + 1];
        o.z = flat[3 * i + 2];
    }
}

/// Parameters right after an iteration's update.
#[derive(Clone, Copy, Debug)]
pub struct IterView<'a> {
    pub iter: usize,
    pub phase: Phase,
    pub layout: ParamLayout,
    /// Current shape, normalized scene frame.
    pub mesh: &'a TriMesh,
    pub params: &'a [f64],
    pub velocity: &'a [f64],
    pub lr: f64,
    pub outcome: StepOutcome,
}

/// Runs the full schedule on `scene` starting from a sphere at the origin and
/// the scene's cameras. Checkpoints go to `checkpoints` when given.
pub fn optimize(scene: &Scene, cfg: &OptimConfig, checkpoints: Option<&Path>) -> Result<OptimResult> {
    optimize_observed(scene, cfg, checkpoints, &mut |_| {})
}

/// [`optimize`] calling `observer` after every iteration.
pub fn optimize_observed(
    scene: &Scene,
    cfg: &OptimConfig,
    checkpoints: Option<&Path>,
    observer: &mut dyn FnMut(&IterView),
) -> Result<OptimResult> {
    cfg.validate()?;
    ensure!(scene.len() >= 2, "reconstruction needs at least 2 views, scene has {}", scene.len());
    let mut mesh = make_icosphere(cfg.init_level, cfg.init_radius);
    let initial_mesh = mesh.clone();
    // the edge rest length is the mean edge length of the current tessellation
    // and is refreshed whenever the topology changes
    let mut rest_mesh = mesh.clone();
    let layout = |m: &TriMesh| ParamLayout {
        vertices: m.num_vertices(),
        cameras: scene.len(),
    };
    let mut state = OptimState::new(layout(&mesh), cfg);
    let mut flat = layout(&mesh).flatten(mesh.offsets(), &scene.cameras);
    let remesh_at = cfg.remesh_iters();
    let period = cfg.period();
    let mut events = Vec::new();
    let mut remeshed = Vec::new();
    let mut streak = 0usize;

    for iter in 0..cfg.total_iters {
        state.iteration = iter;
        let subdivide = iter > 0 && iter < cfg.warmup_iters && cfg.subdivide_at.contains(&iter);
        let remesh_now = remesh_at.contains(&iter);
        if subdivide || remesh_now {
            set_offsets(&mut mesh, &flat);
            let cams = current_cameras(layout(&mesh), &flat);
            if subdivide {
                mesh = mesh.subdivide();
                events.push(Event::Subdivided {
                    iter,
                    vertices: mesh.num_vertices(),
                });
            } else {
                mesh = remesh(&mesh, &scene.masks, &cams, cfg.voxel_resolution)
                    .with_context(|| format!("remesh at iteration {iter}"))?;
                events.push(Event::Remeshed {
                    iter,
                    vertices: mesh.num_vertices(),
                    components: mesh.connected_components(),
                });
                remeshed.push(mesh.clone());
            }
            rest_mesh = mesh.clone();
            flat = layout(&mesh).flatten(mesh.offsets(), &cams);
            state.reset_velocity(layout(&mesh));
        }

        state.phase = if iter < cfg.warmup_iters { Phase::Warmup } else { Phase::Joint };
        state.blur = blur_schedule(iter, cfg);
        state.lr = cosine_lr(iter, period, cfg.lr0, cfg.lr_min);
        let lc = loss_config(cfg, &rest_mesh, state.blur, state.phase)?;
        set_offsets(&mut mesh, &flat);
        let cams_now = current_cameras(layout(&mesh), &flat);
        let plan = build_plan(scene, &mesh, &cams_now, &lc)?;
        let (report, outcome) = match gradient_with_plan(&plan, scene, &flat) {
            Ok((report, grad)) => {
                let cam_lr = (state.phase == Phase::Joint).then_some(cfg.camera_lr_scale);
                let blocks = param_blocks(plan.layout, cam_lr);
                let out = clip_and_step(&mut flat, &grad, &mut state.velocity, &blocks, state.lr, cfg.momentum, cfg.clip_norm);
                (report, out)
            }
            Err(PipelineError::NonFinite(what)) => {
                log::warn!("iteration {iter}: non-finite {what}, step skipped");
                (nan_report(), StepOutcome::Skipped)
            }
            Err(e) => return Err(e.into()),
        };
        if outcome == StepOutcome::Skipped {
            streak += 1;
            if streak > MAX_NONFINITE_STREAK {
                bail!("aborting at iteration {iter}: {streak} consecutive iterations with non-finite loss or gradient");
            }
        } else {
            streak = 0;
        }
        set_offsets(&mut mesh, &flat);
        observer(&IterView {
            iter,
            phase: state.phase,
            layout: layout(&mesh),
            mesh: &mesh,
            params: &flat,
            velocity: &state.velocity,
            lr: state.lr,
            outcome,
        });
        state.history.push(HistoryRow {
            iter,
            phase: state.phase,
            lr: state.lr,
            blur: state.blur,
            vertices: mesh.num_vertices(),
            skipped: outcome == StepOutcome::Skipped,
            loss: report,
        });
        if iter % 100 == 0 || iter + 1 == cfg.total_iters {
            log::info!(
                "iter {iter:6} loss {:.6} lr {:.2e} blur {:.2e} verts {}",
                report.total,
                state.lr,
                state.blur,
                mesh.num_vertices()
            );
        }
        if let Some(dir) = checkpoints {
            if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
                set_offsets(&mut mesh, &flat);
                let cams_cp = current_cameras(layout(&mesh), &flat);
                write_checkpoint(dir, iter + 1, &mesh, &cams_cp, scene, &state)?;
            }
        }
    }
    set_offsets(&mut mesh, &flat);
    let cameras = current_cameras(layout(&mesh), &flat).into_iter().map(Camera::canonicalized).collect();
    Ok(OptimResult {
        mesh,
        cameras,
        initial_mesh,
        remeshed,
        history: state.history,
        events,
    })
}

fn current_cameras(layout: ParamLayout, flat: &[f64]) -> Vec<Camera> {
    layout.cameras_from::<f64>(flat).iter().map(|c| c.value()).collect()
}

fn nan_report() -> LossReport {
    LossReport {
        tex_l1: f64::NAN,
        tex_pyramid: f64::NAN,
        mask_mse: f64::NAN,
        mask_bidt: f64::NAN,
        edge: f64::NAN,
        laplacian: f64::NAN,
        total: f64::NAN,
    }
}

#[derive(Serialize)]
struct CheckpointState<'a> {
    iteration: usize,
    blur: f64,
    lr: f64,
    phase: Phase,
    velocity: &'a [f64],
}

fn write_checkpoint(dir: &Path, iter: usize, mesh: &TriMesh, cams: &[Camera], scene: &Scene, state: &OptimState) -> Result<()> {
    let d = dir.join(format!("iter_{iter:06}"));
    fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    let norm = scene.normalization;
    let plain = TriMesh::new(mesh.vertices(), mesh.faces().to_vec())?;
    let world = norm.mesh_inv(&plain);
    world.write_obj(&d.join("mesh.obj"))?;
    let world_cams: Vec<Camera> = cams.iter().map(|c| norm.camera_inv(c)).collect();
    fs::write(d.join("cameras.json"), cameras_to_json(&world_cams))?;
    let st = CheckpointState {
        iteration: iter,
        blur: state.blur,
        lr: state.lr,
        phase: state.phase,
        velocity: &state.velocity,
    };
    fs::write(d.join("state.json"), serde_json::to_string(&st)?)?;
    Ok(())
}

const HISTORY_HEADER: [&str; 13] = [
    "iter",
    "phase",
    "lr",
    "blur",
    "vertices",
    "skipped",
    "total",
    "tex_l1",
    "tex_pyramid",
    "mask_mse",
    "mask_bidt",
    "edge",
    "laplacian",
];

/// Loss history as CSV text; floats are written in shortest round-trip form.
pub fn history_csv(history: &[HistoryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HISTORY_HEADER)?;
    for r in history {
        let phase = match r.phase {
            Phase::Warmup => "warmup",
            Phase::Joint => "joint",
        };
        let l = r.loss;
        w.write_record([
            r.iter.to_string(),
            phase.to_string(),
            r.lr.to_string(),
            r.blur.to_string(),
            r.vertices.to_string(),
            r.skipped.to_string(),
            l.total.to_string(),
            l.tex_l1.to_string(),
            l.tex_pyramid.to_string(),
            l.mask_mse.to_string(),
            l.mask_bidt.to_string(),
            l.edge.to_string(),
            l.laplacian.to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::ImageSize;
    use crate::scene::{synthesize, SynthConfig};
    use crate::shapes::Shape;
    use proptest::prelude::*;

    fn small_scene() -> Scene {
        let synth = synthesize(
            &Shape::Sphere.mesh(16).unwrap(),
            &SynthConfig {
                views: 3,
                noise_deg: 3.0,
                size: ImageSize::square(20),
                seed: 3,
                ..SynthConfig::default()
            },
        )
        .unwrap();
        synth.to_scene().unwrap()
    }

    fn small_config() -> OptimConfig {
        OptimConfig {
            total_iters: 10,
            warmup_iters: 4,
            subdivide_at: vec![2],
            remesh_fracs: vec![0.7],
            voxel_resolution: 12,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn blur_endpoints_are_exact() {
        let cfg = OptimConfig::default();
        assert_eq!(blur_schedule(0, &cfg), 5e-5);
        assert_eq!(blur_schedule(cfg.total_iters, &cfg), 1e-6);
        let mid = blur_schedule(cfg.total_iters / 2, &cfg);
        assert!((mid - (5e-5f64 * 1e-6).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cosine_restarts_each_period() {
        assert_eq!(cosine_lr(0, 100, 0.01, 0.0), 0.01);
        assert_eq!(cosine_lr(100, 100, 0.01, 0.0), 0.01);
        assert!((cosine_lr(50, 100, 0.01, 0.0) - 0.005).abs() < 1e-15);
        assert!(cosine_lr(99, 100, 0.01, 0.0) < 1e-5);
        assert!((cosine_lr(150, 100, 0.01, 0.002) - 0.006).abs() < 1e-15);
    }

    fn one_block(n: usize) -> Vec<ParamBlock> {
        vec![ParamBlock { range: 0..n, lr_scale: 1.0 }]
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut x = vec![1.0, 2.0];
        let mut v = vec![0.0; 2];
        let out = clip_and_step(&mut x, &[0.3, 0.4], &mut v, &one_block(2), 1.0, 0.0, 1.0);
        assert_eq!(out, StepOutcome::Applied { clipped: 0 });
        assert_eq!(x, vec![0.7, 1.6]);
    }

    #[test]
    fn clip_halves_double_norm() {
        let mut x = vec![0.0, 0.0];
        let mut v = vec![0.0; 2];
        let out = clip_and_step(&mut x, &[1.2, 1.6], &mut v, &one_block(2), 1.0, 0.0, 1.0);
        assert_eq!(out, StepOutcome::Applied { clipped: 1 });
        assert!((x[0] + 0.6).abs() < 1e-15 && (x[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut x = vec![0.0];
        let mut v = vec![0.0];
        clip_and_step(&mut x, &[0.5], &mut v, &one_block(1), 0.1, 0.9, 1.0);
        clip_and_step(&mut x, &[0.5], &mut v, &one_block(1), 0.1, 0.9, 1.0);
        assert!((v[0] - 0.95).abs() < 1e-15);
        assert!((x[0] + 0.145).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_gradient_skips_step() {
        let mut x = vec![1.0, 1.0];
        let mut v = vec![0.5, 0.5];
        let out = clip_and_step(&mut x, &[f64::NAN, 0.0], &mut v, &one_block(2), 1.0, 0.9, 1.0);
        assert_eq!(out, StepOutcome::Skipped);
        assert_eq!(x, vec![1.0, 1.0]);
        assert_eq!(v, vec![0.5, 0.5]);
    }

    #[test]
    fn blocks_clip_independently_and_skip_outside() {
        let mut x = vec![0.0; 5];
        let mut v = vec![0.0; 5];
        let blocks = vec![
            ParamBlock { range: 0..2, lr_scale: 1.0 },
            ParamBlock { range: 2..4, lr_scale: 0.5 },
        ];
        clip_and_step(&mut x, &[3.0, 4.0, 0.1, 0.0, 7.0], &mut v, &blocks, 1.0, 0.0, 1.0);
        assert!((x[0] + 0.6).abs() < 1e-15 && (x[1] + 0.8).abs() < 1e-15);
        assert!((x[2] + 0.05).abs() < 1e-15);
        assert_eq!(x[4], 0.0);
    }

    #[test]
    fn frozen_cameras_have_no_blocks() {
        let layout = ParamLayout { vertices: 4, cameras: 2 };
        assert_eq!(param_blocks(layout, None).len(), 1);
        let free = param_blocks(layout, Some(0.1));
        assert_eq!(free.len(), 7);
        let covered: usize = free.iter().map(|b| b.range.len()).sum();
        assert_eq!(covered, layout.len());
    }

    proptest! {
        #[test]
        fn clipped_block_step_is_bounded(g in proptest::collection::vec(-100.0..100.0f64, 1..20), max in 0.01..10.0f64) {
            let n = g.len();
            let mut x = vec![0.0; n];
            let mut v = vec![0.0; n];
            clip_and_step(&mut x, &g, &mut v, &one_block(n), 1.0, 0.0, max);
            let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!(norm <= max * (1.0 + 1e-12));
        }

        #[test]
        fn blur_is_monotone(a in 0usize..50_000, b in 0usize..50_000) {
            let cfg = OptimConfig::default();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(blur_schedule(lo, &cfg) >= blur_schedule(hi, &cfg));
        }

        #[test]
        fn cosine_stays_in_range(i in 0usize..10_000, p in 1usize..1000) {
            let lr = cosine_lr(i, p, 0.01, 0.001);
            prop_assert!((0.001 - 1e-15..=0.01 + 1e-15).contains(&lr));
        }
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        let bad = OptimConfig {
            warmup_iters: 10,
            total_iters: 10,
            ..OptimConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimConfig {
            blur_end: 1e-4,
            ..OptimConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimConfig {
            momentum: 1.0,
            ..OptimConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = OptimConfig::default().with_iters(3000);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: OptimConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: OptimConfig = serde_json::from_str(r#"{"total_iters": 900}"#).unwrap();
        assert_eq!(partial.lr0, 0.01);
        assert!(serde_json::from_str::<OptimConfig>(r#"{"total_iter": 900}"#).is_err());
    }

    #[test]
    fn with_iters_scales_warmup() {
        let cfg = OptimConfig::default().with_iters(600);
        assert_eq!(cfg.warmup_iters, 100);
        assert_eq!(cfg.subdivide_at, vec![20, 60]);
        cfg.validate().unwrap();
        let full = OptimConfig::default().with_iters(50_000);
        assert_eq!(full.warmup_iters, 500);
        assert_eq!(full.subdivide_at, vec![100, 300]);
    }

    #[test]
    fn remesh_iterations_follow_fractions() {
        let cfg = OptimConfig::default().with_iters(3000);
        assert_eq!(cfg.remesh_iters(), vec![600, 1200, 1800]);
    }

    #[test]
    fn warmup_freezes_cameras_bytewise() {
        let scene = small_scene();
        let cfg = small_config();
        let start = ParamLayout { vertices: 0, cameras: scene.len() }.flatten(&[], &scene.cameras);
        let mut seen_warmup = 0;
        let mut moved_after = false;
        optimize_observed(&scene, &cfg, None, &mut |v| {
            let cams = &v.params[v.layout.cam_offset(0)..];
            let same = cams.iter().zip(&start).all(|(a, b)| a.to_bits() == b.to_bits());
            match v.phase {
                Phase::Warmup => {
                    seen_warmup += 1;
                    assert!(same, "camera moved during warmup at iteration {}", v.iter);
                }
                Phase::Joint => moved_after |= !same,
            }
        })
        .unwrap();
        assert_eq!(seen_warmup, cfg.warmup_iters);
        assert!(moved_after);
    }

    #[test]
    fn topology_changes_reset_offsets_and_velocity() {
        let scene = small_scene();
        let cfg = small_config();
        let mut reset_iters = Vec::new();
        let res = optimize_observed(&scene, &cfg, None, &mut |v| {
            if v.iter == 2 || v.iter == 7 {
                // offsets and velocity restart from zero, so one step lands at -lr·v
                let n = 3 * v.layout.vertices;
                for i in 0..n {
                    assert_eq!(v.params[i], -(v.lr * v.velocity[i]));
                }
                reset_iters.push(v.iter);
            }
        })
        .unwrap();
        assert_eq!(reset_iters, vec![2, 7]);
        assert!(matches!(res.events[0], Event::Subdivided { iter: 2, vertices: 42 }));
        assert!(matches!(res.events[1], Event::Remeshed { iter: 7, .. }));
        assert_eq!(res.remeshed.len(), 1);
    }

    #[test]
    fn warmup_history_has_no_texture_terms() {
        let scene = small_scene();
        let res = optimize(&scene, &small_config(), None).unwrap();
        for r in &res.history {
            if r.phase == Phase::Warmup {
                assert_eq!(r.loss.tex_l1, 0.0);
                assert_eq!(r.loss.tex_pyramid, 0.0);
            }
        }
        assert!(res.history.iter().any(|r| r.phase == Phase::Joint && r.loss.tex_l1 > 0.0));
    }

    #[test]
    fn runs_are_deterministic() {
        let scene = small_scene();
        let a = history_csv(&optimize(&scene, &small_config(), None).unwrap().history).unwrap();
        let b = history_csv(&optimize(&scene, &small_config(), None).unwrap().history).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 11);
        assert!(a.starts_with("iter,phase,lr,blur,vertices,skipped,total,"));
    }

    #[test]
    fn checkpoints_are_written() {
        let scene = small_scene();
        let dir = tempfile::tempdir().unwrap();
        let cfg = OptimConfig {
            checkpoint_every: 5,
            ..small_config()
        };
        optimize(&scene, &cfg, Some(dir.path())).unwrap();
        for it in ["iter_000005", "iter_000010"] {
            for f in ["mesh.obj", "cameras.json", "state.json"] {
                assert!(dir.path().join(it).join(f).exists(), "{it}/{f}");
            }
        }
    }
}
