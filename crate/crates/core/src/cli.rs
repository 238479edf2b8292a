//! Command-line interface.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::camera::{cameras_from_json, Camera, ImageSize};
use crate::eval::{evaluate, EVAL_SAMPLES};
use crate::gradcheck::{run_suite, SuiteConfig};
use crate::imageio::GrayImage;
use crate::mesh::TriMesh;
use crate::optim::{history_csv, optimize, OptimConfig};
use crate::raster::{depth_map, rasterize, soft_silhouette, BlendParams};
use crate::scene::{export_result, load_scene, synthesize, Scene, SynthConfig, TextureSpec};
use crate::shapes::Shape;
use crate::texture::{render_textured, RenderSettings, TextureConfig};

#[derive(Debug, Parser)]
#[command(name = "diffstereo", version, about = "Textured mesh and camera reconstruction from a few noisy posed views")]
pub struct Cli {
    /// Optimizer settings as JSON (either a bare optimizer config or a run's config.json).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Iteration budget; the warmup shrinks to fit short budgets.
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    /// Image width and height of synthesized views; for reconstruction,
    /// the input views are box-downsampled to this width.
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    /// Rotation noise of synthesized input cameras, in degrees.
    #[arg(long, global = true)]
    pub noise_deg: Option<f64>,
    /// Disables the texture loss.
    #[arg(long, global = true)]
    pub no_texture: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Renders a synthetic dataset with ground truth.
    Synth(SynthArgs),
    /// Reconstructs mesh and cameras from a scene directory.
    Reconstruct(ReconstructArgs),
    /// Scores a reconstruction against the scene's ground truth.
    Eval(EvalArgs),
    /// Depth, silhouette and texture renders of a reconstruction or checkpoint.
    Render(RenderArgs),
    /// Finite-difference checks of all loss gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TextureKind {
    Checker,
    Gradient,
    /// Per-vertex colors read from the `--mesh` PLY file.
    VertexColors,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Built-in object: sphere, notch-sphere, two-spheres or cube.
    #[arg(long, default_value = "notch-sphere")]
    pub shape: Shape,
    /// Ground-truth mesh file (OBJ, or PLY with vertex colors); overrides `--shape`.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    #[arg(long, value_enum, default_value_t = TextureKind::Checker)]
    pub texture: TextureKind,
    /// Grid resolution used to mesh the built-in shapes.
    #[arg(long, default_value_t = 48)]
    pub shape_resolution: usize,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Writes a checkpoint every this many iterations under `<out>/checkpoints`.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory holding the reconstruction's mesh.obj and cameras.json.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = EVAL_SAMPLES)]
    pub samples: usize,
    /// Also writes the JSON report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Directory holding mesh.obj or mesh.ply and cameras.json.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Blur radius of the soft silhouette render.
    #[arg(long, default_value_t = 1e-5)]
    pub blur: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
}

/// Settings of a reconstruction, written next to its outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub scene: PathBuf,
    pub output: PathBuf,
    pub no_texture: bool,
    pub resolution: Option<usize>,
    pub optim: OptimConfig,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Reconstruct(a) => reconstruct(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Render(a) => render(a),
        Command::Gradcheck(a) => gradcheck(cli, a),
    }
}

/// Optimizer settings from `--config` with the command-line overrides applied.
pub fn optim_config(cli: &Cli) -> Result<OptimConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            let inner = match value.get("optim") {
                Some(o) => o.clone(),
                None => value,
            };
            serde_json::from_value(inner).with_context(|| format!("invalid optimizer config in {}", p.display()))?
        }
        None => OptimConfig::default(),
    };
    if let Some(n) = cli.iters {
        cfg = cfg.with_iters(n);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.no_texture {
        cfg.weights = cfg.weights.without_texture();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let (mesh, texture) = match (&a.mesh, a.texture) {
        (Some(p), TextureKind::VertexColors) => {
            let (m, colors) = TriMesh::read_ply(p).with_context(|| format!("reading {}", p.display()))?;
            ensure!(!colors.is_empty(), "{} has no vertex colors", p.display());
            (m, TextureSpec::VertexColors(colors))
        }
        (None, TextureKind::VertexColors) => bail!("--texture vertex-colors needs a PLY file given with --mesh"),
        (mesh, kind) => {
            let m = match mesh {
                Some(p) if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) => TriMesh::read_ply(p)?.0,
                Some(p) => TriMesh::read_obj(p).with_context(|| format!("reading {}", p.display()))?,
                None => a.shape.mesh(a.shape_resolution)?,
            };
            let t = match kind {
                TextureKind::Gradient => TextureSpec::Gradient,
                _ => TextureSpec::default(),
            };
            (m, t)
        }
    };
    let cfg = SynthConfig {
        views: a.views,
        noise_deg: cli.noise_deg.unwrap_or(5.0),
        size: ImageSize::square(cli.resolution.unwrap_or(64)),
        seed: cli.seed.unwrap_or(0),
        texture,
        ..SynthConfig::default()
    };
    ensure!(cfg.views >= 1, "--views must be positive");
    ensure!(cfg.size.width >= 2, "--resolution must be at least 2");
    let s = synthesize(&mesh, &cfg)?;
    s.write(&a.out)?;
    println!("wrote {} views to {}", cfg.views, a.out.display());
    Ok(())
}

fn downsample_to(scene: Scene, width: usize) -> Result<Scene> {
    let w = scene.size.width;
    ensure!(width > 0 && width <= w, "--resolution {width} must lie in 1..={w}");
    ensure!(w.is_multiple_of(width), "--resolution {width} must divide the image width {w}");
    Ok(if width == w { scene } else { scene.downsampled(w / width) })
}

fn reconstruct(cli: &Cli, a: &ReconstructArgs) -> Result<()> {
    let mut cfg = optim_config(cli)?;
    if let Some(n) = a.checkpoint_every {
        cfg.checkpoint_every = n;
    }
    let mut scene = load_scene(&a.scene)?;
    if let Some(r) = cli.resolution {
        scene = downsample_to(scene, r)?;
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let run = RunConfig {
        scene: a.scene.clone(),
        output: a.out.clone(),
        no_texture: cli.no_texture,
        resolution: cli.resolution,
        optim: cfg.clone(),
    };
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&run)?)?;
    let checkpoints = a.out.join("checkpoints");
    let res = optimize(&scene, &cfg, (cfg.checkpoint_every > 0).then_some(checkpoints.as_path()))?;
    fs::write(a.out.join("history.csv"), history_csv(&res.history)?)?;
    export_result(&res.mesh, &res.cameras, &scene, &a.out)?;
    let last = res.history.last().map_or(f64::NAN, |r| r.loss.total);
    println!(
        "reconstructed {} vertices, {} faces, final loss {last:.6}; outputs in {}",
        res.mesh.num_vertices(),
        res.mesh.num_faces(),
        a.out.display()
    );
    Ok(())
}

fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    cameras_from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_mesh_dir(dir: &Path) -> Result<TriMesh> {
    let obj = dir.join("mesh.obj");
    let ply = dir.join("mesh.ply");
    if obj.exists() {
        Ok(TriMesh::read_obj(&obj).with_context(|| format!("reading {}", obj.display()))?)
    } else if ply.exists() {
        Ok(TriMesh::read_ply(&ply).with_context(|| format!("reading {}", ply.display()))?.0)
    } else {
        bail!("no mesh.obj or mesh.ply in {}", dir.display())
    }
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let gt_dir = a.scene.join("gt");
    let gt_mesh_path = gt_dir.join("mesh.obj");
    if !gt_mesh_path.exists() {
        bail!("scene {} has no ground truth ({} is missing)", a.scene.display(), gt_mesh_path.display());
    }
    let gt = TriMesh::read_obj(&gt_mesh_path).with_context(|| format!("reading {}", gt_mesh_path.display()))?;
    let gt_cam_path = gt_dir.join("cameras.json");
    let gt_cams = if gt_cam_path.exists() { Some(read_cameras(&gt_cam_path)?) } else { None };
    let pred = read_mesh_dir(&a.pred)?;
    let pred_cams = read_cameras(&a.pred.join("cameras.json"))?;
    let report = evaluate(&pred, &pred_cams, &gt, gt_cams.as_deref(), a.samples, cli.seed.unwrap_or(0))?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(p) = &a.report {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    ensure!(a.blur > 0.0, "--blur must be positive");
    let scene = load_scene(&a.scene)?;
    let norm = scene.normalization;
    let mesh = norm.mesh(&read_mesh_dir(&a.checkpoint)?);
    let cams: Vec<Camera> = read_cameras(&a.checkpoint.join("cameras.json"))?
        .iter()
        .map(|c| norm.camera(c))
        .collect();
    ensure!(
        cams.len() == scene.len(),
        "{} cameras in the checkpoint but {} views in the scene",
        cams.len(),
        scene.len()
    );
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let verts = mesh.vertices();
    let normals = mesh.vertex_normals().map_err(|e| anyhow!("mesh normals: {e}"))?;
    let rs = RenderSettings {
        size: scene.size,
        k: 6,
        blur: a.blur,
        blend: BlendParams::default(),
        texture: TextureConfig::default(),
        background: crate::math::Vec3::ZERO,
    };
    for (i, cam) in cams.iter().enumerate() {
        let dm = depth_map(&rasterize(&verts, mesh.faces(), cam, scene.size, 1, 0.0));
        let valid: Vec<f64> = (0..dm.depth.len()).filter(|&p| !dm.is_background(p)).map(|p| dm.depth[p]).collect();
        let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let depth = GrayImage {
            size: dm.size,
            data: (0..dm.depth.len()).map(|p| if dm.is_background(p) { hi } else { dm.depth[p] }).collect(),
        };
        let (lo, hi) = if valid.is_empty() { (0.0, 1.0) } else { (lo, hi.max(lo + 1e-12)) };
        depth.save_png16(&a.out.join(format!("depth_{i:03}.png")), lo, hi)?;
        let sil = GrayImage {
            size: scene.size,
            data: soft_silhouette(&rasterize(&verts, mesh.faces(), cam, scene.size, rs.k, a.blur)),
        };
        sil.save_png(&a.out.join(format!("silhouette_{i:03}.png")))?;
        let rgb = render_textured(&verts, mesh.faces(), &normals, &cams, &scene.images, i, &rs);
        rgb.save_png(&a.out.join(format!("rgb_{i:03}.png")))?;
    }
    println!("wrote renders of {} views to {}", cams.len(), a.out.display());
    Ok(())
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    let mut cfg = SuiteConfig {
        tol: a.tol,
        ..SuiteConfig::default()
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let results = run_suite(&cfg)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:12} {:12} checked {:3} nonzero {:3} max rel err {:.3e}",
            r.term,
            format!("{:?}", r.block),
            r.report.checked.len(),
            r.nonzero,
            r.report.max_rel_err
        );
        failed += usize::from(!r.passed);
    }
    ensure!(failed == 0, "{failed} of {} gradient checks failed", results.len());
    println!("all {} gradient checks passed", results.len());
    Ok(())
}
