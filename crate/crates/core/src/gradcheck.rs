//! Finite-difference checks of the full pipeline gradient, per loss term and
//! per parameter block.

use anyhow::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, FdReport};
use crate::camera::ImageSize;
use crate::losses::{BidtBand, LossWeights};
use crate::math::Vec3;
use crate::mesh::make_icosphere;
use crate::pipeline::{build_plan, evaluate_total, gradient_with_plan, LossConfig, ParamLayout, CAM_PARAMS};
use crate::scene::{synthesize, SynthConfig, TextureSpec};
use crate::shapes::Shape;

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub level: u32,
    pub views: usize,
    pub size: usize,
    pub blur: f64,
    pub vertex_samples: usize,
    pub step: f64,
    pub tol: f64,
    pub seed: u64,
    /// Clamp band of the distance-transform loss. At very small images the
    /// default band is empty (its upper end falls below two pixels), which
    /// would leave that term without gradient.
    pub bidt_band: BidtBand,
}

impl Default for SuiteConfig {
    fn default() -> SuiteConfig {
        SuiteConfig {
            level: 1,
            views: 2,
            size: 16,
            blur: 1e-3,
            vertex_samples: 50,
            step: 1e-6,
            tol: 1e-3,
            seed: 7,
            bidt_band: BidtBand {
                tau_min: 0.25,
                tau_max: 8.0,
            },
        }
    }
}

/// Parameter blocks checked separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Offsets,
    Rotation,
    Translation,
    Focal,
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub term: &'static str,
    pub block: Block,
    pub report: FdReport,
    /// Checked coordinates with a nonzero analytic gradient.
    pub nonzero: usize,
    pub passed: bool,
}

pub const TERMS: [&str; 7] = ["tex_l1", "tex_pyramid", "mask_mse", "mask_bidt", "edge", "laplacian", "total"];

fn only(term: &str) -> LossWeights {
    let z = LossWeights {
        tex_l1: 0.0,
        tex_pyramid: 0.0,
        mask_mse: 0.0,
        mask_bidt: 0.0,
        edge: 0.0,
        laplacian: 0.0,
    };
    match term {
        "tex_l1" => LossWeights { tex_l1: 1.0, ..z },
        "tex_pyramid" => LossWeights { tex_pyramid: 1.0, ..z },
        "mask_mse" => LossWeights { mask_mse: 1.0, ..z },
        "mask_bidt" => LossWeights { mask_bidt: 1.0, ..z },
        "edge" => LossWeights { edge: 1.0, ..z },
        "laplacian" => LossWeights { laplacian: 1.0, ..z },
        _ => LossWeights::default(),
    }
}

fn block_coords(layout: ParamLayout, block: Block, rng: &mut ChaCha8Rng, samples: usize) -> Vec<usize> {
    match block {
        Block::Offsets => {
            let mut all: Vec<usize> = (0..3 * layout.vertices).collect();
            all.shuffle(rng);
            all.truncate(samples);
            all.sort_unstable();
            all
        }
        // camera blocks are small enough to check exhaustively
        Block::Rotation => (0..layout.cameras).flat_map(|i| (0..3).map(move |k| layout.cam_offset(i) + k)).collect(),
        Block::Translation => (0..layout.cameras).flat_map(|i| (3..6).map(move |k| layout.cam_offset(i) + k)).collect(),
        Block::Focal => (0..layout.cameras).map(|i| layout.cam_offset(i) + CAM_PARAMS - 1).collect(),
    }
}

/// Runs every (term, block) check on a small synthetic scene with noisy
/// cameras and a perturbed icosphere.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let synth = synthesize(
        &Shape::Sphere.mesh(24)?,
        &SynthConfig {
            views: cfg.views,
            noise_deg: 5.0,
            size: ImageSize::square(cfg.size),
            seed: cfg.seed,
            texture: TextureSpec::Checkerboard { cell_frac: 0.2 },
            ..SynthConfig::default()
        },
    )?;
    let scene = synth.to_scene()?;
    let mut mesh = make_icosphere(cfg.level, 0.4);
    for o in mesh.offsets_mut() {
        *o = Vec3::new(rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03));
    }
    let rest = make_icosphere(cfg.level, 0.4).mean_edge_length()?;
    let mut out = Vec::new();
    for term in TERMS {
        let mut lc = LossConfig::new(rest);
        lc.blur = cfg.blur;
        lc.weights = only(term);
        lc.bidt_band = Some(cfg.bidt_band);
        let plan = build_plan(&scene, &mesh, &scene.cameras, &lc)?;
        let flat = plan.layout.flatten(mesh.offsets(), &scene.cameras);
        let (_, grad) = gradient_with_plan(&plan, &scene, &flat)?;
        for block in [Block::Offsets, Block::Rotation, Block::Translation, Block::Focal] {
            let coords = block_coords(plan.layout, block, &mut rng, cfg.vertex_samples);
            let report = finite_diff_check(|p| evaluate_total(&plan, &scene, p), &flat, &grad, cfg.step, &coords);
            let nonzero = coords.iter().filter(|&&c| grad[c] != 0.0).count();
            out.push(SuiteResult {
                term,
                block,
                nonzero,
                passed: report.passes(cfg.tol),
                report,
            });
        }
    }
    Ok(out)
}
