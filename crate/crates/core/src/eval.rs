//! Benchmark metrics between a predicted and a ground-truth reconstruction:
//! surface sampling, Chamfer distance, F1, normal consistency, camera
//! rotation error, and similarity alignment by grid search and ICP.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Camera;
use crate::math::{Mat3, Vec3, Vec3f};
use crate::mesh::TriMesh;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("mesh has zero total area")]
    ZeroArea,
    #[error("need at least one sample")]
    NoSamples,
    #[error("{0} and {1} cameras")]
    CameraCount(usize, usize),
}

/// Surface samples with unit normals.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3f>,
    pub normals: Vec<Vec3f>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, s: &Similarity) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| s.apply(*p)).collect(),
            normals: self.normals.iter().map(|n| s.rot.mul_vec(*n)).collect(),
        }
    }

    /// Every `step`-th point.
    pub fn strided(&self, max: usize) -> PointCloud {
        let step = self.len().div_ceil(max.max(1)).max(1);
        PointCloud {
            points: self.points.iter().step_by(step).copied().collect(),
            normals: self.normals.iter().step_by(step).copied().collect(),
        }
    }
}

/// Area-weighted uniform sampling; each sample carries its face normal.
pub fn sample_points<R: Rng + ?Sized>(mesh: &TriMesh, n: usize, rng: &mut R) -> Result<PointCloud, EvalError> {
    if n == 0 {
        return Err(EvalError::NoSamples);
    }
    let verts = mesh.vertices();
    let faces = mesh.faces();
    let mut cdf = Vec::with_capacity(faces.len());
    let mut acc = 0.0;
    for f in faces {
        let [a, b, c] = f.map(|i| verts[i as usize]);
        acc += 0.5 * (b - a).cross(c - a).norm();
        cdf.push(acc);
    }
    if acc.is_nan() || acc <= 0.0 {
        return Err(EvalError::ZeroArea);
    }
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.gen::<f64>() * acc;
        let fi = cdf.partition_point(|&c| c <= x).min(faces.len() - 1);
        let [a, b, c] = faces[fi].map(|i| verts[i as usize]);
        let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        points.push(a + (b - a).scale(u) + (c - a).scale(v));
        normals.push((b - a).cross(c - a).normalized_or_zero());
    }
    Ok(PointCloud { points, normals })
}

/// Points per leaf of the nearest-neighbour tree.
const LEAF: usize = 8;

enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, at: f64, left: Box<Node>, right: Box<Node> },
}

/// Exact nearest-neighbour index over a fixed point set (a 3D k-d tree with
/// median splits).
pub struct NnIndex {
    points: Vec<Vec3f>,
    order: Vec<usize>,
    root: Node,
}

fn coord(p: Vec3f, axis: usize) -> f64 {
    match axis {
        0 => p.x,
        1 => p.y,
        _ => p.z,
    }
}

impl NnIndex {
    pub fn new(points: &[Vec3f]) -> NnIndex {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = Self::build(points, &mut order, 0);
        NnIndex {
            points: points.to_vec(),
            order,
            root,
        }
    }

    fn build(points: &[Vec3f], order: &mut [usize], start: usize) -> Node {
        let n = order.len();
        if n <= LEAF {
            return Node::Leaf { start, end: start + n };
        }
        let (lo, hi) = order.iter().fold((Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY)), |(lo, hi), &i| {
            (lo.component_min(points[i]), hi.component_max(points[i]))
        });
        let ext = hi - lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        if coord(ext, axis) == 0.0 {
            return Node::Leaf { start, end: start + n };
        }
        let mid = n / 2;
        order.select_nth_unstable_by(mid, |&a, &b| coord(points[a], axis).total_cmp(&coord(points[b], axis)));
        let at = coord(points[order[mid]], axis);
        let (l, r) = order.split_at_mut(mid);
        Node::Split {
            axis,
            at,
            left: Box::new(Self::build(points, l, start)),
            right: Box::new(Self::build(points, r, start + mid)),
        }
    }

    /// Index of the nearest point and the squared distance to it. Ties go
    /// to the lowest index.
    pub fn nearest(&self, q: Vec3f) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(&self.root, q, &mut best);
        best
    }

    fn search(&self, node: &Node, q: Vec3f, best: &mut (usize, f64)) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let d = dist2(q, self.points[i]);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split { axis, at, left, right } => {
                let delta = coord(q, *axis) - at;
                let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if delta * delta <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

fn dist2(a: Vec3f, b: Vec3f) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

/// Nearest point of `to` for every point of `from`.
pub fn nearest_all(from: &[Vec3f], to: &[Vec3f]) -> Vec<(usize, f64)> {
    let idx = NnIndex::new(to);
    from.par_iter().map(|p| idx.nearest(*p)).collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Mean squared nearest-neighbour distance from `p` to `q` plus the reverse.
pub fn chamfer(p: &[Vec3f], q: &[Vec3f]) -> f64 {
    let a = mean(nearest_all(p, q).into_iter().map(|(_, d)| d));
    let b = mean(nearest_all(q, p).into_iter().map(|(_, d)| d));
    a + b
}

/// Precision, recall and their harmonic mean, all in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn percent_within(from: &[Vec3f], to: &[Vec3f], tau: f64) -> f64 {
    let t2 = tau * tau;
    let hits = nearest_all(from, to).iter().filter(|(_, d)| *d <= t2).count();
    100.0 * hits as f64 / from.len() as f64
}

/// Precision counts predicted points `p` within `tau` of `q`; recall the reverse.
pub fn f1_at(p: &[Vec3f], q: &[Vec3f], tau: f64) -> F1Score {
    let precision = percent_within(p, q, tau);
    let recall = percent_within(q, p, tau);
    F1Score {
        precision,
        recall,
        f1: f1_from(precision, recall),
    }
}

/// Symmetric mean of `|cos|` between each normal and its nearest neighbour's.
pub fn normal_consistency(p: &PointCloud, q: &PointCloud) -> f64 {
    let one_way = |a: &PointCloud, b: &PointCloud| {
        mean(
            nearest_all(&a.points, &b.points)
                .into_iter()
                .zip(&a.normals)
                .map(|((j, _), n)| n.dot(b.normals[j]).abs()),
        )
    };
    0.5 * (one_way(p, q) + one_way(q, p))
}

/// `x ↦ s·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rot: Mat3,
    pub trans: Vec3f,
}

impl Similarity {
    pub fn identity() -> Similarity {
        Similarity {
            scale: 1.0,
            rot: Mat3::identity(),
            trans: Vec3::ZERO,
        }
    }

    pub fn apply(&self, x: Vec3f) -> Vec3f {
        self.rot.mul_vec(x).scale(self.scale) + self.trans
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Similarity) -> Similarity {
        Similarity {
            scale: self.scale * other.scale,
            rot: self.rot.matmul(&other.rot),
            trans: self.apply(other.trans),
        }
    }

    pub fn inverse(&self) -> Similarity {
        let rt = self.rot.transpose();
        Similarity {
            scale: 1.0 / self.scale,
            rot: rt,
            trans: rt.mul_vec(self.trans).scale(-1.0 / self.scale),
        }
    }
}

fn to_na(v: Vec3f) -> nalgebra::Vector3<f64> {
    nalgebra::Vector3::new(v.x, v.y, v.z)
}

/// Nearest rotation to `m` in the Frobenius sense.
fn project_so3(m: &nalgebra::Matrix3<f64>) -> nalgebra::Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut d = nalgebra::Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Closed-form least-squares similarity mapping `src[i]` onto `dst[i]`.
pub fn umeyama(src: &[Vec3f], dst: &[Vec3f], with_scale: bool) -> Similarity {
    assert_eq!(src.len(), dst.len());
    let n = src.len() as f64;
    let mu_s = src.iter().fold(Vec3::ZERO, |a, p| a + *p).scale(1.0 / n);
    let mu_d = dst.iter().fold(Vec3::ZERO, |a, p| a + *p).scale(1.0 / n);
    let mut cov = nalgebra::Matrix3::<f64>::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let a = to_na(*s - mu_s);
        let b = to_na(*d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut d = nalgebra::Vector3::new(1.0, 1.0, 1.0);
    if (u * vt).determinant() < 0.0 {
        d[2] = -1.0;
    }
    let r = u * nalgebra::Matrix3::from_diagonal(&d) * vt;
    let scale = if with_scale && var_s > 0.0 {
        svd.singular_values.dot(&d) / var_s
    } else {
        1.0
    };
    let rot = Mat3::from_nalgebra(&r);
    Similarity {
        scale,
        rot,
        trans: mu_d - rot.mul_vec(mu_s).scale(scale),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpResult {
    /// Maps the moving set onto the fixed set.
    pub transform: Similarity,
    pub chamfer: f64,
    pub iterations: usize,
    /// Chamfer rose for several consecutive iterations; the best transform seen is returned.
    pub diverged: bool,
}

/// Consecutive Chamfer increases treated as divergence.
const ICP_DIVERGE: usize = 5;

/// Iterative closest point aligning `moving` onto `fixed`, starting from `init`.
pub fn icp(moving: &[Vec3f], fixed: &[Vec3f], init: Similarity, with_scale: bool, max_iters: usize, tol: f64) -> IcpResult {
    let fixed_idx = NnIndex::new(fixed);
    let mut cur = init;
    let moved = |s: &Similarity| moving.iter().map(|p| s.apply(*p)).collect::<Vec<_>>();
    let mut best = IcpResult {
        transform: cur,
        chamfer: chamfer(&moved(&cur), fixed),
        iterations: 0,
        diverged: false,
    };
    let mut prev = best.chamfer;
    let mut rising = 0;
    for it in 1..=max_iters {
        let m = moved(&cur);
        let targets: Vec<Vec3f> = m.par_iter().map(|p| fixed[fixed_idx.nearest(*p).0]).collect();
        cur = umeyama(moving, &targets, with_scale);
        let c = chamfer(&moved(&cur), fixed);
        best.iterations = it;
        if c < best.chamfer {
            best.chamfer = c;
            best.transform = cur;
        }
        if c > prev {
            rising += 1;
            if rising >= ICP_DIVERGE {
                best.diverged = true;
                break;
            }
        } else {
            rising = 0;
        }
        let improvement = (prev - c) / prev.max(f64::MIN_POSITIVE);
        prev = c;
        if improvement >= 0.0 && improvement < tol {
            break;
        }
    }
    best
}

fn cam_to_world(c: &Camera) -> nalgebra::Matrix3<f64> {
    c.rotation().transpose().to_nalgebra()
}

/// Rotation angle of `m`, accurate near zero: `‖m − I‖_F = 2√2·sin(θ/2)`.
fn angle_of(m: &nalgebra::Matrix3<f64>) -> f64 {
    let chord = (m - nalgebra::Matrix3::identity()).norm() / (2.0 * std::f64::consts::SQRT_2);
    2.0 * chord.min(1.0).asin()
}

fn log_so3(m: &nalgebra::Matrix3<f64>) -> nalgebra::Vector3<f64> {
    let r = crate::camera::log_map(&Mat3::from_nalgebra(m));
    nalgebra::Vector3::new(r.x, r.y, r.z)
}

fn exp_so3(w: &nalgebra::Vector3<f64>) -> nalgebra::Matrix3<f64> {
    crate::camera::rotation_matrix(Vec3::new(w.x, w.y, w.z)).to_nalgebra()
}

/// Single global rotation `G` acting on the world frame that best maps the
/// ground-truth camera orientations onto the predicted ones: it minimizes the
/// summed geodesic angle between `Ĉ_i` and `G·C_i`, where `C_i` are the
/// camera-to-world rotations.
pub fn rotation_gauge(gt: &[Camera], pred: &[Camera]) -> Mat3 {
    let rel: Vec<nalgebra::Matrix3<f64>> = gt.iter().zip(pred).map(|(g, p)| cam_to_world(p) * cam_to_world(g).transpose()).collect();
    let sum = rel.iter().fold(nalgebra::Matrix3::zeros(), |a, m| a + m);
    let mut g = project_so3(&sum);
    // Weiszfeld iterations for the geodesic L1 mean
    for _ in 0..200 {
        let mut num = nalgebra::Vector3::zeros();
        let mut den = 0.0;
        for m in &rel {
            let w = log_so3(&(g.transpose() * m));
            let a = w.norm().max(1e-12);
            num += w / a;
            den += 1.0 / a;
        }
        let step = num / den;
        g *= exp_so3(&step);
        if step.norm() < 1e-14 {
            break;
        }
    }
    Mat3::from_nalgebra(&g)
}

/// Mean residual angle in degrees after removing the global rotation gauge.
pub fn rotation_error(gt: &[Camera], pred: &[Camera]) -> Result<f64, EvalError> {
    if gt.len() != pred.len() || gt.is_empty() {
        return Err(EvalError::CameraCount(gt.len(), pred.len()));
    }
    let g = rotation_gauge(gt, pred).to_nalgebra();
    Ok(mean_residual_deg(gt, pred, &g))
}

/// Mean of `angle(Ĉ_i, G·C_i)` in degrees for a given `G`.
pub fn mean_residual_deg(gt: &[Camera], pred: &[Camera], g: &nalgebra::Matrix3<f64>) -> f64 {
    mean(
        gt.iter()
            .zip(pred)
            .map(|(a, b)| angle_of(&(cam_to_world(b).transpose() * g * cam_to_world(a))).to_degrees()),
    )
}

/// Quantity to optimize when picking an alignment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metric {
    Chamfer,
    /// F1 at an absolute distance threshold.
    F1(f64),
    NormalConsistency,
}

impl Metric {
    pub fn value(&self, pred: &PointCloud, gt: &PointCloud) -> f64 {
        match self {
            Metric::Chamfer => chamfer(&pred.points, &gt.points),
            Metric::F1(tau) => f1_at(&pred.points, &gt.points, *tau).f1,
            Metric::NormalConsistency => normal_consistency(pred, gt),
        }
    }

    pub fn better(&self, a: f64, b: f64) -> bool {
        match self {
            Metric::Chamfer => a < b,
            _ => a > b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidate {
    ScaleDepthGrid,
    IcpPredToGt,
    IcpGtToPred,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    /// Maps the prediction into the ground-truth frame.
    pub transform: Similarity,
    pub value: f64,
    pub candidate: Candidate,
}

/// Steps of the scale and depth grids.
pub const GRID_STEPS: usize = 65;
/// Points of each set used during the grid search.
pub const GRID_POINTS: usize = 500;
const ICP_ITERS: usize = 50;
const ICP_TOL: f64 = 1e-6;

/// Searches scale in `[0.5, 2]` (log spaced) about the camera-0 center and a
/// shift along its optical axis in `[-0.5, 0.5]·extent`, minimizing Chamfer.
pub fn scale_depth_search(pred: &PointCloud, gt: &PointCloud, cam0: &Camera, extent: f64) -> Similarity {
    let p = pred.strided(GRID_POINTS);
    let g = gt.strided(GRID_POINTS);
    let rot = cam0.rotation();
    let to_view = Similarity {
        scale: 1.0,
        rot,
        trans: Vec3::from_array(cam0.t),
    };
    let from_view = to_view.inverse();
    let gt_idx = NnIndex::new(&g.points);
    let pred_idx = NnIndex::new(&p.points);
    let half = (GRID_STEPS / 2) as f64;
    let grid: Vec<(usize, usize)> = (0..GRID_STEPS).flat_map(|i| (0..GRID_STEPS).map(move |j| (i, j))).collect();
    let make = |i: usize, j: usize| {
        let s = 2f64.powf((i as f64 - half) / half);
        let d = 0.5 * (j as f64 - half) / half * extent;
        let in_view = Similarity {
            scale: s,
            rot: Mat3::identity(),
            trans: Vec3::new(0.0, 0.0, d),
        };
        from_view.compose(&in_view).compose(&to_view)
    };
    let scored: Vec<(f64, usize)> = grid
        .par_iter()
        .enumerate()
        .map(|(n, &(i, j))| {
            let t = make(i, j);
            let moved: Vec<Vec3f> = p.points.iter().map(|x| t.apply(*x)).collect();
            let a = mean(moved.iter().map(|x| gt_idx.nearest(*x).1));
            // |g - T p|² = s²·|T⁻¹g - p|², so the prediction's tree serves the reverse direction
            let inv = t.inverse();
            let b = mean(g.points.iter().map(|x| pred_idx.nearest(inv.apply(*x)).1)) * t.scale * t.scale;
            (a + b, n)
        })
        .collect();
    let best = scored
        .iter()
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("grid is nonempty");
    let (i, j) = grid[best.1];
    make(i, j)
}

/// The three alignment candidates, each mapping the prediction into the
/// ground-truth frame.
pub fn alignment_candidates(pred: &PointCloud, gt: &PointCloud, cam0: &Camera, extent: f64) -> Vec<(Candidate, Similarity)> {
    let grid = scale_depth_search(pred, gt, cam0, extent);
    let fwd = icp(&pred.points, &gt.points, grid, false, ICP_ITERS, ICP_TOL).transform;
    let bwd = icp(&gt.points, &pred.points, grid.inverse(), false, ICP_ITERS, ICP_TOL).transform.inverse();
    vec![
        (Candidate::ScaleDepthGrid, grid),
        (Candidate::IcpPredToGt, fwd),
        (Candidate::IcpGtToPred, bwd),
    ]
}

/// Evaluates `metric` under each candidate and keeps the best.
pub fn pick_best(pred: &PointCloud, gt: &PointCloud, candidates: &[(Candidate, Similarity)], metric: Metric) -> Alignment {
    let mut best: Option<Alignment> = None;
    for (c, t) in candidates {
        let v = metric.value(&pred.transformed(t), gt);
        if best.is_none_or(|b| metric.better(v, b.value)) {
            best = Some(Alignment {
                transform: *t,
                value: v,
                candidate: *c,
            });
        }
    }
    best.expect("at least one candidate")
}

pub fn align_best(pred: &PointCloud, gt: &PointCloud, cam0: &Camera, extent: f64, metric: Metric) -> Alignment {
    pick_best(pred, gt, &alignment_candidates(pred, gt, cam0, extent), metric)
}

/// Samples per mesh for the benchmark metrics.
pub const EVAL_SAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentUsed {
    pub chamfer: Candidate,
    #[serde(rename = "f1@.1")]
    pub f1_1: Candidate,
    #[serde(rename = "f1@.2")]
    pub f1_2: Candidate,
    pub nc: Candidate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub chamfer: f64,
    #[serde(rename = "f1@.1")]
    pub f1_1: F1Score,
    #[serde(rename = "f1@.2")]
    pub f1_2: F1Score,
    /// Precision and recall at the `.1` threshold.
    pub precision: f64,
    pub recall: f64,
    pub nc: f64,
    pub rot_deg: Option<f64>,
    pub alignment_used: AlignmentUsed,
}

/// F1 distance threshold for a nominal value such as `0.1`, in units of a
/// tenth of the ground-truth bounding-box diagonal.
pub fn f1_threshold(nominal: f64, gt_diag: f64) -> f64 {
    nominal * 0.1 * gt_diag
}

/// Full benchmark of a predicted mesh and cameras against ground truth, all
/// in the same input frame.
pub fn evaluate(
    pred: &TriMesh,
    pred_cams: &[Camera],
    gt: &TriMesh,
    gt_cams: Option<&[Camera]>,
    samples: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pc = sample_points(pred, samples, &mut rng)?;
    let gc = sample_points(gt, samples, &mut rng)?;
    let diag = gt.bounds().map(|(lo, hi)| (hi - lo).norm()).unwrap_or(1.0);
    let cam0 = pred_cams.first().or(gt_cams.and_then(|c| c.first())).copied().unwrap_or(Camera {
        r: [0.0; 3],
        t: [0.0, 0.0, 2.0 * diag],
        f: 0.5,
    });
    let cands = alignment_candidates(&pc, &gc, &cam0, diag);
    let ch = pick_best(&pc, &gc, &cands, Metric::Chamfer);
    let t1 = f1_threshold(0.1, diag);
    let t2 = f1_threshold(0.2, diag);
    let a1 = pick_best(&pc, &gc, &cands, Metric::F1(t1));
    let a2 = pick_best(&pc, &gc, &cands, Metric::F1(t2));
    let nc = pick_best(&pc, &gc, &cands, Metric::NormalConsistency);
    let f1_1 = f1_at(&pc.transformed(&a1.transform).points, &gc.points, t1);
    let f1_2 = f1_at(&pc.transformed(&a2.transform).points, &gc.points, t2);
    let rot_deg = match gt_cams {
        Some(g) => Some(rotation_error(g, pred_cams)?),
        None => None,
    };
    Ok(EvalReport {
        chamfer: ch.value,
        f1_1,
        f1_2,
        precision: f1_1.precision,
        recall: f1_1.recall,
        nc: nc.value,
        rot_deg,
        alignment_used: AlignmentUsed {
            chamfer: ch.candidate,
            f1_1: a1.candidate,
            f1_2: a2.candidate,
            nc: nc.candidate,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{axis_angle, euler_rotation};
    use crate::mesh::make_icosphere;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::TAU;

    fn brute_nn(p: Vec3f, q: &[Vec3f]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (j, x) in q.iter().enumerate() {
            let d = dist2(p, *x);
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    fn brute_chamfer(p: &[Vec3f], q: &[Vec3f]) -> f64 {
        let a = p.iter().map(|x| brute_nn(*x, q).1).sum::<f64>() / p.len() as f64;
        let b = q.iter().map(|x| brute_nn(*x, p).1).sum::<f64>() / q.len() as f64;
        a + b
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        let points = (0..n).map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let normals = (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalized_or_zero())
            .collect();
        PointCloud { points, normals }
    }

    fn unit_square() -> TriMesh {
        TriMesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn square_samples_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pc = sample_points(&unit_square(), 100_000, &mut rng).unwrap();
        let below = pc.points.iter().filter(|p| p.y < p.x).count() as f64 / 1e5;
        assert!((below - 0.5).abs() < 0.02 * 0.5, "{below}");
        for n in &pc.normals {
            assert!((n.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sphere_normals_point_outward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pc = sample_points(&make_icosphere(3, 1.0), 2000, &mut rng).unwrap();
        for (p, n) in pc.points.iter().zip(&pc.normals) {
            assert!(p.normalized_or_zero().dot(*n) > 0.99);
        }
    }

    #[test]
    fn single_sample_lies_on_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pc = sample_points(&unit_square(), 1, &mut rng).unwrap();
        assert_eq!(pc.len(), 1);
        let p = pc.points[0];
        assert!(p.z.abs() < 1e-9 && (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y));
    }

    #[test]
    fn zero_area_and_zero_count_are_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_points(&unit_square(), 0, &mut rng), Err(EvalError::NoSamples));
        assert_eq!(sample_points(&TriMesh::empty(), 5, &mut rng), Err(EvalError::ZeroArea));
    }

    #[test]
    fn chamfer_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_cloud(&mut rng, 50).points;
        assert_eq!(chamfer(&p, &p), 0.0);
        let d = 0.3;
        let c = chamfer(&[Vec3::ZERO], &[Vec3::new(d, 0.0, 0.0)]);
        assert!((c - 2.0 * d * d).abs() < 1e-15);
    }

    #[test]
    fn f1_examples() {
        assert!((f1_from(99.8, 35.5) - 52.37).abs() < 0.01);
        assert!((f1_from(99.8, 35.5) - 52.3).abs() < 0.1);
        assert_eq!(f1_from(0.0, 0.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_cloud(&mut rng, 100).points;
        assert_eq!(f1_at(&p, &p, 1e-3).f1, 100.0);
        let far: Vec<Vec3f> = p.iter().map(|x| *x + Vec3::new(10.0, 0.0, 0.0)).collect();
        assert_eq!(f1_at(&p, &far, 0.5).f1, 0.0);
    }

    #[test]
    fn normal_consistency_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_cloud(&mut rng, 100);
        assert!((normal_consistency(&a, &a) - 1.0).abs() < 1e-12);
        let plane = PointCloud {
            points: a.points.clone(),
            normals: vec![Vec3::new(0.0, 0.0, 1.0); 100],
        };
        let turned = PointCloud {
            points: a.points.clone(),
            normals: vec![Vec3::new(1.0, 0.0, 0.0); 100],
        };
        assert_eq!(normal_consistency(&plane, &turned), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn metrics_match_brute_force(seed in 0u64..1000, n in 1usize..200, m in 1usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_cloud(&mut rng, n);
            let b = random_cloud(&mut rng, m);
            prop_assert!((chamfer(&a.points, &b.points) - brute_chamfer(&a.points, &b.points)).abs() <= 1e-12);
            prop_assert_eq!(chamfer(&a.points, &b.points), chamfer(&b.points, &a.points));
            let tau = 0.2;
            let bp = a.points.iter().filter(|x| brute_nn(**x, &b.points).1 <= tau * tau).count() as f64 * 100.0 / n as f64;
            let br = b.points.iter().filter(|x| brute_nn(**x, &a.points).1 <= tau * tau).count() as f64 * 100.0 / m as f64;
            let f = f1_at(&a.points, &b.points, tau);
            prop_assert!((f.precision - bp).abs() <= 1e-9 && (f.recall - br).abs() <= 1e-9);
            prop_assert!((f.f1 - f1_from(bp, br)).abs() <= 1e-9);
            let one = |x: &PointCloud, y: &PointCloud| {
                x.points.iter().zip(&x.normals).map(|(p, nn)| nn.dot(y.normals[brute_nn(*p, &y.points).0]).abs()).sum::<f64>()
                    / x.len() as f64
            };
            let nc = 0.5 * (one(&a, &b) + one(&b, &a));
            prop_assert!((normal_consistency(&a, &b) - nc).abs() <= 1e-12);
        }

        #[test]
        fn f1_monotone_in_tau(seed in 0u64..1000, t1 in 0.01f64..1.0, dt in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_cloud(&mut rng, 80).points;
            let b = random_cloud(&mut rng, 60).points;
            prop_assert!(f1_at(&a, &b, t1).f1 <= f1_at(&a, &b, t1 + dt).f1);
        }

        #[test]
        fn rotation_error_is_gauge_invariant(seed in 0u64..1000, ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = cams(&mut rng, 5);
            let pred: Vec<Camera> = gt.iter().map(|c| crate::camera::perturb_rotation(c, 3.0, &mut rng)).collect();
            let g = euler_rotation(ax, ay, az);
            let moved = regauge(&pred, &g);
            let e0 = rotation_error(&gt, &pred).unwrap();
            let e1 = rotation_error(&gt, &moved).unwrap();
            prop_assert!((e0 - e1).abs() < 1e-6, "{} vs {}", e0, e1);
        }

        #[test]
        fn rigid_icp_preserves_distances(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_cloud(&mut rng, 60).points;
            let b = random_cloud(&mut rng, 60).points;
            let r = icp(&a, &b, Similarity::identity(), false, 20, 1e-9);
            let t = r.transform;
            prop_assert!((t.scale - 1.0).abs() < 1e-15);
            for i in 0..10 {
                let d0 = (a[i] - a[i + 1]).norm();
                let d1 = (t.apply(a[i]) - t.apply(a[i + 1])).norm();
                prop_assert!((d0 - d1).abs() < 1e-12);
            }
        }
    }

    fn cams(rng: &mut ChaCha8Rng, n: usize) -> Vec<Camera> {
        (0..n)
            .map(|_| {
                let rot = euler_rotation(rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU));
                Camera::from_rotation(&rot, Vec3::new(0.0, 0.0, 3.0), 0.4).unwrap()
            })
            .collect()
    }

    /// The same cameras after rotating the world by `g`.
    fn regauge(cams: &[Camera], g: &Mat3) -> Vec<Camera> {
        cams.iter()
            .map(|c| Camera::from_rotation(&c.rotation().matmul(&g.transpose()), Vec3::from_array(c.t), c.f).unwrap())
            .collect()
    }

    #[test]
    fn rotation_error_zero_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = cams(&mut rng, 4);
        assert!(rotation_error(&gt, &gt).unwrap() < 1e-9);
        let moved = regauge(&gt, &euler_rotation(0.3, -1.2, 2.0));
        assert!(rotation_error(&gt, &moved).unwrap() < 1e-6);
        assert!(rotation_error(&gt, &gt[..2]).is_err());
    }

    fn grid_oracle(gt: &[Camera], pred: &[Camera]) -> f64 {
        let eval = |w: nalgebra::Vector3<f64>| mean_residual_deg(gt, pred, &exp_so3(&w));
        let mut best = (f64::INFINITY, nalgebra::Vector3::zeros());
        let n = 24;
        let pi = std::f64::consts::PI;
        for i in 0..=n {
            for j in 0..=n {
                for k in 0..=n {
                    let w = nalgebra::Vector3::new(i as f64, j as f64, k as f64) * (2.0 * pi / n as f64) - nalgebra::Vector3::repeat(pi);
                    if w.norm() <= pi {
                        let v = eval(w);
                        if v < best.0 {
                            best = (v, w);
                        }
                    }
                }
            }
        }
        let mut span = 2.0 * pi / n as f64;
        for _ in 0..30 {
            let c = best.1;
            for i in -4..=4 {
                for j in -4..=4 {
                    for k in -4..=4 {
                        let w = c + nalgebra::Vector3::new(i as f64, j as f64, k as f64) * (span / 4.0);
                        let v = eval(w);
                        if v < best.0 {
                            best = (v, w);
                        }
                    }
                }
            }
            span *= 0.5;
        }
        best.0
    }

    #[test]
    fn rotation_error_matches_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = cams(&mut rng, 4);
        let g = euler_rotation(0.7, 0.2, -0.4);
        let mut pred = regauge(&gt, &g);
        let axis = Vec3::new(0.3, -0.5, 0.8).normalized_or_zero();
        let c = pred[2];
        pred[2] = Camera::from_rotation(&axis_angle(axis, 8f64.to_radians()).matmul(&c.rotation()), Vec3::from_array(c.t), c.f).unwrap();
        let ours = rotation_error(&gt, &pred).unwrap();
        let oracle = grid_oracle(&gt, &pred);
        assert!((ours - oracle).abs() < 0.1, "{ours} vs {oracle}");
        assert!((ours - 2.0).abs() < 0.1, "{ours}");
    }

    fn blob_cloud(n: usize, seed: u64) -> PointCloud {
        let mesh = crate::shapes::Shape::NotchSphere.mesh(32).unwrap();
        let stretched = mesh.map_vertices(|v| Vec3::new(v.x * 1.4, v.y, v.z * 0.7));
        sample_points(&stretched, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn umeyama_recovers_exact_similarity() {
        let p = blob_cloud(200, 9).points;
        let t = Similarity {
            scale: 1.7,
            rot: euler_rotation(0.4, -0.3, 1.1),
            trans: Vec3::new(0.2, -1.0, 0.5),
        };
        let q: Vec<Vec3f> = p.iter().map(|x| t.apply(*x)).collect();
        let est = umeyama(&p, &q, true);
        assert!((est.scale - 1.7).abs() < 1e-12);
        assert!(est.rot.max_abs_diff(&t.rot) < 1e-12);
        assert!((est.trans - t.trans).max_abs() < 1e-12);
    }

    #[test]
    fn icp_recovers_constructed_similarity() {
        let p = blob_cloud(3000, 10).points;
        let t = Similarity {
            scale: 1.05,
            rot: axis_angle(Vec3::new(0.2, 1.0, 0.3).normalized_or_zero(), 6f64.to_radians()),
            trans: Vec3::new(0.03, -0.02, 0.04),
        };
        let q: Vec<Vec3f> = p.iter().map(|x| t.apply(*x)).collect();
        let r = icp(&p, &q, Similarity::identity(), true, 200, 1e-12);
        let ang = crate::math::rotation_angle_between(&r.transform.rot, &t.rot).to_degrees();
        assert!(ang < 0.1, "{ang}");
        assert!((r.transform.scale - 1.05).abs() < 1e-3, "{}", r.transform.scale);
        assert!(!r.diverged);
        assert!(r.chamfer <= chamfer(&p, &q));
    }

    #[test]
    fn icp_identity_and_monotone() {
        let p = blob_cloud(500, 11).points;
        let r = icp(&p, &p, Similarity::identity(), false, 20, 1e-9);
        assert!(r.transform.rot.max_abs_diff(&Mat3::identity()) < 1e-9);
        assert!(r.transform.trans.max_abs() < 1e-9);
        let q = blob_cloud(500, 12).points;
        let shifted: Vec<Vec3f> = q.iter().map(|x| *x + Vec3::new(0.05, 0.0, 0.0)).collect();
        let r = icp(&p, &shifted, Similarity::identity(), false, 30, 1e-6);
        assert!(r.chamfer <= chamfer(&p, &shifted));
    }

    #[test]
    fn similarity_inverse_and_compose() {
        let t = Similarity {
            scale: 0.8,
            rot: euler_rotation(0.1, 0.2, 0.3),
            trans: Vec3::new(1.0, 2.0, 3.0),
        };
        let x = Vec3::new(0.3, -0.7, 0.2);
        let back = t.inverse().apply(t.apply(x));
        assert!((back - x).max_abs() < 1e-14);
        let tt = t.compose(&t);
        assert!((tt.apply(x) - t.apply(t.apply(x))).max_abs() < 1e-14);
    }

    fn cam0() -> Camera {
        Camera::from_rotation(&euler_rotation(0.3, 0.5, 0.0), Vec3::new(0.0, 0.0, 2.5), 0.35).unwrap()
    }

    #[test]
    fn align_identity_wins() {
        let g = blob_cloud(2000, 13);
        let a = align_best(&g, &g, &cam0(), 1.0, Metric::Chamfer);
        assert!(a.value < 1e-20, "{}", a.value);
        let a = align_best(&g, &g, &cam0(), 1.0, Metric::NormalConsistency);
        assert!((a.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn grid_recovers_scale() {
        let g = blob_cloud(2000, 14);
        let c = cam0();
        let center = c.center();
        let pred = PointCloud {
            points: g.points.iter().map(|p| center + (*p - center).scale(1.3)).collect(),
            normals: g.normals.clone(),
        };
        let t = scale_depth_search(&pred, &g, &c, 1.0);
        let step = 2f64.powf(1.0 / 32.0);
        let ratio = t.scale * 1.3;
        assert!(ratio < step && ratio > 1.0 / step, "{}", t.scale);
    }

    #[test]
    fn per_metric_choice_can_differ() {
        let mut pts = Vec::new();
        for i in 0..21 {
            for j in 0..21 {
                pts.push(Vec3::new(-0.05 + 0.005 * i as f64, -0.05 + 0.005 * j as f64, 0.0));
            }
        }
        let gt = PointCloud {
            normals: vec![Vec3::new(0.0, 0.0, 1.0); pts.len()],
            points: pts,
        };
        let lifted = Similarity {
            trans: Vec3::new(0.0, 0.0, 0.05),
            ..Similarity::identity()
        };
        let tilted = Similarity {
            rot: axis_angle(Vec3::new(1.0, 0.0, 0.0), 20f64.to_radians()),
            ..Similarity::identity()
        };
        let cands = vec![(Candidate::ScaleDepthGrid, lifted), (Candidate::IcpPredToGt, tilted)];
        assert_eq!(pick_best(&gt, &gt, &cands, Metric::Chamfer).candidate, Candidate::IcpPredToGt);
        assert_eq!(pick_best(&gt, &gt, &cands, Metric::NormalConsistency).candidate, Candidate::ScaleDepthGrid);
    }

    #[test]
    fn evaluate_perfect_prediction() {
        let m = crate::shapes::Shape::NotchSphere.mesh(28).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cs = cams(&mut rng, 3);
        let r = evaluate(&m, &cs, &m, Some(&cs), 3000, 1).unwrap();
        assert!(r.rot_deg.unwrap() < 1e-9);
        assert!(r.f1_2.f1 > 95.0, "{:?}", r.f1_2);
        assert!(r.nc > 0.95);
        let json = serde_json::to_value(&r).unwrap();
        for k in ["chamfer", "f1@.1", "f1@.2", "precision", "recall", "nc", "rot_deg", "alignment_used"] {
            assert!(json.get(k).is_some(), "{k}");
        }
    }
}
