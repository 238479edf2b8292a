//! Objective terms: texture L1 and pyramid proxy, silhouette MSE, the
//! bi-directional distance-transform loss and the mesh regularizers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::camera::ImageSize;
use crate::math::Vec3;
use crate::mesh::{cotangent_laplacian, EdgeSet};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("image size mismatch: {0:?} vs {1:?}")]
    SizeMismatch(ImageSize, ImageSize),
}

/// Per-term values and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub tex_l1: f64,
    pub tex_pyramid: f64,
    pub mask_mse: f64,
    pub mask_bidt: f64,
    pub edge: f64,
    pub laplacian: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub tex_l1: f64,
    pub tex_pyramid: f64,
    pub mask_mse: f64,
    pub mask_bidt: f64,
    pub edge: f64,
    pub laplacian: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            tex_l1: 1.0,
            tex_pyramid: 1.0,
            mask_mse: 1.0,
            mask_bidt: 1.0,
            edge: 1.0,
            laplacian: 1.0,
        }
    }
}

impl LossWeights {
    pub fn without_texture(mut self) -> Self {
        self.tex_l1 = 0.0;
        self.tex_pyramid = 0.0;
        self
    }

    pub fn combine(&self, t: &LossTerms<f64>) -> f64 {
        self.tex_l1 * t.tex_l1
            + self.tex_pyramid * t.tex_pyramid
            + self.mask_mse * t.mask_mse
            + self.mask_bidt * t.mask_bidt
            + self.edge * t.edge
            + self.laplacian * t.laplacian
    }
}

/// Raw (unweighted) term values, generic over the scalar.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<T> {
    pub tex_l1: T,
    pub tex_pyramid: T,
    pub mask_mse: T,
    pub mask_bidt: T,
    pub edge: T,
    pub laplacian: T,
}

impl<T: Real> LossTerms<T> {
    pub fn zero() -> Self {
        LossTerms {
            tex_l1: T::zero(),
            tex_pyramid: T::zero(),
            mask_mse: T::zero(),
            mask_bidt: T::zero(),
            edge: T::zero(),
            laplacian: T::zero(),
        }
    }

    pub fn weighted_total(&self, w: &LossWeights) -> T {
        self.tex_l1 * w.tex_l1
            + self.tex_pyramid * w.tex_pyramid
            + self.mask_mse * w.mask_mse
            + self.mask_bidt * w.mask_bidt
            + self.edge * w.edge
            + self.laplacian * w.laplacian
    }

    pub fn value(&self) -> LossTerms<f64> {
        LossTerms {
            tex_l1: self.tex_l1.val(),
            tex_pyramid: self.tex_pyramid.val(),
            mask_mse: self.mask_mse.val(),
            mask_bidt: self.mask_bidt.val(),
            edge: self.edge.val(),
            laplacian: self.laplacian.val(),
        }
    }

    pub fn add(&mut self, o: &LossTerms<T>) {
        self.tex_l1 += o.tex_l1;
        self.tex_pyramid += o.tex_pyramid;
        self.mask_mse += o.mask_mse;
        self.mask_bidt += o.mask_bidt;
        self.edge += o.edge;
        self.laplacian += o.laplacian;
    }
}

impl LossTerms<f64> {
    pub fn report(&self, w: &LossWeights) -> LossReport {
        LossReport {
            tex_l1: self.tex_l1,
            tex_pyramid: self.tex_pyramid,
            mask_mse: self.mask_mse,
            mask_bidt: self.mask_bidt,
            edge: self.edge,
            laplacian: self.laplacian,
            total: w.combine(self),
        }
    }
}

/// Mean absolute error over masked pixels and the three channels.
pub fn tex_l1<T: Real>(rendered: &[Vec3<T>], target: &[[f64; 3]], mask: &[bool]) -> T {
    let mut s = T::zero();
    let mut n = 0usize;
    for ((r, t), m) in rendered.iter().zip(target).zip(mask) {
        if *m {
            s += (r.x + -t[0]).abs() + (r.y + -t[1]).abs() + (r.z + -t[2]).abs();
            n += 1;
        }
    }
    if n == 0 {
        T::zero()
    } else {
        s * (1.0 / (3 * n) as f64)
    }
}

pub const PYRAMID_LEVELS: usize = 3;
const KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// 5-tap Gaussian blur and stride-2 decimation with clamped borders.
pub fn pyramid_down<T: Real>(img: &[Vec3<T>], size: ImageSize) -> (Vec<Vec3<T>>, ImageSize) {
    let (w, h) = (size.width, size.height);
    let out = ImageSize::new(w.div_ceil(2), h.div_ceil(2));
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    // horizontal pass at decimated columns
    let mut tmp = vec![Vec3::<T>::zero(); out.width * h];
    for r in 0..h {
        for c in 0..out.width {
            let mut acc = Vec3::<T>::zero();
            for (k, wk) in KERNEL.iter().enumerate() {
                let src = clamp(2 * c as i64 + k as i64 - 2, w);
                acc += img[r * w + src].scale_f(*wk);
            }
            tmp[r * out.width + c] = acc;
        }
    }
    let mut res = vec![Vec3::<T>::zero(); out.pixels()];
    for r in 0..out.height {
        for c in 0..out.width {
            let mut acc = Vec3::<T>::zero();
            for (k, wk) in KERNEL.iter().enumerate() {
                let src = clamp(2 * r as i64 + k as i64 - 2, h);
                acc += tmp[src * out.width + c].scale_f(*wk);
            }
            res[r * out.width + c] = acc;
        }
    }
    (res, out)
}

/// Sum over pyramid levels of the per-level mean absolute error. Level 0 is
/// the full-resolution image pair.
pub fn tex_pyramid<T: Real>(rendered: &[Vec3<T>], target: &[[f64; 3]], size: ImageSize) -> T {
    let mut r = rendered.to_vec();
    let mut t: Vec<Vec3<f64>> = target.iter().map(|c| Vec3::from_array(*c)).collect();
    let mut sz = size;
    let mut total = T::zero();
    for level in 0..PYRAMID_LEVELS {
        if level > 0 {
            let (r2, s2) = pyramid_down(&r, sz);
            let (t2, _) = pyramid_down(&t, sz);
            r = r2;
            t = t2;
            sz = s2;
        }
        let mut s = T::zero();
        for (a, b) in r.iter().zip(&t) {
            s += (a.x + -b.x).abs() + (a.y + -b.y).abs() + (a.z + -b.z).abs();
        }
        total += s * (1.0 / (3 * r.len()) as f64);
    }
    total
}

/// Texture loss is the L1 term plus the pyramid proxy.
pub fn tex_loss(
    rendered: &[[f64; 3]],
    target: &[[f64; 3]],
    mask: &[bool],
    size: ImageSize,
) -> Result<(f64, f64), LossError> {
    if rendered.len() != target.len() || rendered.len() != size.pixels() || mask.len() != size.pixels() {
        return Err(LossError::SizeMismatch(size, ImageSize::new(rendered.len(), 1)));
    }
    let r: Vec<Vec3<f64>> = rendered.iter().map(|c| Vec3::from_array(*c)).collect();
    Ok((tex_l1(&r, target, mask), tex_pyramid(&r, target, size)))
}

pub fn mask_mse<T: Real>(rendered: &[T], target: &[f64]) -> T {
    let mut s = T::zero();
    for (a, b) in rendered.iter().zip(target) {
        s += (*a + -*b).square();
    }
    s * (1.0 / rendered.len().max(1) as f64)
}

pub fn mask_mse_checked(rendered: &[f64], target: &[f64]) -> Result<f64, LossError> {
    if rendered.len() != target.len() {
        return Err(LossError::SizeMismatch(
            ImageSize::new(rendered.len(), 1),
            ImageSize::new(target.len(), 1),
        ));
    }
    Ok(mask_mse(rendered, target))
}

/// Clamp band of the distance-transform loss in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BidtBand {
    pub tau_min: f64,
    pub tau_max: f64,
}

impl BidtBand {
    /// Two pixels to a tenth of the shorter image side.
    pub fn for_size(size: ImageSize) -> BidtBand {
        BidtBand {
            tau_min: 2.0,
            tau_max: 0.1 * size.short_side() as f64,
        }
    }
}

/// Frozen nearest-neighbour assignments of the distance-transform loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BidtPlan {
    /// Rendered-only pixel and the target pixel center nearest its soft point.
    pub spurious: Vec<(usize, [f64; 2])>,
    /// Target-only pixel center and the rendered pixel whose soft point is nearest.
    pub missing: Vec<([f64; 2], usize)>,
}

pub fn pixel_center(p: usize, size: ImageSize) -> [f64; 2] {
    [(p % size.width) as f64 + 0.5, (p / size.width) as f64 + 0.5]
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Nearest-neighbour assignments by exhaustive search. `soft` holds the soft
/// location of every pixel in `rendered` (ignored elsewhere).
pub fn bidt_plan(soft: &[[f64; 2]], rendered: &[bool], target: &[bool], size: ImageSize) -> BidtPlan {
    let gt: Vec<[f64; 2]> = (0..size.pixels()).filter(|&p| target[p]).map(|p| pixel_center(p, size)).collect();
    let rend: Vec<usize> = (0..size.pixels()).filter(|&p| rendered[p]).collect();
    let mut plan = BidtPlan::default();
    for &p in &rend {
        if target[p] {
            continue;
        }
        let q = gt
            .iter()
            .copied()
            .min_by(|a, b| dist2(soft[p], *a).total_cmp(&dist2(soft[p], *b)));
        // with an empty target the capped distance is paid regardless
        plan.spurious.push((p, q.unwrap_or([f64::INFINITY; 2])));
    }
    for q in 0..size.pixels() {
        if !target[q] || rendered[q] {
            continue;
        }
        let qc = pixel_center(q, size);
        if let Some(&best) = rend
            .iter()
            .min_by(|a, b| dist2(qc, soft[**a]).total_cmp(&dist2(qc, soft[**b])))
        {
            plan.missing.push((qc, best));
        } else {
            plan.missing.push((qc, usize::MAX));
        }
    }
    plan
}

fn clamped_dist<T: Real>(dx: T, dy: T, band: BidtBand) -> T {
    let d2 = dx * dx + dy * dy;
    let d = d2.val().sqrt();
    if !d.is_finite() || d >= band.tau_max {
        T::cst(band.tau_max)
    } else if d <= band.tau_min {
        T::cst(band.tau_min)
    } else {
        d2.sqrt()
    }
}

/// Evaluates the loss for a frozen plan; `soft(p)` gives the soft location of
/// rendered pixel `p`.
pub fn bidt_eval<T: Real>(plan: &BidtPlan, mut soft: impl FnMut(usize) -> [T; 2], band: BidtBand) -> T {
    let mut s = T::zero();
    for &(p, q) in &plan.spurious {
        if !q[0].is_finite() {
            s += T::cst(band.tau_max);
            continue;
        }
        let ph = soft(p);
        s += clamped_dist(ph[0] + -q[0], ph[1] + -q[1], band);
    }
    for &(q, p) in &plan.missing {
        if p == usize::MAX {
            s += T::cst(band.tau_max);
            continue;
        }
        let ph = soft(p);
        s += clamped_dist(ph[0] + -q[0], ph[1] + -q[1], band);
    }
    s
}

/// Bi-directional distance-transform loss with soft locations `soft`.
pub fn bidt_loss(soft: &[[f64; 2]], rendered: &[bool], target: &[bool], size: ImageSize, band: BidtBand) -> f64 {
    let plan = bidt_plan(soft, rendered, target, size);
    bidt_eval(&plan, |p| soft[p], band)
}

pub fn edge_loss<T: Real>(verts: &[Vec3<T>], edges: &EdgeSet, rest: f64) -> T {
    if edges.is_empty() {
        return T::zero();
    }
    let mut s = T::zero();
    for e in &edges.edges {
        let len = (verts[e[0] as usize] - verts[e[1] as usize]).norm();
        s += (len + -rest).square();
    }
    s * (1.0 / edges.len() as f64)
}

/// Mean norm of the row-normalized cotangent Laplacian.
pub fn laplacian_loss<T: Real>(verts: &[Vec3<T>], faces: &[[u32; 3]]) -> T {
    if verts.is_empty() {
        return T::zero();
    }
    let lap = cotangent_laplacian(verts, faces);
    let mut s = T::zero();
    for l in &lap {
        let n2 = l.norm2();
        if n2.val() > 1e-300 {
            s += n2.sqrt();
        }
    }
    s * (1.0 / verts.len() as f64)
}
