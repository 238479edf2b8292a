//! Forward evaluation of the total loss and its reverse-mode gradient with
//! respect to the vertex offsets and every camera's `(r, t, f)`.
//!
//! A step runs in three parts. A [`Plan`] is built in `f64`: it fixes every
//! discrete choice (the fragments kept per pixel, which face produced each
//! depth pixel, binarized masks, nearest-neighbour pairs of the distance
//! transform loss). The continuous part is then evaluated per target view on
//! its own tape by generic code, and the regularizers on one more tape. The
//! same generic code evaluated in `f64` with the same plan is what the finite
//! difference checks compare against.

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{Real, Tape, Var};
use crate::camera::{Camera, CameraT, PosedCamera};
use crate::losses::{
    bidt_eval, bidt_plan, edge_loss, laplacian_loss, mask_mse, tex_l1, tex_pyramid, BidtBand, BidtPlan,
    LossReport, LossTerms, LossWeights,
};
use crate::math::{Vec3, Vec3f};
use crate::mesh::{EdgeSet, TriMesh};
use crate::raster::{
    blend_weights, depth_map, fragment_dist2, fragment_eval, project_vertex, rasterize_projected, soft_silhouette_pixel,
    softmax_blend, BlendParams, DepthMap, FragmentBuffer, ScreenVertex,
};
use crate::scene::Scene;
use crate::texture::{texture_eval, DepthProvider, SourceView, TextureConfig};

/// Fragments with a smaller normalized blend weight are left out of shading.
pub const BLEND_PRUNE: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("scene has {views} views but {cameras} cameras")]
    CameraCount { views: usize, cameras: usize },
}

/// Everything the loss needs besides the scene and parameters.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub k: usize,
    pub blur: f64,
    pub blend: BlendParams,
    pub texture: TextureConfig,
    pub weights: LossWeights,
    /// Rest length of the edge term.
    pub edge_rest: f64,
    pub background: Vec3f,
    /// Clamp band of the distance-transform loss; by default derived from the image size.
    pub bidt_band: Option<BidtBand>,
}

impl LossConfig {
    pub fn new(edge_rest: f64) -> LossConfig {
        LossConfig {
            k: 6,
            blur: 5e-5,
            blend: BlendParams::default(),
            texture: TextureConfig::default(),
            weights: LossWeights::default(),
            edge_rest,
            background: Vec3::ZERO,
            bidt_band: None,
        }
    }

    fn tex_enabled(&self) -> bool {
        self.weights.tex_l1 != 0.0 || self.weights.tex_pyramid != 0.0
    }
}

/// Flat parameter layout: `ΔV` (three per vertex) followed by `r, t, f` of
/// each camera.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub vertices: usize,
    pub cameras: usize,
}

pub const CAM_PARAMS: usize = 7;

impl ParamLayout {
    pub fn len(&self) -> usize {
        3 * self.vertices + CAM_PARAMS * self.cameras
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cam_offset(&self, i: usize) -> usize {
        3 * self.vertices + CAM_PARAMS * i
    }

    pub fn flatten(&self, offsets: &[Vec3f], cams: &[Camera]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for o in offsets {
            out.extend(o.to_array());
        }
        for c in cams {
            out.extend(c.r);
            out.extend(c.t);
            out.push(c.f);
        }
        out
    }

    pub fn cameras_from<T: Real>(&self, flat: &[T]) -> Vec<CameraT<T>> {
        (0..self.cameras)
            .map(|i| {
                let o = self.cam_offset(i);
                let p = &flat[o..o + CAM_PARAMS];
                CameraT {
                    r: Vec3::new(p[0], p[1], p[2]),
                    t: Vec3::new(p[3], p[4], p[5]),
                    f: p[6],
                }
            })
            .collect()
    }
}

/// Gradient accumulators shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTape {
    pub offsets: Vec<Vec3f>,
    pub cams: Vec<Camera>,
    pub iteration: u64,
}

impl ParamTape {
    pub fn new(layout: ParamLayout) -> ParamTape {
        ParamTape {
            offsets: vec![Vec3::ZERO; layout.vertices],
            cams: vec![
                Camera {
                    r: [0.0; 3],
                    t: [0.0; 3],
                    f: 0.0
                };
                layout.cameras
            ],
            iteration: 0,
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            vertices: self.offsets.len(),
            cameras: self.cams.len(),
        }
    }

    pub fn zero_grad(&mut self) {
        let it = self.iteration;
        *self = ParamTape::new(self.layout());
        self.iteration = it;
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.layout().flatten(&self.offsets, &self.cams)
    }

    /// Adds a flat gradient vector into the accumulators.
    pub fn accumulate(&mut self, flat: &[f64]) {
        let layout = self.layout();
        assert_eq!(flat.len(), layout.len(), "gradient shape mismatch");
        for (i, o) in self.offsets.iter_mut().enumerate() {
            *o += Vec3::new(flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]);
        }
        for (i, c) in self.cams.iter_mut().enumerate() {
            let p = &flat[layout.cam_offset(i)..layout.cam_offset(i) + CAM_PARAMS];
            for k in 0..3 {
                c.r[k] += p[k];
                c.t[k] += p[3 + k];
            }
            c.f += p[6];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Discrete structure of one target view.
#[derive(Clone, Debug)]
pub struct ViewPlan {
    pub frags: FragmentBuffer,
    /// Per fragment: whether it takes part in blending.
    pub shaded: Vec<bool>,
    pub depth: DepthMap,
    pub silhouette: Vec<f64>,
    pub union_mask: Vec<bool>,
    pub rendered_mask: Vec<bool>,
    pub bidt: BidtPlan,
}

/// Frozen discrete decisions for one evaluation point.
#[derive(Clone, Debug)]
pub struct Plan {
    pub layout: ParamLayout,
    pub base: Vec<Vec3f>,
    pub faces: Vec<[u32; 3]>,
    pub vertex_faces: Vec<Vec<u32>>,
    pub edges: EdgeSet,
    pub views: Vec<ViewPlan>,
    pub cfg: LossConfig,
    pub band: BidtBand,
}

/// Builds the plan at the mesh's current offsets and the given cameras.
pub fn build_plan(scene: &Scene, mesh: &TriMesh, cams: &[Camera], cfg: &LossConfig) -> Result<Plan, PipelineError> {
    if mesh.is_empty() {
        return Err(PipelineError::EmptyMesh);
    }
    if cams.len() != scene.images.len() {
        return Err(PipelineError::CameraCount {
            views: scene.images.len(),
            cameras: cams.len(),
        });
    }
    let size = scene.size;
    let verts = mesh.vertices();
    let faces = mesh.faces().to_vec();
    let mut vertex_faces = vec![Vec::new(); verts.len()];
    for (fi, f) in faces.iter().enumerate() {
        for &v in f {
            vertex_faces[v as usize].push(fi as u32);
        }
    }
    let views = scene
        .images
        .iter()
        .enumerate()
        .map(|(vi, _)| {
            let posed = cams[vi].lift::<f64>().posed();
            let sv: Vec<Option<ScreenVertex<f64>>> = verts.iter().map(|v| project_vertex(&posed, *v)).collect();
            let frags = rasterize_projected(&sv, &faces, size, cfg.k, cfg.blur);
            let depth = depth_map(&frags);
            let mut shaded = Vec::with_capacity(frags.total());
            let mut silhouette = vec![0.0; size.pixels()];
            let mut soft = vec![[0.0; 2]; size.pixels()];
            for p in 0..size.pixels() {
                let fr = frags.pixel(p);
                let d: Vec<f64> = fr.iter().map(|f| f.dist2).collect();
                let z: Vec<f64> = fr.iter().map(|f| f.z).collect();
                silhouette[p] = soft_silhouette_pixel(d.iter().copied(), cfg.blur);
                let (w, _) = blend_weights(&d, &z, cfg.blur, &cfg.blend);
                let keep: Vec<bool> = w.iter().map(|x| *x >= BLEND_PRUNE).collect();
                let mut num = [0.0; 2];
                let mut den = 0.0;
                for ((f, wk), k) in fr.iter().zip(&w).zip(&keep) {
                    if !*k {
                        continue;
                    }
                    let t = faces[f.face as usize];
                    let mut x = Vec3::ZERO;
                    for j in 0..3 {
                        x += verts[t[j] as usize].scale(f.bary[j]);
                    }
                    if let Ok(pp) = posed.project(x) {
                        let s = size.ndc_to_screen(pp.ndc);
                        num[0] += wk * s[0];
                        num[1] += wk * s[1];
                        den += wk;
                    }
                }
                soft[p] = if den > 0.0 {
                    [num[0] / den, num[1] / den]
                } else {
                    crate::losses::pixel_center(p, size)
                };
                shaded.extend(keep);
            }
            let target = &scene.masks[vi].data;
            let gt_bool: Vec<bool> = target.iter().map(|&a| a >= 0.5).collect();
            let rendered_mask: Vec<bool> = silhouette.iter().map(|&a| a >= 0.5).collect();
            let union_mask = gt_bool.iter().zip(&rendered_mask).map(|(a, b)| *a || *b).collect();
            let bidt = bidt_plan(&soft, &rendered_mask, &gt_bool, size);
            ViewPlan {
                frags,
                shaded,
                depth,
                silhouette,
                union_mask,
                rendered_mask,
                bidt,
            }
        })
        .collect();
    Ok(Plan {
        layout: ParamLayout {
            vertices: verts.len(),
            cameras: cams.len(),
        },
        base: mesh.base_vertices().to_vec(),
        faces,
        vertex_faces,
        edges: EdgeSet {
            edges: mesh.edges().edges,
            rest_length: cfg.edge_rest,
        },
        views,
        cfg: *cfg,
        band: cfg.bidt_band.unwrap_or_else(|| BidtBand::for_size(size)),
    })
}

/// Lazily evaluated geometry shared by everything on one tape.
struct Geometry<'a, T> {
    plan: &'a Plan,
    verts: Vec<Vec3<T>>,
    posed: Vec<PosedCamera<T>>,
    proj: Vec<Vec<Option<Option<ScreenVertex<T>>>>>,
    depth: Vec<Vec<Option<T>>>,
    face_normal: Vec<Option<Vec3<T>>>,
    vertex_normal: Vec<Option<Vec3<T>>>,
}

impl<'a, T: Real> Geometry<'a, T> {
    fn new(plan: &'a Plan, flat: &[T]) -> Self {
        let verts: Vec<Vec3<T>> = plan
            .base
            .iter()
            .enumerate()
            .map(|(i, b)| Vec3::new(flat[3 * i] + b.x, flat[3 * i + 1] + b.y, flat[3 * i + 2] + b.z))
            .collect();
        let posed: Vec<PosedCamera<T>> = plan.layout.cameras_from(flat).iter().map(|c| c.posed()).collect();
        let nv = verts.len();
        let npix = plan.views.first().map_or(0, |v| v.depth.size.pixels());
        Geometry {
            plan,
            proj: vec![vec![None; nv]; posed.len()],
            depth: vec![vec![None; npix]; posed.len()],
            face_normal: vec![None; plan.faces.len()],
            vertex_normal: vec![None; nv],
            verts,
            posed,
        }
    }

    fn project(&mut self, view: usize, v: u32) -> Option<ScreenVertex<T>> {
        let slot = &mut self.proj[view][v as usize];
        if slot.is_none() {
            *slot = Some(project_vertex(&self.posed[view], self.verts[v as usize]));
        }
        slot.unwrap()
    }

    fn triangle(&mut self, view: usize, face: u32) -> Option<[ScreenVertex<T>; 3]> {
        let f = self.plan.faces[face as usize];
        Some([self.project(view, f[0])?, self.project(view, f[1])?, self.project(view, f[2])?])
    }

    fn normal(&mut self, v: u32) -> Vec3<T> {
        if let Some(n) = self.vertex_normal[v as usize] {
            return n;
        }
        let mut s = Vec3::<T>::zero();
        for &fi in &self.plan.vertex_faces[v as usize] {
            let fnorm = match self.face_normal[fi as usize] {
                Some(n) => n,
                None => {
                    let f = self.plan.faces[fi as usize];
                    let (a, b, c) = (self.verts[f[0] as usize], self.verts[f[1] as usize], self.verts[f[2] as usize]);
                    let n = (b - a).cross(c - a);
                    self.face_normal[fi as usize] = Some(n);
                    n
                }
            };
            s += fnorm;
        }
        let n = s.normalized_or_zero();
        self.vertex_normal[v as usize] = Some(n);
        n
    }
}

impl<T: Real> DepthProvider<T> for Geometry<'_, T> {
    fn depth(&mut self, view: usize, pixel: usize) -> T {
        if let Some(d) = self.depth[view][pixel] {
            return d;
        }
        let dm = &self.plan.views[view].depth;
        let fixed = dm.depth[pixel];
        let d = if self.plan.cfg.texture.detach_depth {
            T::cst(fixed)
        } else {
            let size = dm.size;
            let (px, py) = size.pixel_center_ndc(pixel % size.width, pixel / size.width);
            self.triangle(view, dm.face[pixel])
                .and_then(|tri| fragment_eval(px, py, &tri))
                .map(|g| g.z)
                .unwrap_or(T::cst(fixed))
        };
        self.depth[view][pixel] = Some(d);
        d
    }
}

/// Per-view outputs of a generic evaluation.
pub struct ViewEval<T> {
    pub terms: LossTerms<T>,
    pub rendered: Vec<Vec3<T>>,
    pub silhouette: Vec<T>,
}

/// Loss terms of target view `view`, generic over the scalar.
fn eval_view<T: Real>(plan: &Plan, scene: &Scene, flat: &[T], view: usize) -> ViewEval<T> {
    let cfg = &plan.cfg;
    let vp = &plan.views[view];
    let size = vp.frags.size;
    let mut geo = Geometry::new(plan, flat);
    let sources: Vec<SourceView<'_, T>> = geo
        .posed
        .iter()
        .zip(&scene.images)
        .zip(&plan.views)
        .map(|((c, img), v)| SourceView {
            cam: *c,
            image: img,
            depth: &v.depth,
        })
        .collect();
    let tex_on = cfg.tex_enabled();
    let mut rendered = vec![cfg.background.lift::<T>(); size.pixels()];
    let mut silhouette = vec![T::zero(); size.pixels()];
    // soft pixel locations, filled on demand for the distance-transform term
    let mut soft: Vec<Option<[T; 2]>> = vec![None; size.pixels()];
    let mut need_soft = vec![false; size.pixels()];
    for (p, _) in &vp.bidt.spurious {
        need_soft[*p] = true;
    }
    for (_, p) in &vp.bidt.missing {
        if *p != usize::MAX {
            need_soft[*p] = true;
        }
    }
    let mut base = 0usize;
    for p in 0..size.pixels() {
        let fr = vp.frags.pixel(p);
        if fr.is_empty() {
            continue;
        }
        let shaded = &vp.shaded[base..base + fr.len()];
        base += fr.len();
        let (col, row) = (p % size.width, p / size.width);
        let (px, py) = size.pixel_center_ndc(col, row);
        let mut d2 = Vec::with_capacity(fr.len());
        let mut zs = Vec::with_capacity(fr.len());
        let mut bary = Vec::with_capacity(fr.len());
        let mut sil_d = Vec::with_capacity(fr.len());
        for (f, s) in fr.iter().zip(shaded) {
            let Some(tri) = geo.triangle(view, f.face) else {
                continue;
            };
            if !*s {
                if let Some(d) = fragment_dist2(px, py, &tri) {
                    sil_d.push(d);
                }
                continue;
            }
            let Some(g) = fragment_eval(px, py, &tri) else {
                continue;
            };
            sil_d.push(g.dist2);
            d2.push(g.dist2);
            zs.push(g.z);
            bary.push((f, g.bary));
        }
        silhouette[p] = soft_silhouette_pixel(sil_d, cfg.blur);
        if !(tex_on || need_soft[p]) || bary.is_empty() {
            continue;
        }
        let (w, w_bg) = blend_weights(&d2, &zs, cfg.blur, &cfg.blend);
        if tex_on {
            let mut colors = Vec::with_capacity(bary.len());
            for (f, b) in &bary {
                let t = plan.faces[f.face as usize];
                let mut x = Vec3::<T>::zero();
                let mut n = Vec3::<T>::zero();
                for j in 0..3 {
                    x += geo.verts[t[j] as usize].scale(b[j]);
                    n += geo.normal(t[j]).scale(b[j]);
                }
                let n = n.normalized_or_zero();
                colors.push(texture_eval(x, n, &sources, &mut geo, Some(view), &cfg.texture).color);
            }
            rendered[p] = softmax_blend(&colors, &w, w_bg, cfg.background);
        }
        if need_soft[p] {
            // soft location with the fragment barycentrics held fixed
            let mut num = [T::zero(), T::zero()];
            let mut den = T::zero();
            for ((f, _), wk) in bary.iter().zip(&w) {
                let t = plan.faces[f.face as usize];
                let mut x = Vec3::<T>::zero();
                for j in 0..3 {
                    x += geo.verts[t[j] as usize].scale_f(f.bary[j]);
                }
                if let Ok(pp) = geo.posed[view].project(x) {
                    let s = size.ndc_to_screen(pp.ndc);
                    num[0] += *wk * s[0];
                    num[1] += *wk * s[1];
                    den += *wk;
                }
            }
            if den.val() > 0.0 {
                let inv = den.recip();
                soft[p] = Some([num[0] * inv, num[1] * inv]);
            }
        }
    }
    let target = &scene.images[view].data;
    let mut terms = LossTerms::zero();
    if tex_on {
        terms.tex_l1 = tex_l1(&rendered, target, &vp.union_mask);
        terms.tex_pyramid = tex_pyramid(&rendered, target, size);
    }
    terms.mask_mse = mask_mse(&silhouette, &scene.masks[view].data);
    let bidt = bidt_eval(
        &vp.bidt,
        |p| soft[p].unwrap_or_else(|| crate::losses::pixel_center(p, size).map(T::cst)),
        plan.band,
    );
    terms.mask_bidt = bidt * (1.0 / size.pixels() as f64);
    ViewEval {
        terms,
        rendered,
        silhouette,
    }
}

fn eval_regularizers<T: Real>(plan: &Plan, flat: &[T]) -> LossTerms<T> {
    let verts: Vec<Vec3<T>> = plan
        .base
        .iter()
        .enumerate()
        .map(|(i, b)| Vec3::new(flat[3 * i] + b.x, flat[3 * i + 1] + b.y, flat[3 * i + 2] + b.z))
        .collect();
    let mut t = LossTerms::zero();
    t.edge = edge_loss(&verts, &plan.edges, plan.cfg.edge_rest);
    t.laplacian = laplacian_loss(&verts, &plan.faces);
    t
}

/// Loss terms at the flat parameters `flat`, with the plan held fixed.
pub fn evaluate_terms(plan: &Plan, scene: &Scene, flat: &[f64]) -> LossTerms<f64> {
    let mut terms = LossTerms::<f64>::zero();
    for v in 0..plan.views.len() {
        terms.add(&eval_view(plan, scene, flat, v).terms);
    }
    terms.add(&eval_regularizers(plan, flat));
    terms
}

pub fn evaluate_total(plan: &Plan, scene: &Scene, flat: &[f64]) -> f64 {
    evaluate_terms(plan, scene, flat).weighted_total(&plan.cfg.weights)
}

/// Soft renders of every view at the plan's parameters (colors, silhouettes).
pub fn render_views(plan: &Plan, scene: &Scene, flat: &[f64]) -> Vec<(Vec<Vec3f>, Vec<f64>)> {
    (0..plan.views.len())
        .map(|v| {
            let e = eval_view(plan, scene, flat, v);
            (e.rendered, e.silhouette)
        })
        .collect()
}

fn tape_gradient(flat: &[f64], f: impl FnOnce(&[Var]) -> (Var, LossTerms<Var>)) -> (LossTerms<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let (leaves, total, terms) = tape.record(|| {
        let leaves: Vec<Var> = flat.iter().map(|&p| Var::leaf(p)).collect();
        let (total, terms) = f(&leaves);
        (leaves, total, terms)
    });
    let adj = tape.backward(&[(total, 1.0)]);
    (terms.value(), leaves.iter().map(|l| adj.wrt(*l)).collect())
}

fn check_terms(t: &LossTerms<f64>, ctx: &str) -> Result<(), PipelineError> {
    let named = [
        ("tex_l1", t.tex_l1),
        ("tex_pyramid", t.tex_pyramid),
        ("mask_mse", t.mask_mse),
        ("mask_bidt", t.mask_bidt),
        ("edge", t.edge),
        ("laplacian", t.laplacian),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(PipelineError::NonFinite(format!("{name} ({ctx})")));
        }
    }
    Ok(())
}

/// Loss report and exact gradients for a plan at parameters `flat`.
pub fn gradient_with_plan(plan: &Plan, scene: &Scene, flat: &[f64]) -> Result<(LossReport, Vec<f64>), PipelineError> {
    let w = plan.cfg.weights;
    let per_view: Vec<(LossTerms<f64>, Vec<f64>)> = (0..plan.views.len())
        .into_par_iter()
        .map(|v| {
            tape_gradient(flat, |x| {
                let t = eval_view(plan, scene, x, v).terms;
                (t.weighted_total(&w), t)
            })
        })
        .collect();
    let reg = tape_gradient(flat, |x| {
        let t = eval_regularizers(plan, x);
        (t.weighted_total(&w), t)
    });
    let mut terms = LossTerms::<f64>::zero();
    let mut grad = vec![0.0; flat.len()];
    for (v, (t, g)) in per_view.iter().enumerate() {
        check_terms(t, &format!("view {v}"))?;
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(PipelineError::NonFinite(format!("gradient of view {v} at parameter {i}")));
        }
        terms.add(t);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    check_terms(&reg.0, "regularizers")?;
    if let Some(i) = reg.1.iter().position(|x| !x.is_finite()) {
        return Err(PipelineError::NonFinite(format!("gradient of regularizers at parameter {i}")));
    }
    terms.add(&reg.0);
    for (a, b) in grad.iter_mut().zip(&reg.1) {
        *a += b;
    }
    Ok((terms.report(&w), grad))
}

/// One forward/backward pass at the mesh's offsets and the given cameras.
pub fn forward_backward(
    scene: &Scene,
    mesh: &TriMesh,
    cams: &[Camera],
    cfg: &LossConfig,
) -> Result<(LossReport, ParamTape), PipelineError> {
    let plan = build_plan(scene, mesh, cams, cfg)?;
    let flat = plan.layout.flatten(mesh.offsets(), cams);
    let (report, grad) = gradient_with_plan(&plan, scene, &flat)?;
    let mut tape = ParamTape::new(plan.layout);
    tape.accumulate(&grad);
    Ok((report, tape))
}

/// Loss report without gradients.
pub fn total_loss(scene: &Scene, mesh: &TriMesh, cams: &[Camera], cfg: &LossConfig) -> Result<LossReport, PipelineError> {
    let plan = build_plan(scene, mesh, cams, cfg)?;
    let flat = plan.layout.flatten(mesh.offsets(), cams);
    let terms = evaluate_terms(&plan, scene, &flat);
    check_terms(&terms, "forward")?;
    Ok(terms.report(&cfg.weights))
}
