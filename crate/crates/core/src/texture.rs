//! Texture transfer: the color of a surface point is a visibility- and
//! orientation-weighted blend of its projections into the source views.

use crate::autodiff::Real;
use crate::camera::{Camera, ImageSize, PosedCamera, Z_NEAR};
use crate::imageio::RgbImage;
use crate::math::{Vec3, Vec3f};
use crate::raster::{
    blend_weights, depth_map, project_vertices, rasterize_projected, softmax_blend, BlendParams, DepthMap,
    BACKGROUND_DEPTH,
};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TextureConfig {
    pub tau_vis: f64,
    pub tau_cos: f64,
    pub fallback: [f64; 3],
    /// Treat sampled depth maps as constants.
    pub detach_depth: bool,
}

impl Default for TextureConfig {
    fn default() -> Self {
        TextureConfig {
            tau_vis: 1e-4,
            tau_cos: 0.1,
            fallback: [0.5; 3],
            detach_depth: false,
        }
    }
}

/// Views whose raw weight falls below this fraction of the best view are
/// dropped before colors are fetched.
const WEIGHT_PRUNE: f64 = 1e-12;

/// Past this many temperatures behind the depth map a view is fully occluded.
const OCCLUDED_GAP: f64 = 40.0;

pub fn visibility_weight<T: Real>(z: T, d: T, tau_vis: f64) -> T {
    if d.val() >= 0.5 * BACKGROUND_DEPTH {
        return T::zero();
    }
    let gap = z - d;
    if gap.val() <= 0.0 {
        T::one()
    } else {
        (gap * (-1.0 / tau_vis)).exp()
    }
}

pub fn orientation_weight<T: Real>(n_z: T, tau_cos: f64) -> T {
    if n_z.val() < 0.0 {
        ((n_z + 1.0) * (-1.0 / tau_cos)).exp()
    } else {
        T::zero()
    }
}

/// Bilinear color lookup at continuous pixel coordinates with clamp-to-edge.
pub fn bilinear_color<T: Real>(img: &RgbImage, u: T, v: T) -> Vec3<T> {
    let (w, h) = (img.size.width, img.size.height);
    let fx = u + -0.5;
    let fy = v + -0.5;
    let x0 = fx.val().floor();
    let y0 = fy.val().floor();
    let tx = fx + -x0;
    let ty = fy + -y0;
    let cl = |i: f64, n: usize| (i.max(0.0) as usize).min(n - 1);
    let (i0, i1) = (cl(x0, w), cl(x0 + 1.0, w));
    let (j0, j1) = (cl(y0, h), cl(y0 + 1.0, h));
    let c00 = img.get(i0, j0);
    let c10 = img.get(i1, j0);
    let c01 = img.get(i0, j1);
    let c11 = img.get(i1, j1);
    let mut out = [T::zero(); 3];
    for k in 0..3 {
        let top = tx * (c10[k] - c00[k]) + c00[k];
        let bot = tx * (c11[k] - c01[k]) + c01[k];
        out[k] = ty * (bot - top) + top;
    }
    Vec3::new(out[0], out[1], out[2])
}

/// Supplies (possibly differentiable) depth-map pixel values.
pub trait DepthProvider<T> {
    fn depth(&mut self, view: usize, pixel: usize) -> T;
}

/// Depth maps taken as constants.
pub struct ConstDepth<'a>(pub &'a [DepthMap]);

impl<T: Real> DepthProvider<T> for ConstDepth<'_> {
    fn depth(&mut self, view: usize, pixel: usize) -> T {
        T::cst(self.0[view].depth[pixel])
    }
}

/// Bilinear depth at continuous pixel coordinates. Taps on background are
/// replaced by the nearest finite tap; `None` when all four are background.
pub fn sample_depth<T: Real, P: DepthProvider<T>>(
    map: &DepthMap,
    provider: &mut P,
    view: usize,
    u: T,
    v: T,
) -> Option<T> {
    let (w, h) = (map.size.width, map.size.height);
    let fx = u.val() - 0.5;
    let fy = v.val() - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let cl = |i: f64, n: usize| (i.max(0.0) as usize).min(n - 1);
    let (i0, i1) = (cl(x0, w), cl(x0 + 1.0, w));
    let (j0, j1) = (cl(y0, h), cl(y0 + 1.0, h));
    let taps = [j0 * w + i0, j0 * w + i1, j1 * w + i0, j1 * w + i1];
    let finite = taps.map(|p| !map.is_background(p));
    if finite.iter().all(|f| *f) {
        let tx = u + -(x0 + 0.5);
        let ty = v + -(y0 + 0.5);
        let d = taps.map(|p| provider.depth(view, p));
        let top = tx * (d[1] - d[0]) + d[0];
        let bot = tx * (d[3] - d[2]) + d[2];
        return Some(ty * (bot - top) + top);
    }
    let (tx, ty) = (fx - x0, fy - y0);
    let corner = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
    let mut best: Option<(f64, usize)> = None;
    for k in 0..4 {
        if !finite[k] {
            continue;
        }
        let d2 = (tx - corner[k].0).powi(2) + (ty - corner[k].1).powi(2);
        if best.is_none_or(|(bd, _)| d2 < bd) {
            best = Some((d2, k));
        }
    }
    best.map(|(_, k)| provider.depth(view, taps[k]))
}

/// A source view prepared for texture lookups.
#[derive(Clone, Copy)]
pub struct SourceView<'a, T> {
    pub cam: PosedCamera<T>,
    pub image: &'a RgbImage,
    pub depth: &'a DepthMap,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewWeight<T> {
    pub sigma: T,
    pub gamma: T,
    pub w: T,
}

#[derive(Clone, Debug)]
pub struct Texel<T> {
    pub color: Vec3<T>,
    /// One entry per source view; zero for invalid, pruned or excluded views.
    pub weights: Vec<ViewWeight<T>>,
    pub confident: bool,
}

/// Depth values of a single map.
struct MapDepth<'a>(&'a DepthMap);

impl DepthProvider<f64> for MapDepth<'_> {
    fn depth(&mut self, _view: usize, pixel: usize) -> f64 {
        self.0.depth[pixel]
    }
}

/// Source views contributing to the color at `x`, decided in `f64` from the
/// stored depth maps so that rejected views record nothing on a tape.
fn contributing_views<T: Real>(
    x: Vec3f,
    n: Vec3f,
    views: &[SourceView<'_, T>],
    exclude: Option<usize>,
    cfg: &TextureConfig,
) -> Vec<usize> {
    let mut cands: Vec<(usize, f64)> = Vec::with_capacity(views.len());
    let mut best = 0.0f64;
    for (i, sv) in views.iter().enumerate() {
        if Some(i) == exclude {
            continue;
        }
        let cam = sv.cam.value();
        let n_z = cam.view_dir_z(n);
        if n_z >= 0.0 {
            continue;
        }
        let xv = cam.to_view(x);
        if xv.z <= Z_NEAR {
            continue;
        }
        let Ok(p) = cam.project_view(xv) else {
            continue;
        };
        let size = sv.image.size;
        if !size.in_frame(p.ndc) {
            continue;
        }
        let [u, v] = size.ndc_to_screen(p.ndc);
        let Some(d) = sample_depth(sv.depth, &mut MapDepth(sv.depth), i, u, v) else {
            continue;
        };
        if p.z - d > OCCLUDED_GAP * cfg.tau_vis {
            continue;
        }
        let raw = visibility_weight(p.z, d, cfg.tau_vis) * orientation_weight(n_z, cfg.tau_cos);
        if raw <= 0.0 {
            continue;
        }
        best = best.max(raw);
        cands.push((i, raw));
    }
    cands.into_iter().filter(|&(_, raw)| raw >= WEIGHT_PRUNE * best).map(|(i, _)| i).collect()
}

/// Texture color at surface point `x` with world-space unit normal `n`.
pub fn texture_eval<T: Real, P: DepthProvider<T>>(
    x: Vec3<T>,
    n: Vec3<T>,
    views: &[SourceView<'_, T>],
    provider: &mut P,
    exclude: Option<usize>,
    cfg: &TextureConfig,
) -> Texel<T> {
    let zero = ViewWeight {
        sigma: T::zero(),
        gamma: T::zero(),
        w: T::zero(),
    };
    let mut weights = vec![zero; views.len()];
    let chosen = contributing_views(x.value(), n.value(), views, exclude, cfg);
    if chosen.is_empty() {
        return Texel {
            color: Vec3::from_array(cfg.fallback).lift(),
            weights,
            confident: false,
        };
    }
    let mut total = T::zero();
    let mut lookups = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        let sv = &views[i];
        let n_z = sv.cam.view_dir_z(n);
        let p = sv.cam.project_view(sv.cam.to_view(x)).expect("checked in front of the camera");
        let [u, v] = sv.image.size.ndc_to_screen(p.ndc);
        let d = sample_depth(sv.depth, provider, i, u, v).expect("checked to have depth");
        let d = if cfg.detach_depth { d.detach() } else { d };
        let sigma = visibility_weight(p.z, d, cfg.tau_vis);
        let gamma = orientation_weight(n_z, cfg.tau_cos);
        let raw = sigma * gamma;
        total += raw;
        lookups.push((i, sigma, gamma, raw, u, v));
    }
    let inv = total.recip();
    let mut color = Vec3::<T>::zero();
    for (i, sigma, gamma, raw, u, v) in lookups {
        let w = raw * inv;
        weights[i] = ViewWeight { sigma, gamma, w };
        color += bilinear_color(views[i].image, u, v).scale(w);
    }
    Texel {
        color,
        weights,
        confident: true,
    }
}

/// Rendering settings shared by the renderer helpers.
#[derive(Clone, Copy, Debug)]
pub struct RenderSettings {
    pub size: ImageSize,
    pub k: usize,
    pub blur: f64,
    pub blend: BlendParams,
    pub texture: TextureConfig,
    pub background: Vec3f,
}

/// Hard depth maps of the mesh in every camera.
pub fn depth_maps(verts: &[Vec3f], faces: &[[u32; 3]], cams: &[Camera], size: ImageSize) -> Vec<DepthMap> {
    cams.iter()
        .map(|c| {
            let sv = project_vertices(verts, &c.lift::<f64>());
            depth_map(&rasterize_projected(&sv, faces, size, 1, 0.0))
        })
        .collect()
}

fn source_views<'a>(cams: &[Camera], views: &'a [RgbImage], depth: &'a [DepthMap]) -> Vec<SourceView<'a, f64>> {
    cams.iter()
        .zip(views)
        .zip(depth)
        .map(|((c, img), d)| SourceView {
            cam: c.lift::<f64>().posed(),
            image: img,
            depth: d,
        })
        .collect()
}

/// Leave-one-out (or full) texture render of `target` with the given camera,
/// which may differ from the source cameras.
pub fn render_textured_with(
    verts: &[Vec3f],
    faces: &[[u32; 3]],
    normals: &[Vec3f],
    cams: &[Camera],
    views: &[RgbImage],
    target_cam: &Camera,
    exclude: Option<usize>,
    rs: &RenderSettings,
) -> RgbImage {
    let depth = depth_maps(verts, faces, cams, views[0].size);
    let sources = source_views(cams, views, &depth);
    let sv = project_vertices(verts, &target_cam.lift::<f64>());
    let buf = rasterize_projected(&sv, faces, rs.size, rs.k, rs.blur);
    let mut provider = ConstDepth(&depth);
    let mut data = Vec::with_capacity(rs.size.pixels());
    for p in 0..rs.size.pixels() {
        let fr = buf.pixel(p);
        let d: Vec<f64> = fr.iter().map(|f| f.dist2).collect();
        let z: Vec<f64> = fr.iter().map(|f| f.z).collect();
        let (w, bg) = blend_weights(&d, &z, rs.blur, &rs.blend);
        let colors: Vec<Vec3f> = fr
            .iter()
            .zip(&w)
            .map(|(f, wk)| {
                if *wk < 1e-12 {
                    return Vec3::ZERO;
                }
                let t = faces[f.face as usize];
                let mut x = Vec3::ZERO;
                let mut nn = Vec3::ZERO;
                for j in 0..3 {
                    x += verts[t[j] as usize].scale(f.bary[j]);
                    nn += normals[t[j] as usize].scale(f.bary[j]);
                }
                texture_eval(x, nn.normalized_or_zero(), &sources, &mut provider, exclude, &rs.texture).color
            })
            .collect();
        data.push(softmax_blend(&colors, &w, bg, rs.background).to_array());
    }
    RgbImage { size: rs.size, data }
}

/// Leave-one-out render of view `target` from all other views.
pub fn render_textured(
    verts: &[Vec3f],
    faces: &[[u32; 3]],
    normals: &[Vec3f],
    cams: &[Camera],
    views: &[RgbImage],
    target: usize,
    rs: &RenderSettings,
) -> RgbImage {
    render_textured_with(verts, faces, normals, cams, views, &cams[target], Some(target), rs)
}

/// Texture color at every vertex using all views.
pub fn bake_vertex_colors(
    verts: &[Vec3f],
    faces: &[[u32; 3]],
    normals: &[Vec3f],
    cams: &[Camera],
    views: &[RgbImage],
    cfg: &TextureConfig,
) -> Vec<(Vec3f, bool)> {
    let depth = depth_maps(verts, faces, cams, views[0].size);
    let sources = source_views(cams, views, &depth);
    let mut provider = ConstDepth(&depth);
    verts
        .iter()
        .zip(normals)
        .map(|(x, n)| {
            let t = texture_eval(*x, *n, &sources, &mut provider, None, cfg);
            (t.color, t.confident)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, gradient, Var};
    use crate::raster::NO_FACE;
    use proptest::prelude::*;

    fn flat_depth(size: ImageSize, z: f64) -> DepthMap {
        DepthMap {
            size,
            depth: vec![z; size.pixels()],
            face: vec![0; size.pixels()],
        }
    }

    fn checker(size: ImageSize) -> RgbImage {
        RgbImage {
            size,
            data: (0..size.pixels())
                .map(|p| {
                    let (c, r) = (p % size.width, p / size.width);
                    let v = ((c / 2 + r / 2) % 2) as f64;
                    [v, 0.5 * v + 0.2, 1.0 - v]
                })
                .collect(),
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(visibility_weight(2.0, 2.0, 1e-4), 1.0);
        assert!((visibility_weight(2.0 + 1e-4, 2.0, 1e-4) - (-1f64).exp()).abs() < 1e-9);
        assert!((visibility_weight(2.0 + 1e-3, 2.0, 1e-4) - 4.54e-5).abs() < 1e-7);
        assert_eq!(visibility_weight(2.0, BACKGROUND_DEPTH, 1e-4), 0.0);
        assert_eq!(orientation_weight(-1.0, 0.1), 1.0);
        assert_eq!(orientation_weight(0.3, 0.1), 0.0);
        assert!((orientation_weight(-0.9, 0.1) - (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn occluded_far_plane_is_invisible() {
        let tau = 1e-4;
        for gap in [10.0 * tau + 1e-9, 20.0 * tau, 0.5] {
            assert!(visibility_weight(2.0 + gap, 2.0, tau) < (-10f64).exp());
        }
    }

    fn front_view() -> Camera {
        Camera::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 2.0), 0.5).unwrap()
    }

    #[test]
    fn single_view_is_exact_bilinear_sample() {
        let size = ImageSize::square(8);
        let img = checker(size);
        let dm = flat_depth(size, 2.0);
        let cam = front_view();
        let sv = [SourceView {
            cam: cam.lift::<f64>().posed(),
            image: &img,
            depth: &dm,
        }];
        let x = Vec3::new(0.13, -0.21, 0.0);
        let t = texture_eval(x, Vec3::new(0.0, 0.0, -1.0), &sv, &mut ConstDepth(std::slice::from_ref(&dm)), None, &TextureConfig::default());
        let p = cam.project(x).unwrap();
        let [u, v] = size.ndc_to_screen(p.ndc);
        assert!(t.confident);
        assert_eq!(t.color, bilinear_color(&img, u, v));
        assert_eq!(t.weights[0].w, 1.0);
    }

    #[test]
    fn convex_combination_and_exclusion() {
        let size = ImageSize::square(8);
        let c = [0.3, 0.6, 0.9];
        let img = RgbImage::filled(size, c);
        let dm = [flat_depth(size, 2.0), flat_depth(size, 2.0)];
        let cam = front_view();
        let sv = [
            SourceView { cam: cam.lift::<f64>().posed(), image: &img, depth: &dm[0] },
            SourceView { cam: cam.lift::<f64>().posed(), image: &img, depth: &dm[1] },
        ];
        let cfg = TextureConfig::default();
        let n = Vec3::new(0.0, 0.0, -1.0);
        let t = texture_eval(Vec3::ZERO, n, &sv, &mut ConstDepth(&dm), None, &cfg);
        assert!((t.color - Vec3::from_array(c)).max_abs() < 1e-15);
        assert!((t.weights[0].w + t.weights[1].w - 1.0).abs() < 1e-12);

        let t = texture_eval(Vec3::ZERO, n, &sv[..1], &mut ConstDepth(&dm), Some(0), &cfg);
        assert!(!t.confident);
        assert_eq!(t.color, Vec3::from_array(cfg.fallback));
    }

    #[test]
    fn nearest_finite_fallback_for_depth() {
        let size = ImageSize::square(4);
        let mut dm = flat_depth(size, 3.0);
        dm.depth[0] = BACKGROUND_DEPTH;
        dm.face[0] = NO_FACE;
        dm.depth[1] = 2.0;
        // the sample sits nearest the background tap; the closest finite tap is pixel 1
        let d = sample_depth(&dm, &mut ConstDepth(std::slice::from_ref(&dm)), 0, 0.9, 0.6).unwrap();
        assert_eq!(d, 2.0);
        let all_bg = DepthMap {
            size,
            depth: vec![BACKGROUND_DEPTH; 16],
            face: vec![NO_FACE; 16],
        };
        assert!(sample_depth::<f64, _>(&all_bg, &mut ConstDepth(std::slice::from_ref(&all_bg)), 0, 1.5, 1.5).is_none());
    }

    /// Two parallel quads in front of a camera, both fronto-parallel.
    fn quad(z: f64, half: f64) -> (Vec<Vec3f>, Vec<[u32; 3]>) {
        (
            vec![
                Vec3::new(-half, -half, z),
                Vec3::new(half, -half, z),
                Vec3::new(half, half, z),
                Vec3::new(-half, half, z),
            ],
            // wound so the normal points towards the camera at the origin side (-z)
            vec![[0, 2, 1], [0, 3, 2]],
        )
    }

    #[test]
    fn render_examples() {
        let size = ImageSize::square(16);
        let (v, f) = quad(0.0, 0.5);
        let normals = vec![Vec3::new(0.0, 0.0, -1.0); 4];
        let cams = vec![
            Camera::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 2.0), 0.4).unwrap(),
            Camera::new(Vec3::new(0.0, 0.3, 0.0), Vec3::new(0.0, 0.0, 2.0), 0.4).unwrap(),
        ];
        let rs = RenderSettings {
            size,
            k: 6,
            blur: 1e-4,
            blend: BlendParams::default(),
            texture: TextureConfig::default(),
            background: Vec3::ZERO,
        };
        let white = vec![RgbImage::filled(size, [1.0; 3]); 2];
        let img = render_textured(&v, &f, &normals, &cams, &white, 0, &rs);
        let dm = &depth_maps(&v, &f, &cams[..1], size)[0];
        // pixels whose whole 3x3 neighbourhood is covered; at the silhouette the
        // source depth lookup can fall back to a neighbouring tap
        let interior = |p: usize| {
            let (c, r) = ((p % 16) as i64, (p / 16) as i64);
            (-1..=1).all(|dy| {
                (-1..=1).all(|dx| {
                    let (x, y) = (c + dx, r + dy);
                    (0..16).contains(&x) && (0..16).contains(&y) && !dm.is_background((y * 16 + x) as usize)
                })
            })
        };
        let mut inside = 0;
        for p in 0..size.pixels() {
            if interior(p) {
                inside += 1;
                assert!(img.data[p].iter().all(|c| (c - 1.0).abs() < 1e-6), "{:?}", img.data[p]);
            }
        }
        assert!(inside > 20);

        // one view only: leave-one-out gives the fallback everywhere inside
        let img = render_textured(&v, &f, &normals, &cams[..1], &white[..1], 0, &rs);
        for p in 0..size.pixels() {
            if !dm.is_background(p) {
                assert!(img.data[p].iter().all(|c| (c - 0.5).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn bake_examples() {
        let size = ImageSize::square(16);
        let (v, f) = quad(0.0, 0.5);
        let normals = vec![Vec3::new(0.0, 0.0, -1.0); 4];
        let cams = vec![Camera::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 2.0), 0.4).unwrap()];
        let c = [0.2, 0.7, 0.4];
        let colors = bake_vertex_colors(&v, &f, &normals, &cams, &[RgbImage::filled(size, c)], &TextureConfig::default());
        for (col, ok) in colors {
            assert!(ok);
            assert!((col - Vec3::from_array(c)).max_abs() < 1e-12);
        }
        // a far vertex hidden behind the quad
        let (mut v2, f2) = quad(0.0, 0.5);
        v2.push(Vec3::new(0.0, 0.0, 0.5));
        let mut n2 = normals.clone();
        n2.push(Vec3::new(0.0, 0.0, -1.0));
        let colors = bake_vertex_colors(&v2, &f2, &n2, &cams, &[RgbImage::filled(size, c)], &TextureConfig::default());
        assert!(!colors[4].1);
        assert_eq!(colors[4].0, Vec3::new(0.5, 0.5, 0.5));
    }

    #[test]
    fn excluded_view_pixels_never_matter() {
        let size = ImageSize::square(16);
        let (v, f) = quad(0.0, 0.5);
        let normals = vec![Vec3::new(0.0, 0.0, -1.0); 4];
        let cams = vec![
            Camera::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 2.0), 0.4).unwrap(),
            Camera::new(Vec3::new(0.2, 0.0, 0.0), Vec3::new(0.0, 0.0, 2.0), 0.4).unwrap(),
            Camera::new(Vec3::new(0.0, -0.2, 0.0), Vec3::new(0.0, 0.0, 2.0), 0.4).unwrap(),
        ];
        let rs = RenderSettings {
            size,
            k: 6,
            blur: 1e-4,
            blend: BlendParams::default(),
            texture: TextureConfig::default(),
            background: Vec3::ZERO,
        };
        let mut views = vec![checker(size), checker(size), checker(size)];
        let a = render_textured(&v, &f, &normals, &cams, &views, 1, &rs);
        for px in views[1].data.iter_mut() {
            *px = [0.9, 0.1, 0.3];
        }
        let b = render_textured(&v, &f, &normals, &cams, &views, 1, &rs);
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.map(f64::to_bits) == y.map(f64::to_bits)));
    }

    #[test]
    fn texel_gradient_matches_fd() {
        let size = ImageSize::square(16);
        let img = RgbImage {
            size,
            data: (0..size.pixels())
                .map(|p| {
                    let (c, r) = ((p % 16) as f64, (p / 16) as f64);
                    [(c * 0.37).sin() * 0.5 + 0.5, (r * 0.29).cos() * 0.5 + 0.5, 0.5]
                })
                .collect(),
        };
        let dm = [flat_depth(size, 2.0), flat_depth(size, 2.0)];
        let cams = [
            Camera::new(Vec3::new(0.05, 0.02, 0.0), Vec3::new(0.0, 0.0, 2.0), 0.45),
            Camera::new(Vec3::new(-0.1, 0.2, 0.0), Vec3::new(0.05, 0.0, 2.0), 0.45),
        ]
        .map(|c| c.unwrap());
        let cfg = TextureConfig {
            detach_depth: true,
            ..TextureConfig::default()
        };
        // point and normal parameters
        let p0 = [0.03, -0.05, -0.0001, 0.1, -0.1, -1.0];
        fn eval<T: Real>(x: &[T], cams: &[Camera; 2], img: &RgbImage, dm: &[DepthMap; 2], cfg: &TextureConfig) -> T {
            let sv: Vec<SourceView<'_, T>> = cams
                .iter()
                .zip(dm)
                .map(|(c, d)| SourceView { cam: c.lift::<T>().posed(), image: img, depth: d })
                .collect();
            let n = Vec3::new(x[3], x[4], x[5]).normalized_or_zero();
            let t = texture_eval(Vec3::new(x[0], x[1], x[2]), n, &sv, &mut ConstDepth(dm), None, cfg);
            t.color.x + t.color.y * 0.5
        }
        let (_, g) = gradient(&p0, |x: &[Var]| eval(x, &cams, &img, &dm, &cfg));
        let rep = finite_diff_check(|x| eval(x, &cams, &img, &dm, &cfg), &p0, &g, 1e-5, &[0, 1, 2, 3, 4, 5]);
        assert!(rep.passes(1e-3), "{rep:?}");
    }

    proptest! {
        #[test]
        fn weights_normalize(nx in -1.0f64..1.0, ny in -1.0f64..1.0, dz in -0.001f64..0.001) {
            let size = ImageSize::square(8);
            let img = checker(size);
            let dm: Vec<DepthMap> = (0..3).map(|i| flat_depth(size, 2.0 + dz * i as f64)).collect();
            let cams: Vec<Camera> = (0..3)
                .map(|i| Camera::new(Vec3::new(0.1 * i as f64, -0.05 * i as f64, 0.0), Vec3::new(0.0, 0.0, 2.0), 0.5).unwrap())
                .collect();
            let sv: Vec<SourceView<'_, f64>> = cams.iter().zip(&dm).map(|(c, d)| SourceView { cam: c.lift::<f64>().posed(), image: &img, depth: d }).collect();
            let n = Vec3::new(nx, ny, -1.0).normalized_or_zero();
            let t = texture_eval(Vec3::new(0.05, 0.02, 0.0), n, &sv, &mut ConstDepth(&dm), None, &TextureConfig::default());
            let s: f64 = t.weights.iter().map(|w| w.w).sum();
            if t.confident {
                prop_assert!((s - 1.0).abs() < 1e-9);
            } else {
                prop_assert_eq!(s, 0.0);
            }
        }
    }
}
