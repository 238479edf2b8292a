//! K-nearest-face soft rasterization, depth maps, soft silhouettes and
//! softmax color blending.
//!
//! Face selection is done in `f64` and is a discrete decision. The continuous
//! quantities of each selected fragment (signed distance, barycentrics, depth)
//! come from [`fragment_eval`], which is generic so the same code runs on the
//! tape.

use crate::autodiff::Real;
use crate::camera::{CameraT, ImageSize, PosedCamera, Z_NEAR};
use crate::math::{Vec3, Vec3f};

/// Depth assigned to background pixels.
pub const BACKGROUND_DEPTH: f64 = 1e10;

/// Squared NDC distance under which a pixel center counts as covered, so that
/// centers lying exactly on a shared edge are not lost to rounding.
pub const COVER_EPS: f64 = 1e-14;

/// Blending constants of the softmax shader.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlendParams {
    pub gamma: f64,
    pub znear: f64,
    pub zfar: f64,
    pub eps: f64,
}

impl Default for BlendParams {
    fn default() -> Self {
        BlendParams {
            gamma: 1e-4,
            znear: 0.0,
            zfar: 100.0,
            eps: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fragment {
    pub face: u32,
    pub bary: [f64; 3],
    pub z: f64,
    pub dist2: f64,
}

/// Per-pixel fragment lists, each sorted by ascending depth.
#[derive(Clone, Debug)]
pub struct FragmentBuffer {
    pub size: ImageSize,
    pub blur: f64,
    pub k: usize,
    offsets: Vec<u32>,
    frags: Vec<Fragment>,
}

impl FragmentBuffer {
    pub fn empty(size: ImageSize, k: usize, blur: f64) -> FragmentBuffer {
        FragmentBuffer {
            size,
            blur,
            k,
            offsets: vec![0; size.pixels() + 1],
            frags: Vec::new(),
        }
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[Fragment] {
        &self.frags[self.offsets[p] as usize..self.offsets[p + 1] as usize]
    }

    pub fn total(&self) -> usize {
        self.frags.len()
    }

    /// Keeps only fragments accepted by `keep`, preserving order.
    pub fn filtered(&self, mut keep: impl FnMut(usize, &Fragment) -> bool) -> FragmentBuffer {
        let mut offsets = Vec::with_capacity(self.offsets.len());
        let mut frags = Vec::new();
        offsets.push(0);
        for p in 0..self.size.pixels() {
            for f in self.pixel(p) {
                if keep(p, f) {
                    frags.push(*f);
                }
            }
            offsets.push(frags.len() as u32);
        }
        FragmentBuffer {
            size: self.size,
            blur: self.blur,
            k: self.k,
            offsets,
            frags,
        }
    }
}

/// A projected vertex: NDC position and view depth.
#[derive(Clone, Copy, Debug)]
pub struct ScreenVertex<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

#[inline]
pub fn project_vertex<T: Real>(cam: &PosedCamera<T>, v: Vec3<T>) -> Option<ScreenVertex<T>> {
    let p = cam.project(v).ok()?;
    Some(ScreenVertex {
        x: p.ndc[0],
        y: p.ndc[1],
        z: p.z,
    })
}

pub fn project_vertices<T: Real>(verts: &[Vec3<T>], cam: &CameraT<T>) -> Vec<Option<ScreenVertex<T>>> {
    let posed = cam.posed();
    verts.iter().map(|v| project_vertex(&posed, *v)).collect()
}

/// Continuous geometry of one pixel/face pair.
#[derive(Clone, Copy, Debug)]
pub struct FragmentGeom<T> {
    pub dist2: T,
    pub bary: [T; 3],
    pub z: T,
}

/// Discrete structure of a pixel/face pair, decided in `f64`.
struct Layout {
    inside: bool,
    edge: usize,
}

#[inline]
fn edge_param<T: Real>(px: f64, py: f64, p: &ScreenVertex<T>, q: &ScreenVertex<T>) -> (T, T) {
    let (ex, ey) = (q.x - p.x, q.y - p.y);
    let len2 = ex * ex + ey * ey;
    let s = if len2.val() > 0.0 {
        (((p.x * -1.0) + px) * ex + ((p.y * -1.0) + py) * ey) / len2
    } else {
        T::zero()
    };
    let s = s.clamp(0.0, 1.0);
    let dx = (p.x + ex * s) * -1.0 + px;
    let dy = (p.y + ey * s) * -1.0 + py;
    (dx * dx + dy * dy, s)
}

#[inline]
fn layout<T: Real>(px: f64, py: f64, tri: &[ScreenVertex<T>; 3]) -> Option<Layout> {
    let v = tri.map(|t| ScreenVertex {
        x: t.x.val(),
        y: t.y.val(),
        z: t.z.val(),
    });
    let [a, b, c] = &v;
    let area = (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y);
    if area.abs() < 1e-18 {
        return None;
    }
    let inv_area = area.recip();
    let w0 = ((b.x - px) * (c.y - py) - (c.x - px) * (b.y - py)) * inv_area;
    let w1 = ((c.x - px) * (a.y - py) - (a.x - px) * (c.y - py)) * inv_area;
    let w2 = -w0 - w1 + 1.0;
    let inside = w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0;
    let mut best = (f64::INFINITY, 0);
    for e in 0..3 {
        let (d2, _) = edge_param(px, py, &v[e], &v[(e + 1) % 3]);
        if e == 0 || d2 < best.0 {
            best = (d2, e);
        }
    }
    Some(Layout { inside, edge: best.1 })
}

/// Signed squared NDC distance from `(px, py)` to the projected triangle,
/// negative inside. `None` for triangles with vanishing screen area.
#[inline]
pub fn fragment_dist2<T: Real>(px: f64, py: f64, tri: &[ScreenVertex<T>; 3]) -> Option<T> {
    let l = layout(px, py, tri)?;
    let (d2, _) = edge_param(px, py, &tri[l.edge], &tri[(l.edge + 1) % 3]);
    Some(if l.inside { -d2 } else { d2 })
}

/// Signed squared NDC distance from `(px, py)` to the projected triangle
/// (negative inside), perspective-correct barycentrics and interpolated view
/// depth. Outside the triangle the barycentrics are those of the nearest
/// boundary point. Returns `None` for triangles with vanishing screen area.
#[inline]
pub fn fragment_eval<T: Real>(px: f64, py: f64, tri: &[ScreenVertex<T>; 3]) -> Option<FragmentGeom<T>> {
    let l = layout(px, py, tri)?;
    let [a, b, c] = tri;
    let (d2, s) = edge_param(px, py, &tri[l.edge], &tri[(l.edge + 1) % 3]);
    let (dist2, lam) = if l.inside {
        let inv_area = ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)).recip();
        let w0 = ((b.x - px) * (c.y - py) - (c.x - px) * (b.y - py)) * inv_area;
        let w1 = ((c.x - px) * (a.y - py) - (a.x - px) * (c.y - py)) * inv_area;
        let w2 = -w0 - w1 + 1.0;
        (-d2, [w0, w1, w2])
    } else {
        let mut lam = [T::zero(); 3];
        lam[l.edge] = -s + 1.0;
        lam[(l.edge + 1) % 3] = s;
        (d2, lam)
    };
    let q = [lam[0] / a.z, lam[1] / b.z, lam[2] / c.z];
    let sum = q[0] + q[1] + q[2];
    let inv = sum.recip();
    Some(FragmentGeom {
        dist2,
        bary: [q[0] * inv, q[1] * inv, q[2] * inv],
        z: inv,
    })
}

/// Rasterizes pre-projected vertices. Faces with any vertex at or behind the
/// near plane are skipped; there is no backface culling.
pub fn rasterize_projected(
    screen: &[Option<ScreenVertex<f64>>],
    faces: &[[u32; 3]],
    size: ImageSize,
    k: usize,
    blur: f64,
) -> FragmentBuffer {
    assert!(k >= 1, "K must be at least 1");
    let npix = size.pixels();
    let mut counts = vec![0u8; npix];
    let mut slots = vec![
        Fragment {
            face: 0,
            bary: [0.0; 3],
            z: 0.0,
            dist2: 0.0,
        };
        npix * k
    ];
    let reach = blur.max(0.0).sqrt();
    let hs = 0.5 * size.short_side() as f64;
    for (fi, f) in faces.iter().enumerate() {
        let tri = match (screen[f[0] as usize], screen[f[1] as usize], screen[f[2] as usize]) {
            (Some(a), Some(b), Some(c)) => [a, b, c],
            _ => continue,
        };
        if tri.iter().any(|v| v.z <= Z_NEAR) {
            continue;
        }
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for v in &tri {
            x0 = x0.min(v.x);
            x1 = x1.max(v.x);
            y0 = y0.min(v.y);
            y1 = y1.max(v.y);
        }
        // pixel column/row range of the expanded bounding box
        let c_lo = ((x0 - reach) * hs + 0.5 * size.width as f64 - 0.5).ceil().max(0.0);
        let c_hi = ((x1 + reach) * hs + 0.5 * size.width as f64 - 0.5).floor();
        let r_lo = ((0.5 * size.height as f64 - (y1 + reach) * hs) - 0.5).ceil().max(0.0);
        let r_hi = ((0.5 * size.height as f64 - (y0 - reach) * hs) - 0.5).floor();
        if !(c_hi >= c_lo && r_hi >= r_lo) || c_lo >= size.width as f64 || r_lo >= size.height as f64 {
            continue;
        }
        let c_hi = (c_hi as usize).min(size.width - 1);
        let r_hi = (r_hi as usize).min(size.height - 1);
        for row in r_lo as usize..=r_hi {
            for col in c_lo as usize..=c_hi {
                let (px, py) = size.pixel_center_ndc(col, row);
                let Some(g) = fragment_eval(px, py, &tri) else {
                    continue;
                };
                if g.dist2 > blur.max(COVER_EPS) || g.z <= Z_NEAR {
                    continue;
                }
                let p = row * size.width + col;
                let list = &mut slots[p * k..(p + 1) * k];
                let n = counts[p] as usize;
                if n == k && g.z >= list[k - 1].z {
                    continue;
                }
                let frag = Fragment {
                    face: fi as u32,
                    bary: g.bary,
                    z: g.z,
                    dist2: g.dist2,
                };
                // insertion into the depth-sorted list; ties keep face order
                let mut pos = n.min(k - 1);
                while pos > 0 && list[pos - 1].z > frag.z {
                    if pos < k {
                        list[pos] = list[pos - 1];
                    }
                    pos -= 1;
                }
                list[pos] = frag;
                if n < k {
                    counts[p] += 1;
                }
            }
        }
    }
    let mut offsets = Vec::with_capacity(npix + 1);
    let mut frags = Vec::new();
    offsets.push(0);
    for p in 0..npix {
        frags.extend_from_slice(&slots[p * k..p * k + counts[p] as usize]);
        offsets.push(frags.len() as u32);
    }
    FragmentBuffer {
        size,
        blur,
        k,
        offsets,
        frags,
    }
}

pub fn rasterize(
    verts: &[Vec3f],
    faces: &[[u32; 3]],
    cam: &crate::camera::Camera,
    size: ImageSize,
    k: usize,
    blur: f64,
) -> FragmentBuffer {
    let screen = project_vertices(verts, &cam.lift::<f64>());
    rasterize_projected(&screen, faces, size, k, blur)
}

/// Nearest truly covered depth per pixel and the face that produced it.
#[derive(Clone, Debug)]
pub struct DepthMap {
    pub size: ImageSize,
    pub depth: Vec<f64>,
    pub face: Vec<u32>,
}

pub const NO_FACE: u32 = u32::MAX;

impl DepthMap {
    #[inline]
    pub fn is_background(&self, p: usize) -> bool {
        self.face[p] == NO_FACE
    }
}

pub fn depth_map(frags: &FragmentBuffer) -> DepthMap {
    let n = frags.size.pixels();
    let mut depth = vec![BACKGROUND_DEPTH; n];
    let mut face = vec![NO_FACE; n];
    for p in 0..n {
        if let Some(f) = frags.pixel(p).iter().find(|f| f.dist2 <= COVER_EPS) {
            depth[p] = f.z;
            face[p] = f.face;
        }
    }
    DepthMap {
        size: frags.size,
        depth,
        face,
    }
}

/// Probabilistic union of per-fragment coverage.
#[inline]
pub fn soft_silhouette_pixel<T: Real>(dist2: impl IntoIterator<Item = T>, blur: f64) -> T {
    let mut keep = T::one();
    for d in dist2 {
        keep *= -(d * (-1.0 / blur)).sigmoid() + 1.0;
    }
    -keep + 1.0
}

pub fn soft_silhouette(frags: &FragmentBuffer) -> Vec<f64> {
    (0..frags.size.pixels())
        .map(|p| soft_silhouette_pixel(frags.pixel(p).iter().map(|f| f.dist2), frags.blur))
        .collect()
}

/// Normalized softmax weights of a pixel's fragments and of the background.
/// The running maximum used for stability is taken as a constant.
pub fn blend_weights<T: Real>(dist2: &[T], z: &[T], blur: f64, bp: &BlendParams) -> (Vec<T>, T) {
    let scale = 1.0 / (bp.zfar - bp.znear);
    let zbar: Vec<T> = z.iter().map(|&zi| (zi * -1.0 + bp.zfar) * scale).collect();
    let m = zbar.iter().map(|v| v.val()).fold(bp.eps, f64::max);
    let mut num: Vec<T> = dist2
        .iter()
        .zip(&zbar)
        .map(|(&d, &zb)| (d * (-1.0 / blur)).sigmoid() * ((zb + -m) * (1.0 / bp.gamma)).exp())
        .collect();
    let bg = ((bp.eps - m) / bp.gamma).exp().max(bp.eps);
    let mut denom = T::cst(bg);
    for w in &num {
        denom += *w;
    }
    let inv = denom.recip();
    for w in num.iter_mut() {
        *w *= inv;
    }
    (num, inv * bg)
}

pub fn softmax_blend<T: Real>(colors: &[Vec3<T>], weights: &[T], w_bg: T, background: Vec3f) -> Vec3<T> {
    let mut out = background.lift::<T>().scale(w_bg);
    for (c, w) in colors.iter().zip(weights) {
        out += c.scale(*w);
    }
    out
}
