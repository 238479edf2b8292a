//! Scenes on disk: views, masks and cameras, plus synthetic scene generation
//! and result export.
//!
//! A scene directory holds `view_000.png, view_001.png, …` (8-bit sRGB),
//! `mask_000.png, …` (8-bit gray, thresholded at 0.5 on load) and
//! `cameras.json`, a list of `{"r": [..], "t": [..], "f": ..}` records. An
//! optional `gt/` subdirectory holds `mesh.obj` and the clean `cameras.json`.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{cameras_from_json, cameras_to_json, euler_rotation, perturb_rotation, Camera, ImageSize};
use crate::imageio::{GrayImage, RgbImage};
use crate::math::{Vec3, Vec3f};
use crate::mesh::TriMesh;
use crate::raster::{rasterize, BlendParams, COVER_EPS};
use crate::shapes::Albedo;
use crate::texture::{bake_vertex_colors, render_textured_with, RenderSettings, TextureConfig};
use crate::topology::{carve, VoxelGrid};

/// Similarity taking input coordinates to the normalized frame:
/// `x_n = (x − center) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Normalization {
        Normalization {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn point(&self, x: Vec3f) -> Vec3f {
        (x - Vec3::from_array(self.center)).scale(1.0 / self.scale)
    }

    pub fn point_inv(&self, x: Vec3f) -> Vec3f {
        x.scale(self.scale) + Vec3::from_array(self.center)
    }

    /// Camera seeing the normalized scene exactly as `cam` sees the input one.
    pub fn camera(&self, cam: &Camera) -> Camera {
        let c = Vec3::from_array(self.center);
        let t = (cam.rotation().mul_vec(c) + Vec3::from_array(cam.t)).scale(1.0 / self.scale);
        Camera { t: t.to_array(), ..*cam }
    }

    pub fn camera_inv(&self, cam: &Camera) -> Camera {
        let c = Vec3::from_array(self.center);
        let t = Vec3::from_array(cam.t).scale(self.scale) - cam.rotation().mul_vec(c);
        Camera { t: t.to_array(), ..*cam }
    }

    pub fn mesh(&self, m: &TriMesh) -> TriMesh {
        m.map_vertices(|x| self.point(x))
    }

    pub fn mesh_inv(&self, m: &TriMesh) -> TriMesh {
        m.map_vertices(|x| self.point_inv(x))
    }
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    /// In the input frame.
    pub mesh: Option<TriMesh>,
    /// In the input frame.
    pub cameras: Option<Vec<Camera>>,
}

/// Views, binary masks and cameras, all in the normalized frame.
#[derive(Clone, Debug)]
pub struct Scene {
    pub size: ImageSize,
    pub images: Vec<RgbImage>,
    pub masks: Vec<GrayImage>,
    pub cameras: Vec<Camera>,
    pub normalization: Normalization,
    pub gt: Option<GroundTruth>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Scene in the frame given, without normalization.
    pub fn from_parts(images: Vec<RgbImage>, masks: Vec<GrayImage>, cameras: Vec<Camera>) -> Result<Scene> {
        ensure!(!images.is_empty(), "scene has no views");
        ensure!(
            images.len() == masks.len() && masks.len() == cameras.len(),
            "{} images, {} masks and {} cameras",
            images.len(),
            masks.len(),
            cameras.len()
        );
        let size = images[0].size;
        for (i, (img, m)) in images.iter().zip(&masks).enumerate() {
            ensure!(img.size == size, "view {i} is {}x{}, expected {}x{}", img.size.width, img.size.height, size.width, size.height);
            ensure!(m.size == size, "mask {i} is {}x{}, expected {}x{}", m.size.width, m.size.height, size.width, size.height);
        }
        Ok(Scene {
            size,
            images,
            masks: masks.iter().map(|m| m.binarized(0.5)).collect(),
            cameras,
            normalization: Normalization::identity(),
            gt: None,
        })
    }

    /// Applies `norm` to the cameras; `self` must be in the input frame.
    pub fn normalized(mut self, norm: Normalization) -> Scene {
        self.cameras = self.cameras.iter().map(|c| norm.camera(c)).collect();
        self.normalization = norm;
        self
    }

    /// Integer box downsampling of all views.
    pub fn downsampled(&self, factor: usize) -> Scene {
        if factor <= 1 {
            return self.clone();
        }
        let images: Vec<RgbImage> = self.images.iter().map(|i| i.downsample_box(factor)).collect();
        Scene {
            size: images[0].size,
            masks: self.masks.iter().map(|m| m.downsample_box(factor).binarized(0.5)).collect(),
            images,
            ..self.clone()
        }
    }
}

/// Least-squares point closest to all optical axes.
fn axes_convergence(cams: &[Camera]) -> Vec3f {
    let mut a = nalgebra::Matrix3::<f64>::zeros();
    let mut b = nalgebra::Vector3::<f64>::zeros();
    for c in cams {
        let o = c.center();
        let d = c.rotation().row(2);
        let dn = nalgebra::Vector3::new(d.x, d.y, d.z);
        let p = nalgebra::Matrix3::identity() - dn * dn.transpose();
        a += p;
        b += p * nalgebra::Vector3::new(o.x, o.y, o.z);
    }
    match a.try_inverse() {
        Some(inv) => {
            let x = inv * b;
            Vec3::new(x.x, x.y, x.z)
        }
        None => Vec3::ZERO,
    }
}

/// Resolution of the coarse hull used for normalization.
pub const HULL_RESOLUTION: usize = 32;

/// Normalization from the bounding box of a coarse visual hull, scaled to unit
/// diagonal. Falls back to the region all cameras converge on when the hull
/// is empty.
pub fn estimate_normalization(masks: &[GrayImage], cams: &[Camera]) -> Normalization {
    let c = axes_convergence(cams);
    let mut radius = f64::INFINITY;
    for cam in cams {
        let dist = (cam.center() - c).norm();
        radius = radius.min(dist * cam.f.tan() * 1.5);
    }
    let radius = if radius.is_finite() && radius > 0.0 { radius } else { 1.0 };
    let mut grid = VoxelGrid::new(c - Vec3::splat(radius), c + Vec3::splat(radius), [HULL_RESOLUTION; 3]);
    grid.occ.iter_mut().for_each(|o| *o = true);
    let fallback = Normalization {
        center: c.to_array(),
        scale: 2.0 * radius * 3f64.sqrt(),
    };
    let Ok(hull) = carve(&grid, masks, cams) else {
        return fallback;
    };
    let mut lo = Vec3::splat(f64::INFINITY);
    let mut hi = Vec3::splat(f64::NEG_INFINITY);
    let h = hull.voxel_size().scale(0.5);
    for k in 0..hull.dims[2] {
        for j in 0..hull.dims[1] {
            for i in 0..hull.dims[0] {
                if hull.get(i, j, k) {
                    let x = hull.center(i, j, k);
                    lo = lo.component_min(x - h);
                    hi = hi.component_max(x + h);
                }
            }
        }
    }
    if lo.x > hi.x {
        return fallback;
    }
    Normalization {
        center: (lo + hi).scale(0.5).to_array(),
        scale: (hi - lo).norm(),
    }
}

fn view_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("view_{i:03}.png"))
}

fn mask_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("mask_{i:03}.png"))
}

/// Loads and normalizes a scene directory.
pub fn load_scene(dir: &Path) -> Result<Scene> {
    ensure!(dir.is_dir(), "scene directory {} does not exist", dir.display());
    let mut images = Vec::new();
    let mut masks = Vec::new();
    while view_path(dir, images.len()).exists() {
        let i = images.len();
        images.push(RgbImage::load_png(&view_path(dir, i))?);
        let mp = mask_path(dir, i);
        if !mp.exists() {
            bail!("missing mask file {}", mp.display());
        }
        masks.push(GrayImage::load_png(&mp)?);
    }
    ensure!(!images.is_empty(), "no view_000.png in {}", dir.display());
    let cam_path = dir.join("cameras.json");
    let text = fs::read_to_string(&cam_path).with_context(|| format!("reading {}", cam_path.display()))?;
    let cameras = cameras_from_json(&text).with_context(|| format!("parsing {}", cam_path.display()))?;
    ensure!(
        cameras.len() == images.len(),
        "{} lists {} cameras but there are {} views",
        cam_path.display(),
        cameras.len(),
        images.len()
    );
    let mut scene = Scene::from_parts(images, masks, cameras)?;
    let norm = estimate_normalization(&scene.masks, &scene.cameras);
    scene = scene.normalized(norm);
    scene.gt = load_ground_truth(&dir.join("gt"))?;
    Ok(scene)
}

fn load_ground_truth(dir: &Path) -> Result<Option<GroundTruth>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mp = dir.join("mesh.obj");
    let mesh = if mp.exists() {
        Some(TriMesh::read_obj(&mp).with_context(|| format!("reading {}", mp.display()))?)
    } else {
        None
    };
    let cp = dir.join("cameras.json");
    let cameras = if cp.exists() {
        let text = fs::read_to_string(&cp).with_context(|| format!("reading {}", cp.display()))?;
        Some(cameras_from_json(&text).with_context(|| format!("parsing {}", cp.display()))?)
    } else {
        None
    };
    Ok(Some(GroundTruth { mesh, cameras }))
}

/// How synthetic views are colored.
#[derive(Clone, Debug, PartialEq)]
pub enum TextureSpec {
    /// Checkerboard with cells of this fraction of the bounding-box diagonal.
    Checkerboard { cell_frac: f64 },
    Gradient,
    /// Per-vertex colors, interpolated over faces.
    VertexColors(Vec<Vec3f>),
}

impl Default for TextureSpec {
    fn default() -> TextureSpec {
        TextureSpec::Checkerboard { cell_frac: 0.12 }
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub views: usize,
    pub noise_deg: f64,
    pub size: ImageSize,
    pub seed: u64,
    pub texture: TextureSpec,
    pub supersample: usize,
    /// Camera distance relative to the distance that just fits the bounding sphere.
    pub margin: f64,
    pub fov_deg: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            views: 8,
            noise_deg: 0.0,
            size: ImageSize::square(64),
            seed: 0,
            texture: TextureSpec::default(),
            supersample: 3,
            margin: 1.2,
            fov_deg: (20.0, 50.0),
        }
    }
}

/// Light direction of the synthetic shading.
const LIGHT: [f64; 3] = [0.3, 0.8, 0.52];

/// A synthetic dataset in memory.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub images: Vec<RgbImage>,
    pub masks: Vec<GrayImage>,
    pub gt_cameras: Vec<Camera>,
    pub noisy_cameras: Vec<Camera>,
    pub mesh: TriMesh,
}

/// Random cameras looking at `center` from uniformly random Euler angles, with
/// a uniformly random field of view, far enough for the bounding sphere to fit.
pub fn random_cameras(center: Vec3f, radius: f64, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Camera> {
    (0..cfg.views)
        .map(|_| {
            let a = [0; 3].map(|_| rng.gen_range(0.0..360f64).to_radians());
            let fov = rng.gen_range(cfg.fov_deg.0..=cfg.fov_deg.1).to_radians();
            let f = 0.5 * fov;
            let rot = euler_rotation(a[0], a[1], a[2]);
            let dist = radius / f.sin() * cfg.margin;
            let t = Vec3::new(0.0, 0.0, dist) - rot.mul_vec(center);
            Camera::from_rotation(&rot, t, f).expect("valid synthetic camera")
        })
        .collect()
}

/// Lambertian view and coverage mask of a mesh with procedural or vertex albedo.
pub fn render_lambertian(mesh: &TriMesh, cam: &Camera, size: ImageSize, texture: &TextureSpec, supersample: usize) -> (RgbImage, GrayImage) {
    let ss = supersample.max(1);
    let big = ImageSize::new(size.width * ss, size.height * ss);
    let verts = mesh.vertices();
    let normals = mesh.vertex_normals().unwrap_or_else(|_| vec![Vec3::ZERO; verts.len()]);
    let (lo, hi) = mesh.bounds().unwrap_or((Vec3::ZERO, Vec3::splat(1.0)));
    let albedo = match texture {
        TextureSpec::Checkerboard { cell_frac } => Some(Albedo::Checker {
            cell: cell_frac * (hi - lo).norm(),
        }),
        TextureSpec::Gradient => Some(Albedo::Gradient { lo, hi }),
        TextureSpec::VertexColors(_) => None,
    };
    let light = Vec3::from_array(LIGHT).normalized_or_zero();
    let buf = rasterize(&verts, mesh.faces(), cam, big, 1, 0.0);
    let mut img = RgbImage::filled(big, [0.0; 3]);
    let mut mask = GrayImage::filled(big, 0.0);
    for p in 0..big.pixels() {
        let Some(f) = buf.pixel(p).first().filter(|f| f.dist2 <= COVER_EPS) else {
            continue;
        };
        let t = mesh.faces()[f.face as usize];
        let mut x = Vec3::ZERO;
        let mut n = Vec3::ZERO;
        let mut vc = Vec3::ZERO;
        for j in 0..3 {
            x += verts[t[j] as usize].scale(f.bary[j]);
            n += normals[t[j] as usize].scale(f.bary[j]);
            if let TextureSpec::VertexColors(c) = texture {
                vc += c[t[j] as usize].scale(f.bary[j]);
            }
        }
        let a = albedo.map_or(vc, |al| al.color(x));
        let shade = 0.75 + 0.25 * n.normalized_or_zero().dot(light).max(0.0);
        img.data[p] = a.scale(shade).to_array();
        mask.data[p] = 1.0;
    }
    (img.downsample_box(ss), mask.downsample_box(ss))
}

/// Renders a synthetic dataset of `mesh`.
pub fn synthesize(mesh: &TriMesh, cfg: &SynthConfig) -> Result<SynthScene> {
    ensure!(!mesh.is_empty(), "synthetic mesh is empty");
    if let TextureSpec::VertexColors(c) = &cfg.texture {
        ensure!(c.len() == mesh.num_vertices(), "{} vertex colors for {} vertices", c.len(), mesh.num_vertices());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = mesh.bounds().expect("nonempty mesh");
    let center = (lo + hi).scale(0.5);
    let radius = mesh.vertices().iter().map(|v| (*v - center).norm()).fold(0.0, f64::max);
    let gt_cameras = random_cameras(center, radius, cfg, &mut rng);
    let noisy_cameras = gt_cameras.iter().map(|c| perturb_rotation(c, cfg.noise_deg, &mut rng)).collect();
    let (images, masks) = gt_cameras
        .iter()
        .map(|c| render_lambertian(mesh, c, cfg.size, &cfg.texture, cfg.supersample))
        .unzip();
    Ok(SynthScene {
        images,
        masks,
        gt_cameras,
        noisy_cameras,
        mesh: mesh.clone(),
    })
}

impl SynthScene {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("gt")).with_context(|| format!("creating {}", dir.display()))?;
        for (i, (img, m)) in self.images.iter().zip(&self.masks).enumerate() {
            img.save_png(&view_path(dir, i))?;
            m.save_png(&mask_path(dir, i))?;
        }
        fs::write(dir.join("cameras.json"), cameras_to_json(&self.noisy_cameras))?;
        fs::write(dir.join("gt/cameras.json"), cameras_to_json(&self.gt_cameras))?;
        self.mesh.write_obj(&dir.join("gt/mesh.obj"))?;
        Ok(())
    }

    /// The in-memory equivalent of writing and loading the dataset, with
    /// images quantized as on disk.
    pub fn to_scene(&self) -> Result<Scene> {
        let quant = |img: &RgbImage| RgbImage {
            size: img.size,
            data: img
                .data
                .iter()
                .map(|c| c.map(|v| crate::imageio::srgb_to_linear(crate::imageio::quantize(crate::imageio::linear_to_srgb(v)) as f64 / 255.0)))
                .collect(),
        };
        let images = self.images.iter().map(quant).collect();
        let mut scene = Scene::from_parts(images, self.masks.clone(), self.noisy_cameras.clone())?;
        let norm = estimate_normalization(&scene.masks, &scene.cameras);
        scene = scene.normalized(norm);
        scene.gt = Some(GroundTruth {
            mesh: Some(self.mesh.clone()),
            cameras: Some(self.gt_cameras.clone()),
        });
        Ok(scene)
    }
}

/// Two viewpoints orbiting the object, halfway between input cameras.
pub fn novel_cameras(cams: &[Camera]) -> Vec<Camera> {
    let n = cams.len();
    let f = cams.iter().map(|c| c.f).sum::<f64>() / n as f64;
    let dist = cams.iter().map(|c| c.center().norm()).sum::<f64>() / n as f64;
    [(0.0, 45.0, 0.0), (30.0, 200.0, 0.0)]
        .iter()
        .map(|&(ax, ay, az): &(f64, f64, f64)| {
            let rot = euler_rotation(ax.to_radians(), ay.to_radians(), az.to_radians());
            Camera::from_rotation(&rot, Vec3::new(0.0, 0.0, dist), f).expect("valid orbit camera")
        })
        .collect()
}

/// Writes the reconstruction in the input frame: geometry, colored geometry,
/// refined cameras, and textured renders (leave-one-out for every view plus
/// two novel viewpoints).
pub fn export_result(mesh: &TriMesh, cams: &[Camera], scene: &Scene, out: &Path) -> Result<()> {
    fs::create_dir_all(out.join("renders")).with_context(|| format!("creating {}", out.display()))?;
    let norm = scene.normalization;
    let plain = TriMesh::new(mesh.vertices(), mesh.faces().to_vec())?;
    let normals = plain.vertex_normals().unwrap_or_else(|_| vec![Vec3::ZERO; plain.num_vertices()]);
    let cfg = TextureConfig::default();
    let colors: Vec<Vec3f> = bake_vertex_colors(&plain.vertices(), plain.faces(), &normals, cams, &scene.images, &cfg)
        .into_iter()
        .map(|(c, _)| c)
        .collect();
    let world = norm.mesh_inv(&plain);
    world.write_obj(&out.join("mesh.obj"))?;
    world.write_ply(&out.join("mesh_colored.ply"), &colors)?;
    let world_cams: Vec<Camera> = cams.iter().map(|c| norm.camera_inv(c)).collect();
    fs::write(out.join("cameras.json"), cameras_to_json(&world_cams))?;
    let rs = RenderSettings {
        size: scene.size,
        k: 6,
        blur: 1e-6,
        blend: BlendParams::default(),
        texture: cfg,
        background: Vec3::ZERO,
    };
    let verts = plain.vertices();
    for i in 0..cams.len() {
        let img = render_textured_with(&verts, plain.faces(), &normals, cams, &scene.images, &cams[i], Some(i), &rs);
        img.save_png(&out.join(format!("renders/view_{i:03}.png")))?;
    }
    for (i, c) in novel_cameras(cams).iter().enumerate() {
        let img = render_textured_with(&verts, plain.faces(), &normals, cams, &scene.images, c, None, &rs);
        img.save_png(&out.join(format!("renders/novel_{i}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::Shape;

    fn small_synth(noise: f64) -> SynthScene {
        let mesh = Shape::Cube.mesh(24).unwrap();
        let cfg = SynthConfig {
            views: 4,
            noise_deg: noise,
            size: ImageSize::square(32),
            seed: 5,
            ..SynthConfig::default()
        };
        synthesize(&mesh, &cfg).unwrap()
    }

    #[test]
    fn noise_free_cameras_equal_ground_truth() {
        let s = small_synth(0.0);
        assert_eq!(s.noisy_cameras, s.gt_cameras);
        let s = small_synth(5.0);
        assert_ne!(s.noisy_cameras, s.gt_cameras);
    }

    #[test]
    fn masks_nonempty_in_all_views() {
        let mesh = Shape::Cube.mesh(24).unwrap();
        let cfg = SynthConfig {
            views: 8,
            size: ImageSize::square(32),
            ..SynthConfig::default()
        };
        let s = synthesize(&mesh, &cfg).unwrap();
        for m in &s.masks {
            let on = m.data.iter().filter(|&&v| v >= 0.5).count();
            assert!(on > 20);
            // object in frame: border pixels are background
            for c in 0..32 {
                assert_eq!(m.get(c, 0), 0.0);
                assert_eq!(m.get(c, 31), 0.0);
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        small_synth(3.0).write(d1.path()).unwrap();
        small_synth(3.0).write(d2.path()).unwrap();
        for name in ["view_000.png", "mask_003.png", "cameras.json", "gt/cameras.json", "gt/mesh.obj"] {
            assert_eq!(fs::read(d1.path().join(name)).unwrap(), fs::read(d2.path().join(name)).unwrap(), "{name}");
        }
    }

    #[test]
    fn load_round_trip_and_errors() {
        let d = tempfile::tempdir().unwrap();
        let s = small_synth(0.0);
        s.write(d.path()).unwrap();
        let scene = load_scene(d.path()).unwrap();
        assert_eq!(scene.len(), 4);
        let gt = scene.gt.as_ref().unwrap();
        assert_eq!(gt.cameras.as_ref().unwrap(), &s.gt_cameras);
        // normalized cameras map back to the input ones
        for (c, orig) in scene.cameras.iter().zip(&s.noisy_cameras) {
            let back = scene.normalization.camera_inv(c);
            for k in 0..3 {
                assert!((back.t[k] - orig.t[k]).abs() < 1e-9);
            }
        }
        let m = d.path().join("mask_002.png");
        fs::remove_file(&m).unwrap();
        let err = format!("{:#}", load_scene(d.path()).unwrap_err());
        assert!(err.contains("mask_002.png"), "{err}");
        s.write(d.path()).unwrap();
        fs::write(d.path().join("cameras.json"), cameras_to_json(&s.noisy_cameras[..3])).unwrap();
        assert!(load_scene(d.path()).is_err());
        fs::write(d.path().join("cameras.json"), "[{\"r\": 1}]").unwrap();
        let err = format!("{:#}", load_scene(d.path()).unwrap_err());
        assert!(err.contains("cameras.json"), "{err}");
    }

    #[test]
    fn normalization_round_trip_and_unit_hull() {
        let s = small_synth(0.0);
        let scene = s.to_scene().unwrap();
        let n = scene.normalization;
        let x = Vec3::new(0.3, -1.2, 2.5);
        assert!((n.point_inv(n.point(x)) - x).max_abs() < 1e-12);
        let c = &s.gt_cameras[1];
        let cn = n.camera(c);
        // projections agree between frames
        let p0 = c.project(x).unwrap();
        let p1 = cn.project(n.point(x)).unwrap();
        assert!((p0.ndc[0] - p1.ndc[0]).abs() < 1e-12 && (p0.ndc[1] - p1.ndc[1]).abs() < 1e-12);
        let back = n.camera_inv(&cn);
        for k in 0..3 {
            assert!((back.t[k] - c.t[k]).abs() < 1e-9);
        }
        // the normalized object is about unit size
        let m = n.mesh(&s.mesh);
        let (lo, hi) = m.bounds().unwrap();
        let diag = (hi - lo).norm();
        // the hull contains the object, so the object is at most unit size
        assert!(diag > 0.4 && diag < 1.05, "{diag}");
        assert!(((lo + hi).scale(0.5)).norm() < 0.15);
    }

    #[test]
    fn export_round_trips() {
        let s = small_synth(0.0);
        let scene = s.to_scene().unwrap();
        let mesh = scene.normalization.mesh(&s.mesh);
        let d = tempfile::tempdir().unwrap();
        export_result(&mesh, &scene.cameras, &scene, d.path()).unwrap();
        let (ply, colors) = TriMesh::read_ply(&d.path().join("mesh_colored.ply")).unwrap();
        assert_eq!(ply.num_vertices(), mesh.num_vertices());
        let plain = TriMesh::new(mesh.vertices(), mesh.faces().to_vec()).unwrap();
        let n = plain.vertex_normals().unwrap();
        let baked = bake_vertex_colors(&plain.vertices(), plain.faces(), &n, &scene.cameras, &scene.images, &TextureConfig::default());
        for (a, (b, _)) in colors.iter().zip(&baked) {
            assert!((*a - *b).max_abs() <= 0.5 / 255.0 + 1e-9);
        }
        let obj = TriMesh::read_obj(&d.path().join("mesh.obj")).unwrap();
        for (a, b) in obj.vertices().iter().zip(s.mesh.vertices()) {
            assert!((*a - b).max_abs() < 1e-6);
        }
        let cams = cameras_from_json(&fs::read_to_string(d.path().join("cameras.json")).unwrap()).unwrap();
        for (a, b) in cams.iter().zip(&s.gt_cameras) {
            for k in 0..3 {
                assert!((a.t[k] - b.t[k]).abs() < 1e-9 && (a.r[k] - b.r[k]).abs() < 1e-12);
            }
        }
        for name in ["renders/novel_0.png", "renders/novel_1.png", "renders/view_000.png"] {
            assert!(fs::metadata(d.path().join(name)).unwrap().len() > 0);
        }
    }
}
