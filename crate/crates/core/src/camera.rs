//! Perspective cameras parametrized by axis-angle rotation, translation and
//! half field-of-view.
//!
//! View space is right-handed with the camera looking along +z. NDC has x to
//! the right and y up, and `ndc = (X, Y) / (Z tan f)` where `f` is the half
//! field-of-view along the shorter image side.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::math::{Mat3, Vec3, Vec3f};

pub const Z_NEAR: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("point has view depth {0:e}, at or behind the near plane")]
    BehindCamera(f64),
    #[error("pixel index {index} out of range for size {size}")]
    PixelOutOfRange { index: i64, size: usize },
    #[error("half field-of-view {0} outside (0, pi/2)")]
    BadFov(f64),
}

/// Camera record `{r, t, f}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub r: [f64; 3],
    pub t: [f64; 3],
    pub f: f64,
}

impl Camera {
    pub fn new(r: Vec3f, t: Vec3f, f: f64) -> Result<Camera, CameraError> {
        if !(f > 0.0 && f < std::f64::consts::FRAC_PI_2) {
            return Err(CameraError::BadFov(f));
        }
        Ok(Camera {
            r: r.to_array(),
            t: t.to_array(),
            f,
        }
        .canonicalized())
    }

    pub fn from_rotation(rot: &Mat3, t: Vec3f, f: f64) -> Result<Camera, CameraError> {
        Camera::new(log_map(rot), t, f)
    }

    pub fn rotation(&self) -> Mat3 {
        rotation_matrix(Vec3::from_array(self.r))
    }

    /// Rotation re-expressed with angle at most pi.
    pub fn canonicalized(self) -> Camera {
        let r = Vec3::from_array(self.r);
        if r.norm() < std::f64::consts::PI {
            return self;
        }
        Camera {
            r: log_map(&rotation_matrix(r)).to_array(),
            ..self
        }
    }

    pub fn lift<T: Real>(&self) -> CameraT<T> {
        CameraT {
            r: Vec3::from_array(self.r).lift(),
            t: Vec3::from_array(self.t).lift(),
            f: T::cst(self.f),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3f {
        -self.rotation().transpose().mul_vec(Vec3::from_array(self.t))
    }

    pub fn to_view(&self, x: Vec3f) -> Vec3f {
        self.rotation().mul_vec(x) + Vec3::from_array(self.t)
    }

    pub fn project(&self, x: Vec3f) -> Result<ViewPoint<f64>, CameraError> {
        self.lift::<f64>().project(x)
    }
}

/// A camera whose parameters may be differentiable.
#[derive(Clone, Copy, Debug)]
pub struct CameraT<T> {
    pub r: Vec3<T>,
    pub t: Vec3<T>,
    pub f: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewPoint<T> {
    pub ndc: [T; 2],
    pub z: T,
}

impl<T: Real> CameraT<T> {
    pub fn value(&self) -> Camera {
        Camera {
            r: self.r.value().to_array(),
            t: self.t.value().to_array(),
            f: self.f.val(),
        }
    }

    /// Precomputes the rotation and focal scale.
    pub fn posed(&self) -> PosedCamera<T> {
        PosedCamera {
            rot: rotation_matrix(self.r),
            t: self.t,
            inv_tan: self.f.tan().recip(),
        }
    }

    pub fn project(&self, x: Vec3<T>) -> Result<ViewPoint<T>, CameraError> {
        self.posed().project(x)
    }
}

/// Rotation matrix, translation and `1 / tan f`, ready for repeated projection.
#[derive(Clone, Copy, Debug)]
pub struct PosedCamera<T> {
    pub rot: Mat3<T>,
    pub t: Vec3<T>,
    pub inv_tan: T,
}

impl<T: Real> PosedCamera<T> {
    pub fn value(&self) -> PosedCamera<f64> {
        PosedCamera {
            rot: self.rot.value(),
            t: self.t.value(),
            inv_tan: self.inv_tan.val(),
        }
    }

    #[inline]
    pub fn to_view(&self, x: Vec3<T>) -> Vec3<T> {
        self.rot.mul_vec(x) + self.t
    }

    /// z-component of a world direction rotated into view space.
    #[inline]
    pub fn view_dir_z(&self, n: Vec3<T>) -> T {
        let r = &self.rot.m[2];
        r[0] * n.x + r[1] * n.y + r[2] * n.z
    }

    #[inline]
    pub fn project(&self, x: Vec3<T>) -> Result<ViewPoint<T>, CameraError> {
        let v = self.to_view(x);
        self.project_view(v)
    }

    #[inline]
    pub fn project_view(&self, v: Vec3<T>) -> Result<ViewPoint<T>, CameraError> {
        if v.z.val() <= Z_NEAR {
            return Err(CameraError::BehindCamera(v.z.val()));
        }
        let s = self.inv_tan / v.z;
        Ok(ViewPoint {
            ndc: [v.x * s, v.y * s],
            z: v.z,
        })
    }
}

/// Rodrigues' formula with a Taylor fallback near zero angle so the map stays
/// smooth and differentiable at `r = 0`.
pub fn rotation_matrix<T: Real>(r: Vec3<T>) -> Mat3<T> {
    let th2 = r.norm2();
    let (a, b) = if th2.val() < 1e-6 {
        let th4 = th2 * th2;
        (
            th2 * (-1.0 / 6.0) + th4 * (1.0 / 120.0) + 1.0,
            th2 * (-1.0 / 24.0) + th4 * (1.0 / 720.0) + 0.5,
        )
    } else {
        let th = th2.sqrt();
        (th.sin() / th, (-th.cos() + 1.0) / th2)
    };
    let z = T::zero();
    let k = Mat3 {
        m: [[z, -r.z, r.y], [r.z, z, -r.x], [-r.y, r.x, z]],
    };
    let k2 = k.matmul(&k);
    let mut out = Mat3::identity();
    for i in 0..3 {
        for j in 0..3 {
            out.m[i][j] += a * k.m[i][j] + b * k2.m[i][j];
        }
    }
    out
}

/// Inverse of [`rotation_matrix`], angle in `[0, pi]`.
pub fn log_map(m: &Mat3) -> Vec3f {
    let rot = nalgebra::Rotation3::from_matrix(&m.to_nalgebra());
    let v = rot.scaled_axis();
    Vec3::new(v.x, v.y, v.z)
}

/// Rotation by `angle` about the unit `axis`.
pub fn axis_angle(axis: Vec3f, angle: f64) -> Mat3 {
    rotation_matrix(axis.normalized_or_zero().scale(angle))
}

/// Uniform unit axis and normally distributed angle (radians).
pub fn sample_rotation_noise<R: Rng + ?Sized>(sigma_deg: f64, rng: &mut R) -> (Vec3f, f64) {
    let axis = loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-12 {
            break v.scale(1.0 / n);
        }
    };
    let theta = if sigma_deg > 0.0 {
        Normal::new(0.0, sigma_deg.to_radians())
            .expect("finite sigma")
            .sample(rng)
    } else {
        0.0
    };
    (axis, theta)
}

/// Left-composes a random rotation onto the camera; `t` and `f` are kept.
pub fn perturb_rotation<R: Rng + ?Sized>(cam: &Camera, sigma_deg: f64, rng: &mut R) -> Camera {
    if sigma_deg == 0.0 {
        return *cam;
    }
    let (axis, theta) = sample_rotation_noise(sigma_deg, rng);
    let rot = axis_angle(axis, theta).matmul(&cam.rotation());
    Camera {
        r: log_map(&rot).to_array(),
        ..*cam
    }
}

/// Continuous NDC coordinate of the center of pixel `i` along an axis of `n`
/// pixels; the inverse is [`ndc_to_pixel`].
pub fn pixel_to_ndc(i: i64, n: usize) -> Result<f64, CameraError> {
    if i < 0 || i as usize >= n {
        return Err(CameraError::PixelOutOfRange { index: i, size: n });
    }
    Ok((2 * i + 1) as f64 / n as f64 - 1.0)
}

pub fn ndc_to_pixel(x: f64, n: usize) -> f64 {
    ((x + 1.0) * n as f64 - 1.0) * 0.5
}

/// Image dimensions and the pixel/NDC mapping. NDC spans `[-1, 1]` along the
/// shorter side; the longer side extends proportionally.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: usize,
    pub height: usize,
}

impl ImageSize {
    pub fn new(width: usize, height: usize) -> ImageSize {
        ImageSize { width, height }
    }

    pub fn square(n: usize) -> ImageSize {
        ImageSize::new(n, n)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn short_side(&self) -> usize {
        self.width.min(self.height)
    }

    /// NDC extents `(x_max, y_max)`; both are 1 for square images.
    pub fn ndc_extent(&self) -> (f64, f64) {
        let s = self.short_side() as f64;
        (self.width as f64 / s, self.height as f64 / s)
    }

    /// NDC of the center of pixel `(col, row)`; rows grow downwards.
    pub fn pixel_center_ndc(&self, col: usize, row: usize) -> (f64, f64) {
        let (ex, ey) = self.ndc_extent();
        let x = ((2 * col + 1) as f64 / self.width as f64 - 1.0) * ex;
        let y = -((2 * row + 1) as f64 / self.height as f64 - 1.0) * ey;
        (x, y)
    }

    /// Continuous pixel coordinates, with the center of pixel `(i, j)` at
    /// `(i + 0.5, j + 0.5)`.
    #[inline]
    pub fn ndc_to_screen<T: Real>(&self, ndc: [T; 2]) -> [T; 2] {
        let hs = 0.5 * self.short_side() as f64;
        [
            ndc[0] * hs + 0.5 * self.width as f64,
            ndc[1] * -hs + 0.5 * self.height as f64,
        ]
    }

    pub fn screen_to_ndc(&self, u: f64, v: f64) -> (f64, f64) {
        let hs = 0.5 * self.short_side() as f64;
        ((u - 0.5 * self.width as f64) / hs, (0.5 * self.height as f64 - v) / hs)
    }

    pub fn in_frame(&self, ndc: [f64; 2]) -> bool {
        let (ex, ey) = self.ndc_extent();
        ndc[0].abs() <= ex && ndc[1].abs() <= ey
    }

    /// Pixel containing the continuous screen point, if any.
    pub fn pixel_at(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        if u < 0.0 || v < 0.0 {
            return None;
        }
        let (i, j) = (u.floor() as usize, v.floor() as usize);
        (i < self.width && j < self.height).then_some((i, j))
    }
}

/// Camera at distance `dist` from the origin with rotation `rot`; the world
/// origin lies on the optical axis.
pub fn orbit_camera(rot: &Mat3, dist: f64, f: f64) -> Result<Camera, CameraError> {
    Camera::from_rotation(rot, Vec3::new(0.0, 0.0, dist), f)
}

/// Rotation from intrinsic Euler angles (radians) applied about z, y, x.
pub fn euler_rotation(ax: f64, ay: f64, az: f64) -> Mat3 {
    let rx = axis_angle(Vec3::new(1.0, 0.0, 0.0), ax);
    let ry = axis_angle(Vec3::new(0.0, 1.0, 0.0), ay);
    let rz = axis_angle(Vec3::new(0.0, 0.0, 1.0), az);
    rz.matmul(&ry).matmul(&rx)
}

pub fn cameras_to_json(cams: &[Camera]) -> String {
    serde_json::to_string_pretty(cams).expect("cameras serialize")
}

pub fn cameras_from_json(text: &str) -> Result<Vec<Camera>, serde_json::Error> {
    serde_json::from_str(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, gradient, Var};
    use crate::math::rotation_angle_between;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rotation_basics() {
        let i = rotation_matrix(Vec3::new(0.0, 0.0, 0.0));
        assert_eq!(i, Mat3::identity());
        let r = rotation_matrix(Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let y = r.mul_vec(Vec3::new(1.0, 0.0, 0.0));
        assert!((y - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn projection_examples() {
        let f = 0.4f64;
        let cam = Camera::new(Vec3::ZERO, Vec3::ZERO, f).unwrap();
        let p = cam.project(Vec3::new(0.0, 0.0, 3.0)).unwrap();
        assert_eq!(p.ndc, [0.0, 0.0]);
        let p = cam.project(Vec3::new(f.tan(), 0.0, 1.0)).unwrap();
        assert!((p.ndc[0] - 1.0).abs() < 1e-15 && p.ndc[1] == 0.0);
        let a = cam.project(Vec3::new(0.3, -0.2, 2.0)).unwrap();
        let b = cam.project(Vec3::new(0.3, -0.2, 4.0)).unwrap();
        assert!((a.ndc[0] - 2.0 * b.ndc[0]).abs() < 1e-15);
        assert!((a.ndc[1] - 2.0 * b.ndc[1]).abs() < 1e-15);
        assert!(matches!(cam.project(Vec3::new(0.0, 0.0, 0.0)), Err(CameraError::BehindCamera(_))));
    }

    #[test]
    fn pixel_mapping() {
        assert_eq!(pixel_to_ndc(0, 4).unwrap(), -0.75);
        assert_eq!(pixel_to_ndc(3, 4).unwrap(), 1.0 - 1.0 / 4.0);
        assert!(pixel_to_ndc(4, 4).is_err());
        assert!(pixel_to_ndc(-1, 4).is_err());
        for i in 0..8 {
            let x = pixel_to_ndc(i, 8).unwrap();
            assert_eq!(ndc_to_pixel(x, 8), i as f64);
        }
        let size = ImageSize::square(8);
        for j in 0..8 {
            for i in 0..8 {
                let (x, y) = size.pixel_center_ndc(i, j);
                let [u, v] = size.ndc_to_screen([x, y]);
                assert_eq!((u, v), (i as f64 + 0.5, j as f64 + 0.5));
                assert_eq!(size.pixel_at(u, v), Some((i, j)));
            }
        }
    }

    #[test]
    fn perturb_zero_sigma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = Camera::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.0, 0.0, 3.0), 0.3).unwrap();
        assert_eq!(perturb_rotation(&cam, 0.0, &mut rng), cam);
    }

    #[test]
    fn perturb_angle_matches_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cam = Camera::new(Vec3::new(0.5, -0.2, 0.1), Vec3::new(0.1, 0.0, 3.0), 0.3).unwrap();
        let noisy = perturb_rotation(&cam, 5.0, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (_, th) = sample_rotation_noise(5.0, &mut rng);
        let ang = rotation_angle_between(&noisy.rotation(), &cam.rotation());
        assert!((ang - th.abs()).abs() < 1e-9);
        assert_eq!(noisy.t, cam.t);
        assert_eq!(noisy.f, cam.f);
    }

    #[test]
    fn noise_moments_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let sigma = 10.0f64;
        let mut abs_sum = 0.0;
        let mut axis_sum = Vec3::ZERO;
        for _ in 0..n {
            let (axis, th) = sample_rotation_noise(sigma, &mut rng);
            abs_sum += th.abs();
            axis_sum += axis;
        }
        let expected = sigma.to_radians() * (2.0 / std::f64::consts::PI).sqrt();
        let mean = abs_sum / n as f64;
        assert!((mean - expected).abs() / expected < 0.02, "{mean} vs {expected}");
        assert!(axis_sum.scale(1.0 / n as f64).norm() < 0.02);
    }

    #[test]
    fn series_branch_gradient_matches_fd() {
        for r0 in [[1e-4, -2e-4, 3e-4], [0.0, 0.0, 0.0], [0.3, 0.5, -1.1]] {
            for (i, j) in [(0usize, 1usize), (2, 0), (1, 1)] {
                let f64f = |p: &[f64]| rotation_matrix(Vec3::new(p[0], p[1], p[2])).m[i][j];
                let (_, g) = gradient(&r0, |x| rotation_matrix(Vec3::new(x[0], x[1], x[2])).m[i][j]);
                let rep = finite_diff_check(f64f, &r0, &g, 1e-5, &[0, 1, 2]);
                assert!(rep.passes(1e-5), "{r0:?} ({i},{j}) {rep:?}");
            }
        }
    }

    #[test]
    fn project_gradient_matches_fd() {
        // r, t, f, x
        let p0 = [0.2, -0.4, 0.3, 0.1, -0.2, 3.0, 0.45, 0.3, 0.2, -0.1];
        let build = |p: &[f64]| -> [f64; 3] {
            let cam = CameraT {
                r: Vec3::new(p[0], p[1], p[2]),
                t: Vec3::new(p[3], p[4], p[5]),
                f: p[6],
            };
            let v = cam.project(Vec3::new(p[7], p[8], p[9])).unwrap();
            [v.ndc[0], v.ndc[1], v.z]
        };
        for out in 0..3 {
            let (_, g) = gradient(&p0, |x: &[Var]| {
                let cam = CameraT {
                    r: Vec3::new(x[0], x[1], x[2]),
                    t: Vec3::new(x[3], x[4], x[5]),
                    f: x[6],
                };
                let v = cam.project(Vec3::new(x[7], x[8], x[9])).unwrap();
                [v.ndc[0], v.ndc[1], v.z][out]
            });
            let rep = finite_diff_check(|p| build(p)[out], &p0, &g, 1e-5, &(0..10).collect::<Vec<_>>());
            assert!(rep.passes(1e-4), "{rep:?}");
        }
    }

    #[test]
    fn camera_json_round_trip() {
        let cams = vec![
            Camera::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.0, 0.1, 2.5), 0.3).unwrap(),
            Camera::new(Vec3::new(-1.0, 0.0, 0.7), Vec3::new(1e-17, 0.0, 3.0), 0.2).unwrap(),
        ];
        let back = cameras_from_json(&cameras_to_json(&cams)).unwrap();
        assert_eq!(back, cams);
    }

    #[test]
    fn orbit_camera_sees_origin_on_axis() {
        let rot = euler_rotation(0.3, 1.2, -2.0);
        let cam = orbit_camera(&rot, 3.0, 0.3).unwrap();
        let p = cam.project(Vec3::ZERO).unwrap();
        assert!(p.ndc[0].abs() < 1e-12 && p.ndc[1].abs() < 1e-12);
        assert!((p.z - 3.0).abs() < 1e-12);
        assert!((cam.center().norm() - 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(x in -4.0f64..4.0, y in -4.0f64..4.0, z in -4.0f64..4.0) {
            let r = rotation_matrix(Vec3::new(x, y, z));
            prop_assert!(r.transpose().matmul(&r).max_abs_diff(&Mat3::identity()) < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
            let rn = rotation_matrix(Vec3::new(-x, -y, -z));
            prop_assert!(rn.max_abs_diff(&r.transpose()) < 1e-12);
        }

        #[test]
        fn log_map_inverts_rotation(x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
            let r = rotation_matrix(Vec3::new(x, y, z));
            let back = rotation_matrix(log_map(&r));
            prop_assert!(back.max_abs_diff(&r) < 1e-9);
        }

        #[test]
        fn rotation_composition_through_projection(
            a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0,
            px in -0.5f64..0.5, py in -0.5f64..0.5, pz in -0.5f64..0.5,
        ) {
            let cam = Camera::new(Vec3::new(0.3, -0.2, 0.5), Vec3::new(0.0, 0.0, 3.0), 0.4).unwrap();
            let extra = rotation_matrix(Vec3::new(a, b, c));
            let x = Vec3::new(px, py, pz);
            let moved = cam.project(extra.mul_vec(x)).unwrap();
            let absorbed = Camera::from_rotation(&cam.rotation().matmul(&extra), Vec3::from_array(cam.t), cam.f).unwrap();
            let direct = absorbed.project(x).unwrap();
            prop_assert!((moved.ndc[0] - direct.ndc[0]).abs() < 1e-9);
            prop_assert!((moved.ndc[1] - direct.ndc[1]).abs() < 1e-9);
        }
    }
}
