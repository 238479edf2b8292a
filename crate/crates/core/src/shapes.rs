//! Procedural test objects and their albedo.

use std::str::FromStr;

use crate::math::{Vec3, Vec3f};
use crate::mesh::TriMesh;
use crate::topology::{extract_isosurface, TopologyError};

/// Built-in synthetic objects, defined by signed distance functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    /// A sphere with a slot cut into one side.
    NotchSphere,
    /// Two disjoint spheres side by side.
    TwoSpheres,
    Cube,
}

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Shape, String> {
        match s {
            "sphere" => Ok(Shape::Sphere),
            "notch-sphere" | "notch" => Ok(Shape::NotchSphere),
            "two-spheres" => Ok(Shape::TwoSpheres),
            "cube" => Ok(Shape::Cube),
            _ => Err(format!("unknown shape '{s}' (sphere, notch-sphere, two-spheres, cube)")),
        }
    }
}

fn sd_sphere(p: Vec3f, c: Vec3f, r: f64) -> f64 {
    (p - c).norm() - r
}

fn sd_box(p: Vec3f, c: Vec3f, half: Vec3f) -> f64 {
    let d = p - c;
    let q = Vec3::new(d.x.abs() - half.x, d.y.abs() - half.y, d.z.abs() - half.z);
    let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
    outside + q.x.max(q.y).max(q.z).min(0.0)
}

impl Shape {
    /// Signed distance, negative inside.
    pub fn sdf(&self, p: Vec3f) -> f64 {
        match self {
            Shape::Sphere => sd_sphere(p, Vec3::ZERO, 0.5),
            Shape::NotchSphere => {
                let ball = sd_sphere(p, Vec3::ZERO, 0.5);
                let slot = sd_box(p, Vec3::new(0.5, 0.0, 0.0), Vec3::new(0.3, 0.12, 0.7));
                ball.max(-slot)
            }
            Shape::TwoSpheres => sd_sphere(p, Vec3::new(-0.4, 0.0, 0.0), 0.3).min(sd_sphere(p, Vec3::new(0.4, 0.0, 0.0), 0.3)),
            Shape::Cube => sd_box(p, Vec3::ZERO, Vec3::splat(0.4)),
        }
    }

    /// Triangulated zero level set on a lattice of `resolution` samples per axis over `[-1, 1]³`.
    pub fn mesh(&self, resolution: usize) -> Result<TriMesh, TopologyError> {
        let h = 2.0 / (resolution - 1) as f64;
        let origin = Vec3::splat(-1.0);
        extract_isosurface(
            [resolution; 3],
            origin,
            Vec3::splat(h),
            |i, j, k| -self.sdf(origin + Vec3::new(i as f64 * h, j as f64 * h, k as f64 * h)),
            0.0,
        )
    }
}

/// Procedural surface albedo.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Albedo {
    /// 3D checkerboard with the given cell size.
    Checker { cell: f64 },
    /// Smooth color ramp over the bounding box.
    Gradient { lo: Vec3f, hi: Vec3f },
}

const CHECK_A: [f64; 3] = [0.85, 0.35, 0.15];
const CHECK_B: [f64; 3] = [0.12, 0.35, 0.8];

impl Albedo {
    pub fn color(&self, p: Vec3f) -> Vec3f {
        match self {
            Albedo::Checker { cell } => {
                let k = (p.x / cell).floor() + (p.y / cell).floor() + (p.z / cell).floor();
                Vec3::from_array(if (k as i64).rem_euclid(2) == 0 { CHECK_A } else { CHECK_B })
            }
            Albedo::Gradient { lo, hi } => {
                let e = *hi - *lo;
                let t = |a: f64, l: f64, s: f64| if s > 0.0 { ((a - l) / s).clamp(0.0, 1.0) } else { 0.5 };
                Vec3::new(t(p.x, lo.x, e.x), 0.3 + 0.4 * t(p.y, lo.y, e.y), 1.0 - t(p.z, lo.z, e.z))
            }
        }
    }
}
