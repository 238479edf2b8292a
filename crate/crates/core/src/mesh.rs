//! Triangle meshes and the differentiable geometric operators on them.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Real;
use crate::math::{Vec3, Vec3f};

/// Faces smaller than this are rejected at construction.
pub const MIN_FACE_AREA: f64 = 1e-12;

/// Cotangent weights are clamped to this magnitude.
pub const COT_CLAMP: f64 = 1e4;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("face {face} references vertex {index} but the mesh has {count} vertices")]
    IndexOutOfRange { face: usize, index: u32, count: usize },
    #[error("face {face} has area {area:e}, below the minimum {MIN_FACE_AREA:e}")]
    DegenerateFace { face: usize, area: f64 },
    #[error("vertex {0} has no incident face with nonzero area")]
    DegenerateNormal(usize),
    #[error("mesh has no edges")]
    NoEdges,
    #[error("mesh has zero surface area")]
    ZeroArea,
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Marks a mesh as the warmup sphere so that subdivision keeps it round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereTag {
    pub center: Vec3f,
}

/// Shape hypothesis: frozen base vertices plus optimizable per-vertex offsets.
#[derive(Clone, Debug)]
pub struct TriMesh {
    base: Vec<Vec3f>,
    offsets: Vec<Vec3f>,
    faces: Vec<[u32; 3]>,
    sphere: Option<SphereTag>,
}

impl TriMesh {
    /// Validates indices and face areas.
    pub fn new(vertices: Vec<Vec3f>, faces: Vec<[u32; 3]>) -> Result<TriMesh, MeshError> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            for &idx in f {
                if idx as usize >= n {
                    return Err(MeshError::IndexOutOfRange { face: fi, index: idx, count: n });
                }
            }
            let area = triangle_area(vertices[f[0] as usize], vertices[f[1] as usize], vertices[f[2] as usize]);
            if area < MIN_FACE_AREA {
                return Err(MeshError::DegenerateFace { face: fi, area });
            }
        }
        Ok(TriMesh {
            offsets: vec![Vec3::ZERO; n],
            base: vertices,
            faces,
            sphere: None,
        })
    }

    /// Drops degenerate and duplicate faces and unreferenced vertices.
    pub fn new_cleaned(vertices: Vec<Vec3f>, faces: Vec<[u32; 3]>) -> Result<TriMesh, MeshError> {
        let n = vertices.len();
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(faces.len());
        for (fi, f) in faces.into_iter().enumerate() {
            for &idx in &f {
                if idx as usize >= n {
                    return Err(MeshError::IndexOutOfRange { face: fi, index: idx, count: n });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                continue;
            }
            let area = triangle_area(vertices[f[0] as usize], vertices[f[1] as usize], vertices[f[2] as usize]);
            if area < MIN_FACE_AREA {
                continue;
            }
            let mut key = f;
            key.sort_unstable();
            if seen.insert(key) {
                kept.push(f);
            }
        }
        let mut remap = vec![u32::MAX; n];
        let mut out_v = Vec::new();
        for f in kept.iter_mut() {
            for idx in f.iter_mut() {
                let r = &mut remap[*idx as usize];
                if *r == u32::MAX {
                    *r = out_v.len() as u32;
                    out_v.push(vertices[*idx as usize]);
                }
                *idx = *r;
            }
        }
        TriMesh::new(out_v, kept)
    }

    pub fn empty() -> TriMesh {
        TriMesh {
            base: Vec::new(),
            offsets: Vec::new(),
            faces: Vec::new(),
            sphere: None,
        }
    }

    pub fn with_sphere_tag(mut self, tag: Option<SphereTag>) -> TriMesh {
        self.sphere = tag;
        self
    }

    pub fn sphere_tag(&self) -> Option<SphereTag> {
        self.sphere
    }

    pub fn num_vertices(&self) -> usize {
        self.base.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn base_vertices(&self) -> &[Vec3f] {
        &self.base
    }

    pub fn offsets(&self) -> &[Vec3f] {
        &self.offsets
    }

    pub fn offsets_mut(&mut self) -> &mut [Vec3f] {
        &mut self.offsets
    }

    /// Effective positions `V = V_0 + ΔV`.
    pub fn vertices(&self) -> Vec<Vec3f> {
        self.base
            .iter()
            .zip(&self.offsets)
            .map(|(b, o)| *b + *o)
            .collect()
    }

    /// Effective positions become the new base; offsets are zeroed.
    pub fn rebase(&mut self) {
        self.base = self.vertices();
        self.offsets.iter_mut().for_each(|o| *o = Vec3::ZERO);
    }

    /// Applies `f` to every effective vertex and rebases.
    pub fn map_vertices(&self, f: impl Fn(Vec3f) -> Vec3f) -> TriMesh {
        let verts = self.vertices().into_iter().map(f).collect();
        TriMesh {
            offsets: vec![Vec3::ZERO; self.base.len()],
            base: verts,
            faces: self.faces.clone(),
            sphere: None,
        }
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let v = self.vertices();
        let [a, b, c] = self.faces[f];
        triangle_area(v[a as usize], v[b as usize], v[c as usize])
    }

    pub fn total_area(&self) -> f64 {
        let v = self.vertices();
        self.faces
            .iter()
            .map(|f| triangle_area(v[f[0] as usize], v[f[1] as usize], v[f[2] as usize]))
            .sum()
    }

    /// Signed enclosed volume; positive for outward-wound closed meshes.
    pub fn signed_volume(&self) -> f64 {
        let v = self.vertices();
        self.faces
            .iter()
            .map(|f| {
                let (a, b, c) = (v[f[0] as usize], v[f[1] as usize], v[f[2] as usize]);
                a.dot(b.cross(c)) / 6.0
            })
            .sum()
    }

    pub fn bounds(&self) -> Option<(Vec3f, Vec3f)> {
        let v = self.vertices();
        let first = *v.first()?;
        Some(v.iter().fold((first, first), |(lo, hi), p| (lo.component_min(*p), hi.component_max(*p))))
    }

    /// Reverses the winding of every face.
    pub fn flipped(&self) -> TriMesh {
        let mut out = self.clone();
        for f in out.faces.iter_mut() {
            f.swap(1, 2);
        }
        out
    }

    /// Concatenates two meshes.
    pub fn merged(&self, other: &TriMesh) -> TriMesh {
        let off = self.num_vertices() as u32;
        let mut base = self.vertices();
        base.extend(other.vertices());
        let mut faces = self.faces.clone();
        faces.extend(other.faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
        TriMesh {
            offsets: vec![Vec3::ZERO; base.len()],
            base,
            faces,
            sphere: None,
        }
    }

    /// 1-to-4 midpoint subdivision. The result has zero offsets and its base is
    /// the subdivided effective geometry. When the mesh carries a sphere tag each
    /// midpoint is pushed radially to the mean radius of its edge endpoints.
    pub fn subdivide(&self) -> TriMesh {
        let verts = self.vertices();
        let mut out_v = verts.clone();
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut out_f = Vec::with_capacity(self.faces.len() * 4);
        let mut midpoint = |a: u32, b: u32, out_v: &mut Vec<Vec3f>| -> u32 {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                let pa = verts[a as usize];
                let pb = verts[b as usize];
                let mut m = (pa + pb).scale(0.5);
                if let Some(tag) = self.sphere {
                    let r = 0.5 * ((pa - tag.center).norm() + (pb - tag.center).norm());
                    let d = m - tag.center;
                    let n = d.norm();
                    if n > 0.0 {
                        m = tag.center + d.scale(r / n);
                    }
                }
                out_v.push(m);
                (out_v.len() - 1) as u32
            })
        };
        for f in &self.faces {
            let [a, b, c] = *f;
            let ab = midpoint(a, b, &mut out_v);
            let bc = midpoint(b, c, &mut out_v);
            let ca = midpoint(c, a, &mut out_v);
            out_f.push([a, ab, ca]);
            out_f.push([ab, b, bc]);
            out_f.push([ca, bc, c]);
            out_f.push([ab, bc, ca]);
        }
        TriMesh {
            offsets: vec![Vec3::ZERO; out_v.len()],
            base: out_v,
            faces: out_f,
            sphere: self.sphere,
        }
    }

    /// Area-weighted unit vertex normals.
    pub fn vertex_normals(&self) -> Result<Vec<Vec3f>, MeshError> {
        let v = self.vertices();
        let sums = accumulate_face_normals(&v, &self.faces);
        let mut used = vec![false; v.len()];
        for f in &self.faces {
            for &i in f {
                used[i as usize] = true;
            }
        }
        sums.into_iter()
            .enumerate()
            .map(|(i, s)| {
                let n = s.norm();
                if used[i] && n <= 1e-300 {
                    Err(MeshError::DegenerateNormal(i))
                } else if n <= 1e-300 {
                    Ok(Vec3::ZERO)
                } else {
                    Ok(s.scale(1.0 / n))
                }
            })
            .collect()
    }

    pub fn edges(&self) -> EdgeSet {
        EdgeSet::new(&self.vertices(), &self.faces)
    }

    pub fn mean_edge_length(&self) -> Result<f64, MeshError> {
        let e = self.edges();
        if e.is_empty() {
            return Err(MeshError::NoEdges);
        }
        Ok(e.rest_length)
    }

    /// Row-normalized cotangent Laplacian applied to the effective vertices.
    pub fn cotangent_laplacian_apply(&self) -> Vec<Vec3f> {
        cotangent_laplacian(&self.vertices(), &self.faces)
    }

    /// Euler characteristic `V - E + F` of the referenced combinatorics.
    pub fn euler_characteristic(&self) -> i64 {
        self.num_vertices() as i64 - self.edges().len() as i64 + self.num_faces() as i64
    }

    /// True when every undirected edge is shared by exactly two faces.
    pub fn is_closed(&self) -> bool {
        let mut count: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        !count.is_empty() && count.values().all(|&c| c == 2)
    }

    /// Connected components over face adjacency through shared vertices.
    pub fn connected_components(&self) -> usize {
        let n = self.num_vertices();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for f in &self.faces {
            let a = find(&mut parent, f[0] as usize);
            for &o in &f[1..] {
                let b = find(&mut parent, o as usize);
                if a != b {
                    parent[b] = a;
                }
            }
        }
        let mut roots = HashSet::new();
        for f in &self.faces {
            roots.insert(find(&mut parent, f[0] as usize));
        }
        roots.len()
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in self.vertices() {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: &Path) -> Result<(), MeshError> {
        fs::write(path, self.to_obj())?;
        Ok(())
    }

    /// Parses vertices and (fan-triangulated) faces; other records are ignored.
    pub fn read_obj(path: &Path) -> Result<TriMesh, MeshError> {
        let text = fs::read_to_string(path)?;
        let perr = |line: usize, msg: &str| MeshError::Parse {
            path: path.display().to_string(),
            msg: format!("line {}: {msg}", line + 1),
        };
        let mut verts = Vec::new();
        let mut faces = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| perr(ln, "bad vertex coordinate"))?;
                    if c.len() != 3 {
                        return Err(perr(ln, "vertex needs 3 coordinates"));
                    }
                    verts.push(Vec3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let idx: Vec<u32> = it
                        .map(|t| {
                            let head = t.split('/').next().unwrap_or("");
                            head.parse::<i64>()
                                .ok()
                                .and_then(|i| {
                                    if i > 0 {
                                        Some((i - 1) as u32)
                                    } else if i < 0 {
                                        Some((verts.len() as i64 + i) as u32)
                                    } else {
                                        None
                                    }
                                })
                                .ok_or_else(|| perr(ln, "bad face index"))
                        })
                        .collect::<Result<_, _>>()?;
                    if idx.len() < 3 {
                        return Err(perr(ln, "face needs at least 3 vertices"));
                    }
                    for k in 1..idx.len() - 1 {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        TriMesh::new_cleaned(verts, faces)
    }

    /// ASCII PLY with 8-bit per-vertex colors.
    pub fn to_ply(&self, colors: &[Vec3f]) -> String {
        assert_eq!(colors.len(), self.num_vertices());
        let mut s = String::new();
        let _ = write!(
            s,
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nelement face {}\n\
             property list uchar int vertex_indices\nend_header\n",
            self.num_vertices(),
            self.num_faces()
        );
        for (v, c) in self.vertices().iter().zip(colors) {
            let q = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = writeln!(s, "{} {} {} {} {} {}", v.x, v.y, v.z, q(c.x), q(c.y), q(c.z));
        }
        for f in &self.faces {
            let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
        }
        s
    }

    pub fn write_ply(&self, path: &Path, colors: &[Vec3f]) -> Result<(), MeshError> {
        fs::write(path, self.to_ply(colors))?;
        Ok(())
    }

    /// Reads the ASCII PLY written by [`TriMesh::write_ply`].
    pub fn read_ply(path: &Path) -> Result<(TriMesh, Vec<Vec3f>), MeshError> {
        let text = fs::read_to_string(path)?;
        let perr = |msg: &str| MeshError::Parse {
            path: path.display().to_string(),
            msg: msg.to_string(),
        };
        let mut lines = text.lines();
        let (mut nv, mut nf) = (0usize, 0usize);
        for line in lines.by_ref() {
            let t: Vec<&str> = line.split_whitespace().collect();
            match t.as_slice() {
                ["element", "vertex", n] => nv = n.parse().map_err(|_| perr("bad vertex count"))?,
                ["element", "face", n] => nf = n.parse().map_err(|_| perr("bad face count"))?,
                ["end_header"] => break,
                _ => {}
            }
        }
        let mut verts = Vec::with_capacity(nv);
        let mut colors = Vec::with_capacity(nv);
        for _ in 0..nv {
            let t: Vec<f64> = lines
                .next()
                .ok_or_else(|| perr("truncated vertex list"))?
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| perr("bad vertex record"))?;
            if t.len() < 6 {
                return Err(perr("vertex record needs position and color"));
            }
            verts.push(Vec3::new(t[0], t[1], t[2]));
            colors.push(Vec3::new(t[3] / 255.0, t[4] / 255.0, t[5] / 255.0));
        }
        let mut faces = Vec::with_capacity(nf);
        for _ in 0..nf {
            let t: Vec<u32> = lines
                .next()
                .ok_or_else(|| perr("truncated face list"))?
                .split_whitespace()
                .map(|x| x.parse::<u32>())
                .collect::<Result<_, _>>()
                .map_err(|_| perr("bad face record"))?;
            if t.len() != 4 || t[0] != 3 {
                return Err(perr("only triangle faces are supported"));
            }
            faces.push([t[1], t[2], t[3]]);
        }
        Ok((TriMesh::new(verts, faces)?, colors))
    }
}

pub fn triangle_area(a: Vec3f, b: Vec3f, c: Vec3f) -> f64 {
    0.5 * (b - a).cross(c - a).norm()
}

/// Icosahedron refined `level` times, projected onto a sphere of `radius`.
pub fn make_icosphere(level: u32, radius: f64) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ];
    let verts: Vec<Vec3f> = raw
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalized_or_zero().scale(radius))
        .collect();
    let faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    let mut mesh = TriMesh::new(verts, faces)
        .expect("icosahedron is valid")
        .with_sphere_tag(Some(SphereTag { center: Vec3::ZERO }));
    for _ in 0..level {
        mesh = mesh.subdivide();
    }
    mesh
}

/// Sum of unnormalized face normals per vertex (area weighted).
pub fn accumulate_face_normals<T: Real>(verts: &[Vec3<T>], faces: &[[u32; 3]]) -> Vec<Vec3<T>> {
    let mut sums = vec![Vec3::<T>::zero(); verts.len()];
    for f in faces {
        let (a, b, c) = (verts[f[0] as usize], verts[f[1] as usize], verts[f[2] as usize]);
        let n = (b - a).cross(c - a);
        for &i in f {
            sums[i as usize] += n;
        }
    }
    sums
}

/// Unit area-weighted vertex normals; zero where undefined.
pub fn vertex_normals_generic<T: Real>(verts: &[Vec3<T>], faces: &[[u32; 3]]) -> Vec<Vec3<T>> {
    accumulate_face_normals(verts, faces)
        .into_iter()
        .map(|s| s.normalized_or_zero())
        .collect()
}

/// Undirected edges with their mean rest length.
#[derive(Clone, Debug)]
pub struct EdgeSet {
    pub edges: Vec<[u32; 2]>,
    pub rest_length: f64,
}

impl EdgeSet {
    pub fn new(verts: &[Vec3f], faces: &[[u32; 3]]) -> EdgeSet {
        let mut set = HashSet::new();
        let mut edges = Vec::new();
        for f in faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = [a.min(b), a.max(b)];
                if set.insert(key) {
                    edges.push(key);
                }
            }
        }
        let rest_length = if edges.is_empty() {
            0.0
        } else {
            edges
                .iter()
                .map(|e| (verts[e[0] as usize] - verts[e[1] as usize]).norm())
                .sum::<f64>()
                / edges.len() as f64
        };
        EdgeSet { edges, rest_length }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

#[inline]
fn clamped_cot<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    let cr = a.cross(b).norm();
    if cr.val() <= 1e-300 {
        return T::cst(if a.dot(b).val() >= 0.0 { COT_CLAMP } else { -COT_CLAMP });
    }
    let c = a.dot(b) / cr;
    c.clamp(-COT_CLAMP, COT_CLAMP)
}

/// Cotangent Laplacian, each row normalized by its total weight:
/// `(L V)_i = Σ_j w_ij (V_j − V_i) / Σ_j w_ij`. Rows with non-positive total
/// weight are zero.
pub fn cotangent_laplacian<T: Real>(verts: &[Vec3<T>], faces: &[[u32; 3]]) -> Vec<Vec3<T>> {
    let n = verts.len();
    let mut acc = vec![Vec3::<T>::zero(); n];
    let mut wsum = vec![T::zero(); n];
    for f in faces {
        for k in 0..3 {
            let i = f[k] as usize;
            let j = f[(k + 1) % 3] as usize;
            let o = f[(k + 2) % 3] as usize;
            // the angle opposite edge (i, j) sits at o
            let w = clamped_cot(verts[i] - verts[o], verts[j] - verts[o]) * 0.5;
            acc[i] += (verts[j] - verts[i]).scale(w);
            acc[j] += (verts[i] - verts[j]).scale(w);
            wsum[i] += w;
            wsum[j] += w;
        }
    }
    acc.into_iter()
        .zip(wsum)
        .map(|(a, w)| if w.val() > 1e-12 { a.scale(w.recip()) } else { Vec3::zero() })
        .collect()
}
