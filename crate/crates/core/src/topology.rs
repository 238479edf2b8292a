//! Variable topology: solid voxelization, silhouette carving and marching
//! cubes remeshing.

use std::collections::HashMap;
use std::sync::OnceLock;

use log::warn;
use thiserror::Error;

use crate::camera::Camera;
use crate::imageio::GrayImage;
use crate::math::{Vec3, Vec3f};
use crate::mesh::{MeshError, TriMesh};

/// Fraction of ambiguous parity votes above which the input is reported as open.
pub const AMBIGUOUS_WARN: f64 = 0.2;

/// Offset of the parity rays from voxel centers, avoiding exact edge hits.
const RAY_OFFSET: f64 = 1e-7;

/// Empty voxels kept around the mesh bounds.
pub const MARGIN: usize = 2;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("empty shape: {0}")]
    EmptyShape(&'static str),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("{masks} masks for {cameras} cameras")]
    ViewCount { masks: usize, cameras: usize },
}

/// Dense boolean occupancy over axis-aligned bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub min: Vec3f,
    pub max: Vec3f,
    pub occ: Vec<bool>,
}

impl VoxelGrid {
    pub fn new(min: Vec3f, max: Vec3f, dims: [usize; 3]) -> VoxelGrid {
        assert!(dims.iter().all(|&d| d > 0), "grid dimensions must be positive");
        VoxelGrid {
            dims,
            min,
            max,
            occ: vec![false; dims[0] * dims[1] * dims[2]],
        }
    }

    /// Grid of cubic voxels around `[lo, hi]` with `resolution` voxels along
    /// the longest axis, including a margin of [`MARGIN`] empty voxels a side.
    pub fn around(lo: Vec3f, hi: Vec3f, resolution: usize) -> VoxelGrid {
        assert!(resolution > 2 * MARGIN, "resolution too small for the margin");
        let ext = hi - lo;
        let longest = ext.x.max(ext.y).max(ext.z).max(1e-9);
        let h = longest / (resolution - 2 * MARGIN) as f64;
        let e = ext.to_array();
        let dims = e.map(|x| ((x / h).ceil() as usize).max(1) + 2 * MARGIN);
        let c = (lo + hi).scale(0.5);
        let half = Vec3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64).scale(0.5 * h);
        VoxelGrid::new(c - half, c + half, dims)
    }

    pub fn len(&self) -> usize {
        self.occ.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occ.is_empty()
    }

    pub fn voxel_size(&self) -> Vec3f {
        let e = self.max - self.min;
        Vec3::new(
            e.x / self.dims[0] as f64,
            e.y / self.dims[1] as f64,
            e.z / self.dims[2] as f64,
        )
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3f {
        let h = self.voxel_size();
        self.min + Vec3::new((i as f64 + 0.5) * h.x, (j as f64 + 0.5) * h.y, (k as f64 + 0.5) * h.z)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.occ[self.index(i, j, k)]
    }

    pub fn count(&self) -> usize {
        self.occ.iter().filter(|&&o| o).count()
    }

    /// Raw dump: a text header line with dims and bounds, then one byte per voxel.
    pub fn to_raw(&self) -> Vec<u8> {
        let mut out = format!(
            "voxels {} {} {} {} {} {} {} {} {}\n",
            self.dims[0], self.dims[1], self.dims[2], self.min.x, self.min.y, self.min.z, self.max.x, self.max.y, self.max.z
        )
        .into_bytes();
        out.extend(self.occ.iter().map(|&o| o as u8));
        out
    }
}

/// Result of solid voxelization.
#[derive(Clone, Debug)]
pub struct Voxelization {
    pub grid: VoxelGrid,
    /// Fraction of voxels whose three parity votes were not unanimous.
    pub ambiguous: f64,
    pub open_warning: bool,
}

/// Parity inside test for every voxel center along one axis.
fn parity_votes(mesh_v: &[Vec3f], faces: &[[u32; 3]], grid: &VoxelGrid, axis: usize) -> Vec<bool> {
    let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
    let h = grid.voxel_size().to_array();
    let min = grid.min.to_array();
    let (nb, nc) = (grid.dims[b], grid.dims[c]);
    let mut hits: Vec<Vec<f64>> = vec![Vec::new(); nb * nc];
    for f in faces {
        let p = [0, 1, 2].map(|k| mesh_v[f[k] as usize].to_array());
        let cb = |x: f64| (x - min[b]) / h[b] - 0.5;
        let cc = |x: f64| (x - min[c]) / h[c] - 0.5;
        let (bl, bh) = (p.iter().map(|q| cb(q[b])).fold(f64::INFINITY, f64::min), p.iter().map(|q| cb(q[b])).fold(f64::NEG_INFINITY, f64::max));
        let (cl, ch) = (p.iter().map(|q| cc(q[c])).fold(f64::INFINITY, f64::min), p.iter().map(|q| cc(q[c])).fold(f64::NEG_INFINITY, f64::max));
        let (i0, i1) = (bl.ceil().max(0.0) as usize, bh.floor().min(nb as f64 - 1.0));
        let (j0, j1) = (cl.ceil().max(0.0) as usize, ch.floor().min(nc as f64 - 1.0));
        if i1 < 0.0 || j1 < 0.0 {
            continue;
        }
        for j in j0..=j1 as usize {
            for i in i0..=i1 as usize {
                let u = min[b] + (i as f64 + 0.5) * h[b] + RAY_OFFSET;
                let w = min[c] + (j as f64 + 0.5) * h[c] + 0.618 * RAY_OFFSET;
                let e = |s: &[f64; 3], t: &[f64; 3]| (t[b] - s[b]) * (w - s[c]) - (t[c] - s[c]) * (u - s[b]);
                let (e0, e1, e2) = (e(&p[1], &p[2]), e(&p[2], &p[0]), e(&p[0], &p[1]));
                let inside = (e0 > 0.0 && e1 > 0.0 && e2 > 0.0) || (e0 < 0.0 && e1 < 0.0 && e2 < 0.0);
                if !inside {
                    continue;
                }
                let s = e0 + e1 + e2;
                let t = (e0 * p[0][axis] + e1 * p[1][axis] + e2 * p[2][axis]) / s;
                hits[j * nb + i].push(t);
            }
        }
    }
    let mut inside = vec![false; grid.len()];
    let mut ijk = [0usize; 3];
    for j in 0..nc {
        for i in 0..nb {
            let line = &mut hits[j * nb + i];
            line.sort_by(f64::total_cmp);
            let mut crossed = 0;
            for s in 0..grid.dims[axis] {
                let pos = min[axis] + (s as f64 + 0.5) * h[axis];
                while crossed < line.len() && line[crossed] < pos {
                    crossed += 1;
                }
                ijk[axis] = s;
                ijk[b] = i;
                ijk[c] = j;
                inside[grid.index(ijk[0], ijk[1], ijk[2])] = crossed % 2 == 1;
            }
        }
    }
    inside
}

/// Occupies every voxel of `grid` whose center is inside `mesh` by a
/// majority of parity votes along the three axes.
pub fn fill_solid(mesh: &TriMesh, grid: &VoxelGrid) -> Voxelization {
    let mut grid = grid.clone();
    grid.occ.iter_mut().for_each(|o| *o = false);
    if mesh.is_empty() {
        return Voxelization {
            grid,
            ambiguous: 0.0,
            open_warning: false,
        };
    }
    let verts = mesh.vertices();
    let votes: Vec<Vec<bool>> = (0..3).map(|a| parity_votes(&verts, mesh.faces(), &grid, a)).collect();
    let mut ambiguous = 0usize;
    for (idx, o) in grid.occ.iter_mut().enumerate() {
        let n = votes.iter().filter(|v| v[idx]).count();
        *o = n >= 2;
        if n == 1 || n == 2 {
            ambiguous += 1;
        }
    }
    let ambiguous = ambiguous as f64 / grid.len() as f64;
    let open_warning = ambiguous > AMBIGUOUS_WARN;
    if open_warning {
        warn!("voxelization: {:.1}% ambiguous parity votes, mesh is likely open", 100.0 * ambiguous);
    }
    Voxelization {
        grid,
        ambiguous,
        open_warning,
    }
}

/// Solid voxelization on a grid of cubic voxels fitted around the mesh.
pub fn voxelize_solid(mesh: &TriMesh, resolution: usize) -> Voxelization {
    let (lo, hi) = mesh.bounds().unwrap_or((Vec3::splat(-0.5), Vec3::splat(0.5)));
    fill_solid(mesh, &VoxelGrid::around(lo, hi, resolution))
}

/// Keeps a voxel only if its center projects into the frame and onto an
/// occupied pixel (nearest-pixel lookup, threshold 0.5) in every view.
pub fn carve(grid: &VoxelGrid, masks: &[GrayImage], cams: &[Camera]) -> Result<VoxelGrid, TopologyError> {
    if masks.len() != cams.len() {
        return Err(TopologyError::ViewCount {
            masks: masks.len(),
            cameras: cams.len(),
        });
    }
    let mut out = grid.clone();
    for k in 0..grid.dims[2] {
        for j in 0..grid.dims[1] {
            for i in 0..grid.dims[0] {
                let idx = grid.index(i, j, k);
                if !grid.occ[idx] {
                    continue;
                }
                let x = grid.center(i, j, k);
                let keep = masks.iter().zip(cams).all(|(m, cam)| {
                    let Ok(p) = cam.project(x) else {
                        return false;
                    };
                    if !m.size.in_frame(p.ndc) {
                        return false;
                    }
                    let [u, v] = m.size.ndc_to_screen(p.ndc);
                    m.size.pixel_at(u, v).is_some_and(|(c, r)| m.get(c, r) >= 0.5)
                });
                out.occ[idx] = keep;
            }
        }
    }
    Ok(out)
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Cube edges as corner pairs, in the numbering of [`CORNERS`].
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [2, 3],
    [4, 5],
    [6, 7],
    [0, 2],
    [1, 3],
    [4, 6],
    [5, 7],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Cube faces as cyclic corner loops with their outward normals.
const FACES: [([usize; 4], [i32; 3]); 6] = [
    ([0, 2, 6, 4], [-1, 0, 0]),
    ([1, 3, 7, 5], [1, 0, 0]),
    ([0, 1, 5, 4], [0, -1, 0]),
    ([2, 3, 7, 6], [0, 1, 0]),
    ([0, 1, 3, 2], [0, 0, -1]),
    ([4, 5, 7, 6], [0, 0, 1]),
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
        .expect("corners share an edge")
}

fn corner_pos(c: usize) -> Vec3f {
    let p = CORNERS[c];
    Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)
}

fn edge_mid(e: usize) -> Vec3f {
    (corner_pos(EDGES[e][0]) + corner_pos(EDGES[e][1])).scale(0.5)
}

/// Triangles (as edge triples) for one of the 256 corner configurations.
fn build_case(case: usize) -> Vec<[usize; 3]> {
    let inside = |c: usize| case >> c & 1 == 1;
    // directed segments between crossed edges on each face, with the inside
    // corners on their left as seen from outside the cube
    let mut next: HashMap<usize, usize> = HashMap::new();
    for (loop4, normal) in FACES {
        let n = Vec3::new(normal[0] as f64, normal[1] as f64, normal[2] as f64);
        let ins: Vec<bool> = loop4.iter().map(|&c| inside(c)).collect();
        if ins.iter().all(|&b| b) || ins.iter().all(|&b| !b) {
            continue;
        }
        for s in 0..4 {
            // a run of inside corners starting at s, cut off at both ends
            if !ins[s] || ins[(s + 3) % 4] {
                continue;
            }
            let mut e = s;
            while ins[(e + 1) % 4] {
                e = (e + 1) % 4;
            }
            let ea = edge_between(loop4[(s + 3) % 4], loop4[s]);
            let eb = edge_between(loop4[e], loop4[(e + 1) % 4]);
            let (p, q) = (edge_mid(ea), edge_mid(eb));
            let c = corner_pos(loop4[s]);
            let (from, to) = if n.cross(q - p).dot(c - p) > 0.0 { (ea, eb) } else { (eb, ea) };
            next.insert(from, to);
        }
        // diagonal inside corners form two separate runs; nothing else to do
    }
    let mut tris = Vec::new();
    let mut starts: Vec<usize> = next.keys().copied().collect();
    starts.sort_unstable();
    let mut used = [false; 12];
    for s in starts {
        if used[s] {
            continue;
        }
        let mut poly = vec![s];
        used[s] = true;
        let mut cur = next[&s];
        while cur != s {
            used[cur] = true;
            poly.push(cur);
            cur = next[&cur];
        }
        tris.extend(fan(&poly));
    }
    tris
}

fn on_face(e: usize, face: usize) -> bool {
    FACES[face].0.contains(&EDGES[e][0]) && FACES[face].0.contains(&EDGES[e][1])
}

/// Fan triangulation of a loop. The apex is chosen so that no triangle lies
/// flat in a cube face, where the neighbouring cell could emit it too, and
/// then to maximize the smallest triangle area.
fn fan(poly: &[usize]) -> Vec<[usize; 3]> {
    let n = poly.len();
    let mut best: Option<(usize, f64, usize)> = None;
    for apex in 0..n {
        let mut min_area = f64::INFINITY;
        let mut flat = 0;
        for k in 1..n - 1 {
            let (a, b, c) = (poly[apex], poly[(apex + k) % n], poly[(apex + k + 1) % n]);
            let area = (edge_mid(b) - edge_mid(a)).cross(edge_mid(c) - edge_mid(a)).norm();
            min_area = min_area.min(area);
            if (0..6).any(|f| on_face(a, f) && on_face(b, f) && on_face(c, f)) {
                flat += 1;
            }
        }
        if best.is_none_or(|(bf, m, _)| flat < bf || (flat == bf && min_area > m + 1e-12)) {
            best = Some((flat, min_area, apex));
        }
    }
    let (flat, _, apex) = best.expect("loop has vertices");
    debug_assert!(n == 3 || flat == 0, "no flat-free fan");
    (1..n - 1)
        .map(|k| [poly[apex], poly[(apex + k) % n], poly[(apex + k + 1) % n]])
        .collect()
}

/// The 256-case table, oriented so triangle normals point away from inside corners.
fn case_table() -> &'static [Vec<[usize; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table: Vec<Vec<[usize; 3]>> = (0..256).map(build_case).collect();
        let t = table[1][0];
        let nrm = (edge_mid(t[1]) - edge_mid(t[0])).cross(edge_mid(t[2]) - edge_mid(t[0]));
        if nrm.dot(Vec3::new(1.0, 1.0, 1.0)) < 0.0 {
            for tris in table.iter_mut() {
                for t in tris.iter_mut() {
                    t.swap(1, 2);
                }
            }
        }
        table
    })
}

/// Isosurface of a scalar field sampled on a regular lattice of points
/// `origin + h·(i, j, k)`. The inside is where `value > iso`; samples beyond
/// the lattice count as outside, so the output is closed.
pub fn extract_isosurface(
    dims: [usize; 3],
    origin: Vec3f,
    h: Vec3f,
    value: impl Fn(usize, usize, usize) -> f64,
    iso: f64,
) -> Result<TriMesh, TopologyError> {
    let table = case_table();
    let [nx, ny, nz] = dims;
    let sample = |i: i64, j: i64, k: i64| -> f64 {
        if i < 0 || j < 0 || k < 0 || i >= nx as i64 || j >= ny as i64 || k >= nz as i64 {
            f64::NEG_INFINITY
        } else {
            value(i as usize, j as usize, k as usize)
        }
    };
    let pos = |i: i64, j: i64, k: i64| origin + Vec3::new(i as f64 * h.x, j as f64 * h.y, k as f64 * h.z);
    let mut verts: Vec<Vec3f> = Vec::new();
    let mut ids: HashMap<(i64, i64, i64, usize), u32> = HashMap::new();
    let mut faces = Vec::new();
    for k in -1..nz as i64 {
        for j in -1..ny as i64 {
            for i in -1..nx as i64 {
                let vals: Vec<f64> = CORNERS
                    .iter()
                    .map(|c| sample(i + c[0] as i64, j + c[1] as i64, k + c[2] as i64))
                    .collect();
                let mut case = 0;
                for (c, v) in vals.iter().enumerate() {
                    if *v > iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let mut vid = [u32::MAX; 12];
                for tri in &table[case] {
                    let mut f = [0u32; 3];
                    for (slot, &e) in f.iter_mut().zip(tri) {
                        if vid[e] == u32::MAX {
                            let [a, b] = EDGES[e];
                            let (ca, cb) = (CORNERS[a], CORNERS[b]);
                            let ga = (i + ca[0] as i64, j + ca[1] as i64, k + ca[2] as i64);
                            let axis = (0..3).find(|&d| ca[d] != cb[d]).unwrap();
                            let key = (ga.0, ga.1, ga.2, axis);
                            vid[e] = *ids.entry(key).or_insert_with(|| {
                                let gb = (i + cb[0] as i64, j + cb[1] as i64, k + cb[2] as i64);
                                let (va, vb) = (vals[a], vals[b]);
                                let t = if va.is_finite() && vb.is_finite() && va != vb {
                                    ((iso - va) / (vb - va)).clamp(0.0, 1.0)
                                } else {
                                    0.5
                                };
                                let (pa, pb) = (pos(ga.0, ga.1, ga.2), pos(gb.0, gb.1, gb.2));
                                verts.push(pa + (pb - pa).scale(t));
                                (verts.len() - 1) as u32
                            });
                        }
                        *slot = vid[e];
                    }
                    faces.push(f);
                }
            }
        }
    }
    if faces.is_empty() {
        return Err(TopologyError::EmptyShape("isosurface has no faces"));
    }
    Ok(TriMesh::new_cleaned(verts, faces)?)
}

/// Marching cubes on the binary occupancy, vertices at edge midpoints.
pub fn marching_cubes(grid: &VoxelGrid) -> Result<TriMesh, TopologyError> {
    if grid.count() == 0 {
        return Err(TopologyError::EmptyShape("no occupied voxels"));
    }
    let h = grid.voxel_size();
    let origin = grid.min + h.scale(0.5);
    extract_isosurface(grid.dims, origin, h, |i, j, k| if grid.get(i, j, k) { 1.0 } else { 0.0 }, 0.5)
}

/// Occupied components smaller than this fraction of the largest are dropped
/// before remeshing.
pub const MIN_ISLAND_FRACTION: f64 = 0.02;

/// Labels 6-connected voxels whose occupancy equals `value`. Returns the label
/// of every voxel (`usize::MAX` for the other value) and the component sizes.
fn label_components(grid: &VoxelGrid, value: bool) -> (Vec<usize>, Vec<usize>) {
    let [nx, ny, nz] = grid.dims;
    let mut label = vec![usize::MAX; grid.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..grid.len() {
        if grid.occ[start] != value || label[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        label[start] = id;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            size += 1;
            let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
            let mut visit = |n: usize| {
                if grid.occ[n] == value && label[n] == usize::MAX {
                    label[n] = id;
                    stack.push(n);
                }
            };
            if i > 0 { visit(idx - 1); }
            if i + 1 < nx { visit(idx + 1); }
            if j > 0 { visit(idx - nx); }
            if j + 1 < ny { visit(idx + nx); }
            if k > 0 { visit(idx - nx * ny); }
            if k + 1 < nz { visit(idx + nx * ny); }
        }
        sizes.push(size);
    }
    (label, sizes)
}

/// Fills empty cavities not connected to the grid boundary and removes occupied
/// islands smaller than `min_fraction` of the largest one.
pub fn clean_occupancy(grid: &VoxelGrid, min_fraction: f64) -> VoxelGrid {
    let [nx, ny, nz] = grid.dims;
    let mut out = grid.clone();
    let (empty_label, empty_sizes) = label_components(grid, false);
    let mut outside = vec![false; empty_sizes.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz {
                    let l = empty_label[grid.index(i, j, k)];
                    if l != usize::MAX {
                        outside[l] = true;
                    }
                }
            }
        }
    }
    for (o, &l) in out.occ.iter_mut().zip(&empty_label) {
        if l != usize::MAX && !outside[l] {
            *o = true;
        }
    }
    let (label, sizes) = label_components(&out, true);
    let largest = sizes.iter().copied().max().unwrap_or(0);
    let keep: Vec<bool> = sizes.iter().map(|&s| s as f64 >= min_fraction * largest as f64).collect();
    for (o, &l) in out.occ.iter_mut().zip(&label) {
        if l != usize::MAX && !keep[l] {
            *o = false;
        }
    }
    out
}

/// Voxelizes the mesh, carves it by every mask and re-extracts a surface.
/// The result has zero offsets.
pub fn remesh(mesh: &TriMesh, masks: &[GrayImage], cams: &[Camera], resolution: usize) -> Result<TriMesh, TopologyError> {
    if mesh.is_empty() {
        return Err(TopologyError::EmptyShape("input mesh is empty"));
    }
    let vox = voxelize_solid(mesh, resolution);
    let carved = carve(&vox.grid, masks, cams)?;
    marching_cubes(&clean_occupancy(&carved, MIN_ISLAND_FRACTION))
}
