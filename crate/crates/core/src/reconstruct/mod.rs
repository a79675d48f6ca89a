//! Dense grid evaluation, marching-cubes extraction, mesh metrics and OBJ I/O.

mod tables;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Occupancy;
use crate::geometry::{point_in_frustum_intersection, Frustum, ProjectionConstraint, Vec3};
use crate::imageio::BinaryImage;

use tables::{EDGE_TABLE, TRI_TABLE};

pub const DEFAULT_RESOLUTION: usize = 200;
pub const MIN_RESOLUTION: usize = 8;
/// Triangles with less area than this are dropped.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;
/// Edge crossings are kept this far (as a fraction of the edge) from either node.
const EDGE_CLAMP: f64 = 1e-3;

/// Node values on a cubic lattice over `[lo, hi]^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub resolution: usize,
    pub lo: f64,
    pub hi: f64,
    /// Node `(i, j, k)` at `i + n (j + n k)`.
    pub values: Vec<f64>,
    /// False for nodes outside the frustum intersection; their values are 0.
    pub mask: Vec<bool>,
}

impl ScalarGrid {
    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.resolution - 1) as f64
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution * (j + self.resolution * k)
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.spacing();
        Vec3::new(self.lo + i as f64 * h, self.lo + j as f64 * h, self.lo + k as f64 * h)
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    /// Nodes strictly above `tau`.
    pub fn count_above(&self, tau: f64) -> usize {
        self.values.iter().filter(|&&v| v > tau).count()
    }
}

/// Occupancy at every node of an `n^3` grid over `[-0.5, 0.5]^3`, zeroed outside the
/// intersection of `frusta` (no masking when `frusta` is empty).
pub fn evaluate_grid<F: Occupancy + ?Sized>(field: &F, resolution: usize, frusta: &[Frustum]) -> Result<ScalarGrid> {
    evaluate_grid_in(field, resolution, -0.5, 0.5, frusta)
}

pub fn evaluate_grid_in<F: Occupancy + ?Sized>(
    field: &F,
    resolution: usize,
    lo: f64,
    hi: f64,
    frusta: &[Frustum],
) -> Result<ScalarGrid> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::InvalidConfig(format!(
            "grid resolution {resolution} is below the minimum of {MIN_RESOLUTION}"
        )));
    }
    if !(hi > lo) {
        return Err(Error::InvalidConfig("grid bounds must satisfy lo < hi".into()));
    }
    let n = resolution;
    let mut grid = ScalarGrid {
        resolution: n,
        lo,
        hi,
        values: vec![0.0; n * n * n],
        mask: vec![false; n * n * n],
    };
    let slab = n * n;
    for k in 0..n {
        let nodes: Vec<Vec3> = (0..slab).map(|q| grid.node(q % n, q / n, k)).collect();
        let inside: Vec<bool> = nodes
            .par_iter()
            .map(|&p| point_in_frustum_intersection(p, frusta))
            .collect();
        let kept: Vec<Vec3> = nodes.iter().zip(&inside).filter(|(_, &m)| m).map(|(&p, _)| p).collect();
        let mut values = field.occupancy_at(&kept).into_iter();
        let base = k * slab;
        for (q, &m) in inside.iter().enumerate() {
            grid.mask[base + q] = m;
            if m {
                grid.values[base + q] = values.next().expect("one value per kept node");
            }
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractedMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

/// Corner offsets, Bourke numbering.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Each cube edge as (lower corner, axis).
const EDGES: [(usize, usize); 12] = [
    (0, 0),
    (1, 1),
    (3, 0),
    (0, 1),
    (4, 0),
    (5, 1),
    (7, 0),
    (4, 1),
    (0, 2),
    (1, 2),
    (2, 2),
    (3, 2),
];

/// Node value in the grid padded by one layer of zeros on every side.
fn padded_value(grid: &ScalarGrid, i: usize, j: usize, k: usize) -> f64 {
    let n = grid.resolution;
    if i == 0 || j == 0 || k == 0 || i > n || j > n || k > n {
        0.0
    } else {
        grid.value(i - 1, j - 1, k - 1)
    }
}

/// Unique key of a lattice edge: padded lower node and axis.
type EdgeKey = (u32, u32, u32, u8);

/// The `tau` level set of `grid` as a closed, outward-oriented triangle mesh.
///
/// The grid is padded with zeros, so geometry touching the grid boundary is capped
/// there exactly as masked nodes cap it at the frustum boundary.
pub fn marching_cubes(grid: &ScalarGrid, tau: f64) -> ExtractedMesh {
    let n = grid.resolution;
    let cells = n + 1;
    let per_slab: Vec<Vec<[EdgeKey; 3]>> = (0..cells)
        .into_par_iter()
        .map(|k| {
            let mut tris = Vec::new();
            for j in 0..cells {
                for i in 0..cells {
                    let mut case = 0usize;
                    for (c, off) in CORNERS.iter().enumerate() {
                        if padded_value(grid, i + off[0], j + off[1], k + off[2]) > tau {
                            case |= 1 << c;
                        }
                    }
                    if EDGE_TABLE[case] == 0 {
                        continue;
                    }
                    let key = |e: i8| -> EdgeKey {
                        let (corner, axis) = EDGES[e as usize];
                        let off = CORNERS[corner];
                        ((i + off[0]) as u32, (j + off[1]) as u32, (k + off[2]) as u32, axis as u8)
                    };
                    for t in TRI_TABLE[case].chunks_exact(3) {
                        if t[0] < 0 {
                            break;
                        }
                        // The table winds triangles inward for an "inside = above" mask.
                        tris.push([key(t[0]), key(t[2]), key(t[1])]);
                    }
                }
            }
            tris
        })
        .collect();

    let h = grid.spacing();
    let origin = grid.lo - h;
    let vertex_of = |(i, j, k, axis): EdgeKey| -> Vec3 {
        let (i, j, k) = (i as usize, j as usize, k as usize);
        let mut b = [i, j, k];
        b[axis as usize] += 1;
        let va = padded_value(grid, i, j, k);
        let vb = padded_value(grid, b[0], b[1], b[2]);
        let t = ((tau - va) / (vb - va)).clamp(EDGE_CLAMP, 1.0 - EDGE_CLAMP);
        let mut p = [i as f64, j as f64, k as f64];
        p[axis as usize] += t;
        Vec3::new(origin + p[0] * h, origin + p[1] * h, origin + p[2] * h)
    };

    let mut mesh = ExtractedMesh::default();
    let mut welded: HashMap<EdgeKey, u32> = HashMap::new();
    for tris in per_slab {
        for tri in tris {
            let mut idx = [0u32; 3];
            for (slot, key) in idx.iter_mut().zip(tri) {
                *slot = *welded.entry(key).or_insert_with(|| {
                    mesh.vertices.push(vertex_of(key));
                    (mesh.vertices.len() - 1) as u32
                });
            }
            if idx[0] == idx[1] || idx[1] == idx[2] || idx[0] == idx[2] {
                continue;
            }
            if mesh.triangle_area(idx) <= MIN_TRIANGLE_AREA {
                continue;
            }
            mesh.triangles.push(idx);
        }
    }
    mesh
}

/// Area, volume and topology summary of a mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshMetrics {
    pub vertices: usize,
    pub triangles: usize,
    pub area: f64,
    pub volume: f64,
    /// Measured after scaling the bounding-box diagonal to 1.
    pub normalized_area: f64,
    pub normalized_volume: f64,
    /// Edges not shared by exactly two triangles.
    pub open_edges: usize,
    pub components: usize,
    /// False when open edges make the enclosed volume ill-defined.
    pub volume_reliable: bool,
}

impl ExtractedMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    fn corners(&self, t: [u32; 3]) -> [Vec3; 3] {
        t.map(|i| self.vertices[i as usize])
    }

    pub fn triangle_area(&self, t: [u32; 3]) -> f64 {
        let [a, b, c] = self.corners(t);
        0.5 * (b - a).cross(c - a).norm()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|&t| self.triangle_area(t)).sum()
    }

    /// Sum of signed tetrahedron volumes against the origin; positive when the
    /// mesh is closed and wound outward.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|&t| {
                let [a, b, c] = self.corners(t);
                a.dot(b.cross(c)) / 6.0
            })
            .sum()
    }

    pub fn volume(&self) -> f64 {
        self.signed_volume().abs()
    }

    /// Axis-aligned bounds, or `None` for a mesh without vertices.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), p| {
            (
                Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z)),
                Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z)),
            )
        }))
    }

    pub fn bbox_diagonal(&self) -> f64 {
        self.bounds().map_or(0.0, |(lo, hi)| (hi - lo).norm())
    }

    /// Copy uniformly scaled about the origin so the bounding-box diagonal is 1.
    pub fn normalized(&self) -> ExtractedMesh {
        let d = self.bbox_diagonal();
        let s = if d > 0.0 { 1.0 / d } else { 1.0 };
        ExtractedMesh {
            vertices: self.vertices.iter().map(|&p| p * s).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Number of edges used by a number of triangles other than two.
    pub fn open_edges(&self) -> usize {
        let mut uses: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *uses.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        uses.values().filter(|&&c| c != 2).count()
    }

    /// Connected components over shared vertices, counting only vertices used by a triangle.
    pub fn components(&self) -> usize {
        let mut parent: Vec<u32> = (0..self.vertices.len() as u32).collect();
        fn find(parent: &mut [u32], mut x: u32) -> u32 {
            while parent[x as usize] != x {
                parent[x as usize] = parent[parent[x as usize] as usize];
                x = parent[x as usize];
            }
            x
        }
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &v in t {
                used[v as usize] = true;
            }
            for e in 1..3 {
                let (a, b) = (find(&mut parent, t[0]), find(&mut parent, t[e]));
                if a != b {
                    parent[a.max(b) as usize] = a.min(b);
                }
            }
        }
        (0..self.vertices.len() as u32)
            .filter(|&v| used[v as usize] && find(&mut parent, v) == v)
            .count()
    }

    pub fn metrics(&self) -> MeshMetrics {
        let open_edges = self.open_edges();
        let unit = self.normalized();
        MeshMetrics {
            vertices: self.vertices.len(),
            triangles: self.triangles.len(),
            area: self.area(),
            volume: self.volume(),
            normalized_area: unit.area(),
            normalized_volume: unit.volume(),
            open_edges,
            components: self.components(),
            volume_reliable: open_edges == 0,
        }
    }

    /// ASCII OBJ text: a header comment, `v` lines, then 1-based `f` lines.
    pub fn to_obj(&self) -> String {
        let mut out = String::with_capacity(32 * (self.vertices.len() + self.triangles.len()) + 64);
        let _ = writeln!(
            out,
            "# umbra mesh: {} vertices, {} triangles",
            self.vertices.len(),
            self.triangles.len()
        );
        for v in &self.vertices {
            let _ = writeln!(out, "v {:?} {:?} {:?}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        out
    }

    pub fn from_obj(text: &str) -> Result<Self> {
        let mut mesh = ExtractedMesh::default();
        let bad = |line: usize, what: &str| Error::Mesh(format!("line {}: {what}", line + 1));
        for (ln, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let xyz: Vec<f64> = parts
                        .take(3)
                        .map(|s| s.parse::<f64>().map_err(|_| bad(ln, "bad vertex coordinate")))
                        .collect::<Result<_>>()?;
                    if xyz.len() != 3 {
                        return Err(bad(ln, "vertex needs three coordinates"));
                    }
                    mesh.vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
                }
                Some("f") => {
                    let idx: Vec<u32> = parts
                        .map(|s| {
                            let first = s.split('/').next().unwrap_or("");
                            match first.parse::<i64>() {
                                Ok(i) if i >= 1 => Ok((i - 1) as u32),
                                _ => Err(bad(ln, "bad face index")),
                            }
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(bad(ln, "face needs at least three vertices"));
                    }
                    // Fan-triangulate polygons.
                    for w in 1..idx.len() - 1 {
                        mesh.triangles.push([idx[0], idx[w], idx[w + 1]]);
                    }
                }
                _ => {}
            }
        }
        let n = mesh.vertices.len() as u32;
        if mesh.triangles.iter().flatten().any(|&i| i >= n) {
            return Err(Error::Mesh("face index out of range".into()));
        }
        Ok(mesh)
    }

    pub fn save_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj())?;
        Ok(())
    }

    pub fn load_obj(path: &Path) -> Result<Self> {
        Self::from_obj(&std::fs::read_to_string(path)?)
    }
}

/// Segment-triangle intersection (Möller-Trumbore) for `start + t (end - start)`, `t` in `[0, 1]`.
fn segment_hits(start: Vec3, dir: Vec3, [a, b, c]: [Vec3; 3]) -> bool {
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(e2);
    let det = e1.dot(p);
    if det.abs() < 1e-14 {
        return false;
    }
    let inv = 1.0 / det;
    let s = start - a;
    let u = s.dot(p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return false;
    }
    let q = s.cross(e1);
    let v = dir.dot(q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return false;
    }
    let t = e2.dot(q) * inv;
    (0.0..=1.0).contains(&t)
}

/// Shadow of a mesh on one constraint's screen: a pixel is shadow when the ray
/// through its centre hits any triangle.
pub fn mesh_silhouette(mesh: &ExtractedMesh, constraint: &ProjectionConstraint) -> Result<BinaryImage> {
    let frustum = Frustum::new(constraint)?;
    let (w, h) = (constraint.width, constraint.height);
    let rays: Vec<(Vec3, Vec3)> = (0..w * h)
        .map(|q| constraint.pixel_ray(q % w, q / w).map(|(s, e)| (s, e - s)))
        .collect::<Result<_>>()?;
    // Bucket triangles by the pixels their projection covers, then test only those rays.
    let hits: Vec<Vec<usize>> = mesh
        .triangles
        .par_iter()
        .map(|&t| {
            let tri = mesh.corners(t);
            let px = tri.map(|p| frustum.project_to_pixel(p));
            let x0 = px.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let x1 = px.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let y0 = px.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let y1 = px.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let lo_x = (x0 - 0.5).ceil().max(0.0) as usize;
            let hi_x = ((x1 - 0.5).floor().min(w as f64 - 1.0)).max(-1.0);
            let lo_y = (y0 - 0.5).ceil().max(0.0) as usize;
            let hi_y = ((y1 - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
            let mut out = Vec::new();
            if hi_x < 0.0 || hi_y < 0.0 {
                return out;
            }
            for y in lo_y..=hi_y as usize {
                for x in lo_x..=hi_x as usize {
                    let (s, d) = rays[y * w + x];
                    if segment_hits(s, d, tri) {
                        out.push(y * w + x);
                    }
                }
            }
            out
        })
        .collect();
    let mut mask = vec![false; w * h];
    for q in hits.into_iter().flatten() {
        mask[q] = true;
    }
    BinaryImage::new(w, h, mask)
}
