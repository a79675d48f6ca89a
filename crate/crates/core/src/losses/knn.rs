use std::collections::HashMap;

use crate::geometry::Vec3;

/// Uniform hash grid for k-nearest-neighbour queries over a fixed point set.
///
/// Results are sorted by `(distance, index)`, so ties resolve the same way on
/// every run regardless of hash layout.
#[derive(Debug, Clone)]
pub struct SpatialHash {
    cell: f64,
    points: Vec<Vec3>,
    cells: HashMap<[i64; 3], Vec<u32>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl SpatialHash {
    pub fn new(points: &[Vec3], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "cell size must be positive");
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, &p) in points.iter().enumerate() {
            let key = Self::key_of(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(key[a]);
                hi[a] = hi[a].max(key[a]);
            }
            cells.entry(key).or_default().push(i as u32);
        }
        Self {
            cell,
            points: points.to_vec(),
            cells,
            lo,
            hi,
        }
    }

    /// Cell size chosen so an average cell of the bounding box holds about `k` points.
    pub fn auto(points: &[Vec3], k: usize) -> Self {
        Self::new(points, auto_cell_size(points, k))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    fn key_of(p: Vec3, cell: f64) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    /// The `k` nearest stored points to `q`, skipping index `exclude`.
    /// Returns `(index, squared distance)` pairs, nearest first.
    pub fn knn(&self, q: Vec3, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let c = Self::key_of(q, self.cell);
        let max_ring = (0..3)
            .map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs()))
            .max()
            .unwrap_or(0);
        let mut ring = 0i64;
        loop {
            self.visit_ring(c, ring, |idx| {
                if Some(idx) == exclude {
                    return;
                }
                let d2 = (self.points[idx] - q).norm_squared();
                let entry = (d2, idx);
                if best.len() == k && cmp(&entry, best.last().expect("full")).is_ge() {
                    return;
                }
                let pos = best.partition_point(|e| cmp(e, &entry).is_lt());
                best.insert(pos, entry);
                best.truncate(k);
            });
            if best.len() == k {
                let reach = ring as f64 * self.cell;
                if best[k - 1].0 < reach * reach {
                    break;
                }
            }
            if ring >= max_ring {
                break;
            }
            ring += 1;
        }
        best.into_iter().map(|(d2, i)| (i, d2)).collect()
    }

    fn visit_ring(&self, c: [i64; 3], r: i64, mut f: impl FnMut(usize)) {
        for dx in -r..=r {
            for dy in -r..=r {
                let edge = dx.abs() == r || dy.abs() == r;
                let dzs: Vec<i64> = if edge { (-r..=r).collect() } else if r == 0 { vec![0] } else { vec![-r, r] };
                for dz in dzs {
                    if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        for &i in ids {
                            f(i as usize);
                        }
                    }
                }
            }
        }
    }
}

fn cmp(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

pub fn auto_cell_size(points: &[Vec3], k: usize) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    let ext = hi - lo;
    let mut sides = [ext.x, ext.y, ext.z];
    sides.sort_by(|a, b| b.total_cmp(a));
    let per_cell = k.max(1) as f64 / points.len() as f64;
    // Take the largest of the line, plane and volume estimates so that flat or
    // linear clouds do not end up with near-empty cells.
    let line = sides[0] * per_cell;
    let plane = (sides[0] * sides[1] * per_cell).sqrt();
    let volume = (sides[0] * sides[1] * sides[2] * per_cell).cbrt();
    line.max(plane).max(volume).max(1e-9)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(points: &[Vec3], q: Vec3, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(i, p)| ((*p - q).norm_squared(), i))
            .collect();
        all.sort_by(cmp);
        all.truncate(k);
        all.into_iter().map(|(d, i)| (i, d)).collect()
    }

    #[test]
    fn lattice_neighbours() {
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                for k in 0..5 {
                    pts.push(Vec3::new(i as f64, j as f64, k as f64) * 0.1);
                }
            }
        }
        let grid = SpatialHash::new(&pts, 0.1);
        let centre = 2 * 25 + 2 * 5 + 2;
        let nn = grid.knn(pts[centre], 26, Some(centre));
        assert_eq!(nn.len(), 26);
        // Full 3x3x3 stencil: 6 faces, 12 edges, 8 corners.
        let faces = nn.iter().filter(|(_, d)| (d - 0.01).abs() < 1e-12).count();
        let corners = nn.iter().filter(|(_, d)| (d - 0.03).abs() < 1e-12).count();
        assert_eq!(faces, 6);
        assert_eq!(corners, 8);
    }

    #[test]
    fn fewer_points_than_k() {
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        let grid = SpatialHash::auto(&pts, 26);
        assert_eq!(grid.knn(pts[0], 26, Some(0)), vec![(1, 1.0)]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            raw in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -0.2f64..0.2), 2..300),
            k in 1usize..30,
            q in 0usize..300,
        ) {
            let pts: Vec<Vec3> = raw.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
            let q = q % pts.len();
            let grid = SpatialHash::auto(&pts, k);
            prop_assert_eq!(grid.knn(pts[q], k, Some(q)), brute(&pts, pts[q], k, Some(q)));
            let off = pts[q] + Vec3::new(0.013, -0.007, 0.002);
            prop_assert_eq!(grid.knn(off, k, None), brute(&pts, off, k, None));
        }
    }
}
