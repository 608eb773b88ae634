//! Voxel hashing with exact k-nearest-neighbor and closed-ball queries.

use std::collections::HashMap;

use thiserror::Error;

use crate::scene::Point;

pub type CellKey = (i64, i64, i64);

#[derive(Debug, Error, PartialEq)]
pub enum SpatialError {
    #[error("cell size must be positive, got {0}")]
    NonPositiveCellSize(f64),
    #[error("k = {k} needs at least k + 1 points, grid has {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("query index {index} out of range for {n} points")]
    IndexOutOfRange { index: usize, n: usize },
}

/// Voxel cell of a point: floor of each coordinate over the cell size.
pub fn cell_of(p: &Point, cell_size: f64) -> CellKey {
    (
        (p.x / cell_size).floor() as i64,
        (p.y / cell_size).floor() as i64,
        (p.z / cell_size).floor() as i64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NeighborQueryConfig {
    /// KNN size.
    pub k: usize,
    /// Ball radius in meters.
    pub radius: f64,
    /// KNN neighbors farther than this are dropped by the mask-consistency loss.
    pub knn_max_dist: f64,
}

impl Default for NeighborQueryConfig {
    fn default() -> Self {
        Self {
            k: 8,
            radius: 0.5,
            knn_max_dist: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VoxelGrid {
    cell_size: f64,
    points: Vec<Point>,
    cells: HashMap<CellKey, Vec<usize>>,
    point_cells: Vec<CellKey>,
    lo: CellKey,
    hi: CellKey,
}

impl VoxelGrid {
    pub fn build(points: &[Point], cell_size: f64) -> Result<Self, SpatialError> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(SpatialError::NonPositiveCellSize(cell_size));
        }
        let mut cells: HashMap<CellKey, Vec<usize>> = HashMap::new();
        let mut point_cells = Vec::with_capacity(points.len());
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p, cell_size);
            lo = (lo.0.min(c.0), lo.1.min(c.1), lo.2.min(c.2));
            hi = (hi.0.max(c.0), hi.1.max(c.1), hi.2.max(c.2));
            cells.entry(c).or_default().push(i);
            point_cells.push(c);
        }
        Ok(Self {
            cell_size,
            points: points.to_vec(),
            cells,
            point_cells,
            lo,
            hi,
        })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cell_of_point(&self, index: usize) -> CellKey {
        self.point_cells[index]
    }

    /// Point indices in a cell, ascending.
    pub fn cell(&self, key: &CellKey) -> &[usize] {
        self.cells.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_occupied(&self, key: &CellKey) -> bool {
        self.cells.contains_key(key)
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// Occupied cells in ascending key order.
    pub fn sorted_cells(&self) -> Vec<(CellKey, &[usize])> {
        let mut out: Vec<_> = self.cells.iter().map(|(k, v)| (*k, v.as_slice())).collect();
        out.sort_unstable_by_key(|(k, _)| *k);
        out
    }

    /// Chebyshev ring around `c` beyond which no occupied cell exists.
    fn far_ring(&self, c: CellKey) -> i64 {
        [
            (c.0 - self.lo.0).abs(),
            (self.hi.0 - c.0).abs(),
            (c.1 - self.lo.1).abs(),
            (self.hi.1 - c.1).abs(),
            (c.2 - self.lo.2).abs(),
            (self.hi.2 - c.2).abs(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
    }

    fn visit_ring(&self, c: CellKey, ring: i64, mut f: impl FnMut(usize)) {
        let mut visit = |key: CellKey| {
            if let Some(ids) = self.cells.get(&key) {
                ids.iter().for_each(|&j| f(j));
            }
        };
        if ring == 0 {
            visit(c);
            return;
        }
        // clip the shell to the occupied bounding box
        let (x0, x1) = ((c.0 - ring).max(self.lo.0), (c.0 + ring).min(self.hi.0));
        let (y0, y1) = ((c.1 - ring).max(self.lo.1), (c.1 + ring).min(self.hi.1));
        for x in x0..=x1 {
            for y in y0..=y1 {
                if (x - c.0).abs() == ring || (y - c.1).abs() == ring {
                    for z in (c.2 - ring).max(self.lo.2)..=(c.2 + ring).min(self.hi.2) {
                        visit((x, y, z));
                    }
                } else {
                    for z in [c.2 - ring, c.2 + ring] {
                        if z >= self.lo.2 && z <= self.hi.2 {
                            visit((x, y, z));
                        }
                    }
                }
            }
        }
    }

    /// The `k` nearest points to an arbitrary position, as `(index, squared distance)`
    /// sorted by distance then index. `exclude` removes one index from consideration.
    pub fn k_nearest_to(&self, q: &Point, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let c = cell_of(q, self.cell_size);
        let far = self.far_ring(c);
        let mut best: Vec<(usize, f64)> = Vec::new();
        let mut ring = 0i64;
        loop {
            self.visit_ring(c, ring, |j| {
                if Some(j) != exclude {
                    best.push((j, (self.points[j] - q).norm_squared()));
                }
            });
            best.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            best.truncate(k);
            // rings 0..=ring cover every point within ring * cell of q
            let covered = ring as f64 * self.cell_size;
            if best.len() == k && best[k - 1].1 <= covered * covered {
                break;
            }
            if ring >= far {
                break;
            }
            ring += 1;
            // shells far from the data cost more than a scan
            if ring > 4 && (ring * ring) as usize > self.points.len() {
                return self.k_nearest_scan(q, k, exclude);
            }
        }
        best
    }

    fn k_nearest_scan(&self, q: &Point, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = (0..self.points.len())
            .filter(|&j| Some(j) != exclude)
            .map(|j| (j, (self.points[j] - q).norm_squared()))
            .collect();
        all.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    /// Nearest point to an arbitrary position, ties to the lower index.
    pub fn nearest_to(&self, q: &Point) -> Option<(usize, f64)> {
        self.k_nearest_to(q, 1, None).into_iter().next()
    }

    /// The `k` nearest other points to `query_index`, ties broken by index.
    pub fn knn(&self, query_index: usize, k: usize) -> Result<Vec<usize>, SpatialError> {
        let n = self.points.len();
        if query_index >= n {
            return Err(SpatialError::IndexOutOfRange {
                index: query_index,
                n,
            });
        }
        if k >= n {
            return Err(SpatialError::KTooLarge { k, n });
        }
        Ok(self
            .k_nearest_to(&self.points[query_index], k, Some(query_index))
            .into_iter()
            .map(|(j, _)| j)
            .collect())
    }

    /// Indices within the closed ball of radius `r` around an arbitrary position, ascending.
    pub fn ball_around(&self, q: &Point, r: f64, exclude: Option<usize>) -> Vec<usize> {
        let c = cell_of(q, self.cell_size);
        let rings = (r / self.cell_size).ceil() as i64;
        let r2 = r * r;
        let mut out = Vec::new();
        for ring in 0..=rings.min(self.far_ring(c)) {
            self.visit_ring(c, ring, |j| {
                if Some(j) != exclude && (self.points[j] - q).norm_squared() <= r2 {
                    out.push(j);
                }
            });
        }
        out.sort_unstable();
        out
    }

    /// All other points within distance `r` (closed ball) of `query_index`, ascending.
    pub fn ball_query(&self, query_index: usize, r: f64) -> Result<Vec<usize>, SpatialError> {
        let n = self.points.len();
        if query_index >= n {
            return Err(SpatialError::IndexOutOfRange {
                index: query_index,
                n,
            });
        }
        Ok(self.ball_around(&self.points[query_index], r, Some(query_index)))
    }
}
