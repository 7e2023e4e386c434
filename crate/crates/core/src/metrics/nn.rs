//! Exact nearest-neighbor queries over a uniform bucket grid.

use crate::geometry::Point;

pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

pub struct NnIndex<'a> {
    points: &'a [Point],
    origin: Point,
    cell: [f64; 3],
    dims: [usize; 3],
    /// Bucket start offsets into `order` (length `cells + 1`).
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> NnIndex<'a> {
    /// Builds an index over `points` whose grid spans `lo..hi`, which should
    /// cover the points and the queries.
    pub fn new(points: &'a [Point], lo: Point, hi: Point) -> Self {
        assert!(!points.is_empty());
        let per_axis = ((points.len() as f64 / 2.0).cbrt().ceil() as usize).clamp(1, 64);
        let mut dims = [1; 3];
        let mut cell = [1.0; 3];
        for a in 0..3 {
            let ext = hi[a] - lo[a];
            if ext > 1e-12 {
                dims[a] = per_axis;
                cell[a] = ext / per_axis as f64;
            }
        }
        let mut idx = Self {
            points,
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let ncells = dims[0] * dims[1] * dims[2];
        let bucket: Vec<usize> = points.iter().map(|p| idx.flat(idx.cell_of(p))).collect();
        let mut counts = vec![0usize; ncells + 1];
        for &b in &bucket {
            counts[b + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &b) in bucket.iter().enumerate() {
            order[fill[b]] = i;
            fill[b] += 1;
        }
        idx.starts = counts;
        idx.order = order;
        idx
    }

    fn cell_of(&self, p: &Point) -> [usize; 3] {
        std::array::from_fn(|a| {
            let c = ((p[a] - self.origin[a]) / self.cell[a]).floor();
            if c < 0.0 {
                0
            } else {
                (c as usize).min(self.dims[a] - 1)
            }
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    /// Squared distance from `q` to its nearest indexed point.
    pub fn nearest_dist2(&self, q: &Point) -> f64 {
        let c = self.cell_of(q);
        let min_cell = (0..3)
            .filter(|&a| self.dims[a] > 1)
            .map(|a| self.cell[a])
            .fold(f64::INFINITY, f64::min);
        let max_r = self.dims.iter().max().copied().unwrap_or(1);
        let mut best = f64::INFINITY;
        for r in 0..=max_r {
            let lo: [usize; 3] = std::array::from_fn(|a| c[a].saturating_sub(r));
            let hi: [usize; 3] = std::array::from_fn(|a| (c[a] + r).min(self.dims[a] - 1));
            for i in lo[0]..=hi[0] {
                for j in lo[1]..=hi[1] {
                    for k in lo[2]..=hi[2] {
                        let shell = i.abs_diff(c[0]).max(j.abs_diff(c[1])).max(k.abs_diff(c[2]));
                        if shell != r {
                            continue;
                        }
                        let b = self.flat([i, j, k]);
                        for &pi in &self.order[self.starts[b]..self.starts[b + 1]] {
                            best = best.min(dist2(q, &self.points[pi]));
                        }
                    }
                }
            }
            // Unvisited cells lie at least r cell widths away.
            let reach = r as f64 * min_cell;
            if best.is_finite() && best <= reach * reach {
                break;
            }
        }
        best
    }
}
