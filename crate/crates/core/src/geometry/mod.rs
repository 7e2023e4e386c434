//! Point clouds, occupancy grids and masks.
//!
//! Grids are indexed `(i, j, k)` along `(x, y, z)` and stored x-major:
//! `index = (i * n + j) * n + k`. Cell `i` covers the half-open interval
//! `[i / n, (i + 1) / n)`; coordinate `1.0` falls into the last cell.

pub mod io;

use serde::{Deserialize, Serialize};

pub type Point = [f64; 3];

/// Lower bound of the normalized box; the upper bound is `1 - NORMALIZE_MARGIN`.
pub const NORMALIZE_MARGIN: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point cloud has zero extent on every axis")]
    Degenerate,
    #[error("{labels} labels for {points} points")]
    LabelCount { points: usize, labels: usize },
    #[error("grid resolution must be at least 2, got {0}")]
    ResolutionTooSmall(usize),
    #[error("latent resolution {latent} does not divide grid resolution {grid}")]
    NotDivisible { grid: usize, latent: usize },
    #[error("resolution mismatch: expected {expected}, got {actual}")]
    ResolutionMismatch { expected: usize, actual: usize },
    #[error("threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("no voxel reaches threshold {0}")]
    EmptyGrid(f64),
    #[error("grid values must lie in [0, 1]")]
    OutOfRange,
    #[error("{0} non-finite coordinate(s)")]
    NonFinite(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self, GeometryError> {
        Self::build(points, None)
    }

    pub fn with_labels(points: Vec<Point>, labels: Vec<u32>) -> Result<Self, GeometryError> {
        Self::build(points, Some(labels))
    }

    fn build(points: Vec<Point>, labels: Option<Vec<u32>>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        let bad = points.iter().filter(|p| p.iter().any(|c| !c.is_finite())).count();
        if bad > 0 {
            return Err(GeometryError::NonFinite(bad));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(GeometryError::LabelCount {
                    points: points.len(),
                    labels: l.len(),
                });
            }
        }
        Ok(Self { points, labels })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points whose index satisfies `keep`; `None` if nothing is left.
    pub fn filter_indices(&self, mut keep: impl FnMut(usize) -> bool) -> Option<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        if idx.is_empty() {
            return None;
        }
        Some(Self {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        })
    }

    /// Component-wise `(min, max)`.
    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    pub fn map_points(&self, f: impl Fn(&Point) -> Point) -> Self {
        Self {
            points: self.points.iter().map(f).collect(),
            labels: self.labels.clone(),
        }
    }

    /// Same points stored at `f32` precision, which is what the file formats keep.
    pub fn quantized_f32(&self) -> Self {
        self.map_points(|p| p.map(|c| c as f32 as f64))
    }
}

/// Affine map `p' = (p - center) * scale + 0.5` produced by [`normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizeTransform {
    pub center: Point,
    pub scale: f64,
}

impl NormalizeTransform {
    pub const IDENTITY: Self = Self {
        center: [0.5; 3],
        scale: 1.0,
    };

    pub fn apply(&self, p: &Point) -> Point {
        std::array::from_fn(|a| (p[a] - self.center[a]) * self.scale + 0.5)
    }

    pub fn invert(&self, p: &Point) -> Point {
        std::array::from_fn(|a| (p[a] - 0.5) / self.scale + self.center[a])
    }
}

/// Fits the cloud into `[0.05, 0.95]^3`, centered, preserving aspect ratio.
pub fn normalize(pc: &PointCloud) -> Result<(PointCloud, NormalizeTransform), GeometryError> {
    let (lo, hi) = pc.bounds();
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if extent <= 0.0 {
        return Err(GeometryError::Degenerate);
    }
    let t = NormalizeTransform {
        center: std::array::from_fn(|a| 0.5 * (lo[a] + hi[a])),
        scale: (1.0 - 2.0 * NORMALIZE_MARGIN) / extent,
    };
    Ok((pc.map_points(|p| t.apply(p)), t))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    res: usize,
    values: Vec<f64>,
}

impl OccupancyGrid {
    pub fn empty(res: usize) -> Self {
        Self {
            res,
            values: vec![0.0; res * res * res],
        }
    }

    pub fn from_values(res: usize, values: Vec<f64>) -> Result<Self, GeometryError> {
        if values.len() != res * res * res {
            return Err(GeometryError::ResolutionMismatch {
                expected: res * res * res,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(GeometryError::OutOfRange);
        }
        Ok(Self { res, values })
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.res + j) * self.res + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.index(i, j, k);
        self.values[idx] = v.clamp(0.0, 1.0);
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn count_at_least(&self, threshold: f64) -> usize {
        self.values.iter().filter(|&&v| v >= threshold).count()
    }

    /// `1` where the value reaches `threshold`, else `0`.
    pub fn binarize(&self, threshold: f64) -> Self {
        Self {
            res: self.res,
            values: self.values.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// `observed` inside the mask, `self` outside it.
    pub fn replace_masked(&self, observed: &OccupancyGrid, mask: &SpatialMask) -> Result<Self, GeometryError> {
        for r in [observed.res, mask.res] {
            if r != self.res {
                return Err(GeometryError::ResolutionMismatch {
                    expected: self.res,
                    actual: r,
                });
            }
        }
        let values = self
            .values
            .iter()
            .zip(&observed.values)
            .zip(&mask.bits)
            .map(|((&s, &o), &m)| if m { o } else { s })
            .collect();
        Ok(Self { res: self.res, values })
    }

    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Point {
        let n = self.res as f64;
        [(i as f64 + 0.5) / n, (j as f64 + 0.5) / n, (k as f64 + 0.5) / n]
    }

    /// Voxel IoU after thresholding both grids at `threshold`.
    pub fn iou(&self, other: &OccupancyGrid, threshold: f64) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.values.iter().zip(&other.values) {
            let (a, b) = (a >= threshold, b >= threshold);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Cell index of coordinate `c` on an `n` grid; out-of-range values clamp.
pub fn cell_of(c: f64, n: usize) -> usize {
    let i = (c * n as f64).floor();
    if i < 0.0 {
        0
    } else {
        (i as usize).min(n - 1)
    }
}

/// Marks every cell that contains at least one point.
pub fn voxelize(pc: &PointCloud, res: usize) -> Result<OccupancyGrid, GeometryError> {
    if res < 2 {
        return Err(GeometryError::ResolutionTooSmall(res));
    }
    let mut g = OccupancyGrid::empty(res);
    for p in pc.points() {
        let (i, j, k) = (cell_of(p[0], res), cell_of(p[1], res), cell_of(p[2], res));
        g.set(i, j, k, 1.0);
    }
    Ok(g)
}

/// One point at the center of each voxel whose value reaches `threshold`.
pub fn occupancy_to_points(grid: &OccupancyGrid, threshold: f64) -> Result<PointCloud, GeometryError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(GeometryError::BadThreshold(threshold));
    }
    let n = grid.res;
    let mut pts = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if grid.get(i, j, k) >= threshold {
                    pts.push(grid.cell_center(i, j, k));
                }
            }
        }
    }
    if pts.is_empty() {
        return Err(GeometryError::EmptyGrid(threshold));
    }
    PointCloud::new(pts)
}

/// Binary mask over the grid of observed voxels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialMask {
    res: usize,
    bits: Vec<bool>,
}

/// Binary mask over latent cells; a cell is set iff its block holds any
/// observed voxel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentMask {
    res: usize,
    bits: Vec<bool>,
}

macro_rules! mask_common {
    ($t:ty) => {
        impl $t {
            pub fn from_bits(res: usize, bits: Vec<bool>) -> Result<Self, GeometryError> {
                if bits.len() != res * res * res {
                    return Err(GeometryError::ResolutionMismatch {
                        expected: res * res * res,
                        actual: bits.len(),
                    });
                }
                Ok(Self { res, bits })
            }

            pub fn filled(res: usize, value: bool) -> Self {
                Self {
                    res,
                    bits: vec![value; res * res * res],
                }
            }

            pub fn resolution(&self) -> usize {
                self.res
            }

            pub fn bits(&self) -> &[bool] {
                &self.bits
            }

            pub fn count(&self) -> usize {
                self.bits.iter().filter(|&&b| b).count()
            }

            pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
                self.bits[(i * self.res + j) * self.res + k]
            }

            pub fn union(&self, other: &Self) -> Result<Self, GeometryError> {
                if other.res != self.res {
                    return Err(GeometryError::ResolutionMismatch {
                        expected: self.res,
                        actual: other.res,
                    });
                }
                Ok(Self {
                    res: self.res,
                    bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
                })
            }
        }
    };
}

mask_common!(SpatialMask);
mask_common!(LatentMask);

impl LatentMask {
    /// Mask value per latent cell, repeated across `channels` (channels-last).
    pub fn broadcast(&self, channels: usize) -> Vec<f64> {
        self.bits
            .iter()
            .flat_map(|&b| std::iter::repeat_n(if b { 1.0 } else { 0.0 }, channels))
            .collect()
    }
}

/// Observed-voxel mask of a binary grid. Any nonzero value counts as observed.
pub fn mask_from_partial(grid: &OccupancyGrid) -> SpatialMask {
    SpatialMask {
        res: grid.res,
        bits: grid.values.iter().map(|&v| v > 0.0).collect(),
    }
}

/// Max-pools the mask over `(N / n)^3` blocks.
pub fn downsample_mask(mask: &SpatialMask, latent_res: usize) -> Result<LatentMask, GeometryError> {
    let n = mask.res;
    if latent_res == 0 || n % latent_res != 0 {
        return Err(GeometryError::NotDivisible {
            grid: n,
            latent: latent_res,
        });
    }
    let f = n / latent_res;
    let mut bits = vec![false; latent_res * latent_res * latent_res];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if mask.get(i, j, k) {
                    bits[((i / f) * latent_res + j / f) * latent_res + k / f] = true;
                }
            }
        }
    }
    Ok(LatentMask { res: latent_res, bits })
}

impl SpatialMask {
    pub fn as_grid(&self) -> OccupancyGrid {
        OccupancyGrid {
            res: self.res,
            values: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}
