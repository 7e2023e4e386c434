//! Procedural shapes and the three partiality patterns (single scan, random crop, semantic part).

mod bench;
mod shapes;

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use bench::{
    build_benchmark, corpus_specs, load_manifest, BenchConfig, Manifest, ManifestObject, ManifestPartial,
    MANIFEST_VERSION,
};
pub use shapes::{gen_shape, surface_samples, Family, ShapeParams, ShapeSpec, MIN_SAMPLES};

use crate::geometry::io::IoError;
use crate::geometry::{GeometryError, Point, PointCloud};
use crate::rng::{derive_seed, rng_from, tag};

/// Depth tolerance, in voxels, behind the first visible voxel of a scan column.
pub const SCAN_DEPTH_TOLERANCE: i64 = 1;
/// Smallest fraction of the ground truth a partial may keep.
pub const MIN_KEPT_FRACTION: f64 = 0.2;
/// Largest fraction of the ground truth a benchmark partial may keep.
pub const MAX_KEPT_FRACTION: f64 = 0.9;
/// Box placements tried by [`random_crop`] before giving up.
pub const CROP_RETRIES: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum PartialityError {
    #[error("invalid shape parameters ({0})")]
    InvalidParams(String),
    #[error("need at least {MIN_SAMPLES} surface samples, got {0}")]
    TooFewSamples(usize),
    #[error("view direction must be a finite nonzero vector")]
    BadView,
    #[error("no point is visible from the requested view")]
    EmptyVisible,
    #[error("crop fraction {0} outside [0.1, 0.6]")]
    BadFraction(f64),
    #[error("no crop kept at least {MIN_KEPT_FRACTION} of the points after {CROP_RETRIES} tries")]
    CropExhausted,
    #[error("point cloud has no part labels")]
    NoLabels,
    #[error("part {0} is not present in the cloud")]
    MissingPart(u32),
    #[error("object {object}: no {pattern} partial within the kept-fraction bounds")]
    PatternExhausted { object: String, pattern: &'static str },
    #[error("invalid manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    SingleScan,
    RandomCrop,
    SemanticPart,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::SingleScan, Pattern::RandomCrop, Pattern::SemanticPart];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::SingleScan => "single_scan",
            Pattern::RandomCrop => "random_crop",
            Pattern::SemanticPart => "semantic_part",
        }
    }
}

/// Axis-aligned crop box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub lo: Point,
    pub hi: Point,
}

impl CropBox {
    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "snake_case")]
pub enum PatternParams {
    SingleScan { view: Point, resolution: usize },
    RandomCrop { fraction: f64, seed: u64, crop: CropBox },
    SemanticPart { requested: u32, kept: u32 },
}

impl PatternParams {
    pub fn pattern(&self) -> Pattern {
        match self {
            PatternParams::SingleScan { .. } => Pattern::SingleScan,
            PatternParams::RandomCrop { .. } => Pattern::RandomCrop,
            PatternParams::SemanticPart { .. } => Pattern::SemanticPart,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialSample {
    pub object_id: String,
    pub params: PatternParams,
    pub partial: PointCloud,
    pub ground_truth: PointCloud,
}

impl PartialSample {
    pub fn kept_fraction(&self) -> f64 {
        self.partial.len() as f64 / self.ground_truth.len() as f64
    }
}

/// Rotation taking unit vector `v` onto `+z`.
fn rotation_to_z(v: Point) -> [[f64; 3]; 3] {
    let [x, y, z] = v;
    if z < -1.0 + 1e-12 {
        return [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
    }
    // Rodrigues form for axis v × z, cos = z.
    let k = 1.0 / (1.0 + z);
    [
        [1.0 - x * x * k, -x * y * k, -x],
        [-x * y * k, 1.0 - y * y * k, -y],
        [x, y, z],
    ]
}

/// Simulated depth capture: the points whose voxels are the first hit, or at
/// most [`SCAN_DEPTH_TOLERANCE`] voxels behind it, along each column of the
/// grid once `view` (the viewing direction) is rotated onto `+z`.
pub fn single_scan(gt: &PointCloud, view: Point, res: usize) -> Result<PointCloud, PartialityError> {
    let len = view.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !(len.is_finite() && len > 0.0) {
        return Err(PartialityError::BadView);
    }
    if res < 2 {
        return Err(GeometryError::ResolutionTooSmall(res).into());
    }
    let r = rotation_to_z(view.map(|c| c / len));
    let n = res as f64;
    let cells: Vec<(i64, i64, i64)> = gt
        .points()
        .iter()
        .map(|p| {
            let d = p.map(|c| c - 0.5);
            let q: [f64; 3] = std::array::from_fn(|row| r[row][0] * d[0] + r[row][1] * d[1] + r[row][2] * d[2] + 0.5);
            let c = q.map(|c| (c * n).floor() as i64);
            (c[0], c[1], c[2])
        })
        .collect();
    let mut first: HashMap<(i64, i64), i64> = HashMap::new();
    for &(i, j, k) in &cells {
        first.entry((i, j)).and_modify(|m| *m = (*m).min(k)).or_insert(k);
    }
    gt.filter_indices(|idx| {
        let (i, j, k) = cells[idx];
        k <= first[&(i, j)] + SCAN_DEPTH_TOLERANCE
    })
    .ok_or(PartialityError::EmptyVisible)
}

/// Removes the points inside a random axis-aligned box holding `fraction` of
/// the bounding-box volume, centered on a random point and shifted to stay
/// inside the bounding box. Also returns the box that was used.
pub fn random_crop(gt: &PointCloud, fraction: f64, seed: u64) -> Result<(PointCloud, CropBox), PartialityError> {
    if !(0.1..=0.6).contains(&fraction) {
        return Err(PartialityError::BadFraction(fraction));
    }
    if gt.is_empty() {
        return Err(GeometryError::EmptyCloud.into());
    }
    let (lo, hi) = gt.bounds();
    let side = fraction.cbrt();
    let mut rng = rng_from(derive_seed(seed, &[tag("random-crop")]));
    for _ in 0..CROP_RETRIES {
        let c = gt.points()[rng.random_range(0..gt.len())];
        let mut crop = CropBox { lo, hi };
        for a in 0..3 {
            let half = 0.5 * side * (hi[a] - lo[a]);
            let center = c[a].clamp(lo[a] + half, hi[a] - half);
            crop.lo[a] = center - half;
            crop.hi[a] = center + half;
        }
        let kept = gt.filter_indices(|i| !crop.contains(&gt.points()[i]));
        if let Some(kept) = kept {
            if kept.len() as f64 >= MIN_KEPT_FRACTION * gt.len() as f64 {
                return Ok((kept, crop));
            }
        }
    }
    Err(PartialityError::CropExhausted)
}

/// Keeps the points labeled `keep`. When that part holds less than
/// [`MIN_KEPT_FRACTION`] of the cloud, the next larger part that does is used
/// instead (the largest part if none does). Also returns the kept part id.
pub fn semantic_part(gt: &PointCloud, keep: u32) -> Result<(PointCloud, u32), PartialityError> {
    let labels = gt.labels().ok_or(PartialityError::NoLabels)?;
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let own = *counts.get(&keep).ok_or(PartialityError::MissingPart(keep))?;
    let min = MIN_KEPT_FRACTION * gt.len() as f64;
    let chosen = if own as f64 >= min {
        keep
    } else {
        let mut larger: Vec<(usize, u32)> = counts.iter().map(|(&l, &c)| (c, l)).filter(|&(c, _)| c > own).collect();
        larger.sort();
        larger
            .iter()
            .find(|&&(c, _)| c as f64 >= min)
            .or(larger.last())
            .map_or(keep, |&(_, l)| l)
    };
    let kept = gt.filter_indices(|i| labels[i] == chosen).ok_or(PartialityError::MissingPart(chosen))?;
    Ok((kept, chosen))
}
