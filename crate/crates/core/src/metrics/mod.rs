//! Completion metrics: CD, EMD, UCD/UHD, MMD and TMD.

mod assignment;
mod nn;

use serde::{Deserialize, Serialize};

pub use assignment::min_cost_assignment;
pub use nn::NnIndex;

use crate::geometry::{Point, PointCloud};

/// Default farthest-point subsample size for Chamfer distance.
pub const CHAMFER_SAMPLES: usize = 2048;
/// Default farthest-point subsample size for EMD.
pub const EMD_SAMPLES: usize = 256;
/// Largest set size the exact assignment solver accepts.
pub const EMD_MAX_SAMPLES: usize = 512;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("metric needs nonempty point clouds")]
    EmptyCloud,
    #[error("EMD needs equal set sizes, got {0} and {1}")]
    SizeMismatch(usize, usize),
    #[error("EMD set size {0} exceeds {EMD_MAX_SAMPLES}")]
    TooLarge(usize),
    #[error("{metric} needs at least {needed} completions, got {got}")]
    TooFewCompletions {
        metric: &'static str,
        needed: usize,
        got: usize,
    },
}

fn lex_min(points: &[Point]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        let b = &points[best];
        let ord = p[0].total_cmp(&b[0]).then(p[1].total_cmp(&b[1])).then(p[2].total_cmp(&b[2]));
        if ord.is_lt() {
            best = i;
        }
    }
    best
}

/// Farthest-point subsample of size `m`, starting from the lexicographically
/// smallest point; ties go to the lowest index. Returns every point when
/// `m >= len`.
pub fn farthest_point_sample(points: &[Point], m: usize) -> Vec<Point> {
    if m >= points.len() {
        return points.to_vec();
    }
    if m == 0 {
        return Vec::new();
    }
    let mut chosen = Vec::with_capacity(m);
    let mut d = vec![f64::INFINITY; points.len()];
    let mut cur = lex_min(points);
    for _ in 0..m {
        chosen.push(points[cur]);
        let c = points[cur];
        let mut next = 0;
        let mut far = -1.0;
        for (i, (p, di)) in points.iter().zip(d.iter_mut()).enumerate() {
            let v = nn::dist2(p, &c);
            if v < *di {
                *di = v;
            }
            if *di > far {
                far = *di;
                next = i;
            }
        }
        cur = next;
    }
    chosen
}

fn subsample(pc: &PointCloud, m: Option<usize>) -> Vec<Point> {
    match m {
        Some(m) => farthest_point_sample(pc.points(), m),
        None => pc.points().to_vec(),
    }
}

fn union_bounds(a: &[Point], b: &[Point]) -> (Point, Point) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in a.iter().chain(b) {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

/// Mean and max over `from` of the distance to the nearest point of `to`.
fn directed(from: &[Point], to: &[Point]) -> (f64, f64) {
    let (lo, hi) = union_bounds(from, to);
    let index = NnIndex::new(to, lo, hi);
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for q in from {
        let d = index.nearest_dist2(q).sqrt();
        sum += d;
        max = max.max(d);
    }
    (sum / from.len() as f64, max)
}

fn nonempty(clouds: &[&PointCloud]) -> Result<(), MetricError> {
    if clouds.iter().any(|c| c.is_empty()) {
        Err(MetricError::EmptyCloud)
    } else {
        Ok(())
    }
}

/// Symmetric Chamfer distance `0.5 * (mean_x min_y |x-y| + mean_y min_x |x-y|)`
/// on farthest-point subsamples of size `m` (`None` uses every point).
pub fn chamfer(x: &PointCloud, y: &PointCloud, m: Option<usize>) -> Result<f64, MetricError> {
    nonempty(&[x, y])?;
    let (xs, ys) = (subsample(x, m), subsample(y, m));
    Ok(0.5 * (directed(&xs, &ys).0 + directed(&ys, &xs).0))
}

/// Mean transport cost of the optimal one-to-one matching. With `Some(m)`
/// both clouds are subsampled to `min(m, |x|, |y|)` points; with `None` they
/// must already have equal size.
pub fn emd(x: &PointCloud, y: &PointCloud, m: Option<usize>) -> Result<f64, MetricError> {
    nonempty(&[x, y])?;
    let size = match m {
        Some(m) => m.min(x.len()).min(y.len()),
        None if x.len() == y.len() => x.len(),
        None => return Err(MetricError::SizeMismatch(x.len(), y.len())),
    };
    if size > EMD_MAX_SAMPLES {
        return Err(MetricError::TooLarge(size));
    }
    let (xs, ys) = (farthest_point_sample(x.points(), size), farthest_point_sample(y.points(), size));
    let cost: Vec<f64> = xs
        .iter()
        .flat_map(|a| ys.iter().map(move |b| nn::dist2(a, b).sqrt()))
        .collect();
    let assign = min_cost_assignment(&cost, size);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * size + j]).sum();
    Ok(total / size as f64)
}

/// One-directional fidelity `(mean, max)` of nearest distances from every
/// partial point to the completion.
pub fn ucd_uhd(partial: &PointCloud, completed: &PointCloud) -> Result<(f64, f64), MetricError> {
    nonempty(&[partial, completed])?;
    Ok(directed(partial.points(), completed.points()))
}

/// Smallest Chamfer distance from any completion to the ground truth.
pub fn mmd(completions: &[PointCloud], gt: &PointCloud, m: Option<usize>) -> Result<f64, MetricError> {
    if completions.is_empty() {
        return Err(MetricError::TooFewCompletions {
            metric: "MMD",
            needed: 1,
            got: 0,
        });
    }
    completions
        .iter()
        .map(|c| chamfer(c, gt, m))
        .try_fold(f64::INFINITY, |acc, d| d.map(|d| acc.min(d)))
}

/// Mean Chamfer distance over unordered pairs of completions.
pub fn tmd(completions: &[PointCloud], m: Option<usize>) -> Result<f64, MetricError> {
    let n = completions.len();
    if n < 2 {
        return Err(MetricError::TooFewCompletions {
            metric: "TMD",
            needed: 2,
            got: n,
        });
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += chamfer(&completions[i], &completions[j], m)?;
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cd,
    Emd,
    Ucd,
    Uhd,
    Mmd,
    Tmd,
}

impl Metric {
    pub const ALL: [Metric; 6] = [Metric::Cd, Metric::Emd, Metric::Ucd, Metric::Uhd, Metric::Mmd, Metric::Tmd];

    /// Factor applied when values are displayed in reports (raw values are stored).
    pub fn display_scale(self) -> f64 {
        match self {
            Metric::Ucd => 1e4,
            _ => 1e2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Cd => "cd",
            Metric::Emd => "emd",
            Metric::Ucd => "ucd",
            Metric::Uhd => "uhd",
            Metric::Mmd => "mmd",
            Metric::Tmd => "tmd",
        }
    }
}

/// Raw (unscaled) metric values for one completion, plus the set-level ones when available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd: f64,
    pub emd: f64,
    pub ucd: f64,
    pub uhd: f64,
    pub mmd: Option<f64>,
    pub tmd: Option<f64>,
    /// Per-cloud subsample cap used for CD.
    pub cd_samples: usize,
    pub emd_samples: usize,
}

impl MetricReport {
    /// CD and EMD against the ground truth and UCD/UHD against the partial,
    /// using the default subsample sizes.
    pub fn single(completed: &PointCloud, gt: &PointCloud, partial: &PointCloud) -> Result<Self, MetricError> {
        let (ucd, uhd) = ucd_uhd(partial, completed)?;
        Ok(Self {
            cd: chamfer(completed, gt, Some(CHAMFER_SAMPLES))?,
            emd: emd(completed, gt, Some(EMD_SAMPLES))?,
            ucd,
            uhd,
            mmd: None,
            tmd: None,
            cd_samples: CHAMFER_SAMPLES,
            emd_samples: EMD_SAMPLES.min(completed.len()).min(gt.len()),
        })
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Cd => Some(self.cd),
            Metric::Emd => Some(self.emd),
            Metric::Ucd => Some(self.ucd),
            Metric::Uhd => Some(self.uhd),
            Metric::Mmd => self.mmd,
            Metric::Tmd => self.tmd,
        }
    }
}
