//! Benchmark construction: ground truths, partials and the JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    gen_shape, random_crop, semantic_part, single_scan, Family, PartialityError, Pattern, PatternParams, ShapeSpec,
    MAX_KEPT_FRACTION, MIN_KEPT_FRACTION,
};
use crate::geometry::io::{read_ply, write_ply, IoError, PlyEncoding};
use crate::geometry::PointCloud;
use crate::rng::{derive_seed, rng_from, tag};

pub const MANIFEST_VERSION: u32 = 1;
/// Candidate draws per pattern sample before the object is rejected.
const PATTERN_ATTEMPTS: u64 = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub objects: usize,
    pub samples_per_pattern: usize,
    pub seed: u64,
    pub gt_points: usize,
    /// Grid resolution used by the single-scan visibility test.
    pub scan_resolution: usize,
    pub crop_fraction: (f64, f64),
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            objects: 30,
            samples_per_pattern: 2,
            seed: 0,
            gt_points: 8192,
            scan_resolution: 32,
            crop_fraction: (0.15, 0.4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestObject {
    pub id: String,
    pub family: Family,
    pub label: usize,
    pub spec: ShapeSpec,
    pub gt_path: String,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestPartial {
    pub id: String,
    pub object: String,
    pub family: Family,
    pub pattern: Pattern,
    pub sample: usize,
    pub seed: u64,
    pub params: PatternParams,
    pub path: String,
    pub gt_path: String,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: BenchConfig,
    pub objects: Vec<ManifestObject>,
    pub partials: Vec<ManifestPartial>,
}

impl Manifest {
    /// Resolves a manifest-relative path against the manifest directory.
    pub fn resolve(dir: &Path, rel: &str) -> PathBuf {
        dir.join(rel)
    }

    pub fn load_partial(&self, dir: &Path, entry: &ManifestPartial) -> Result<(PointCloud, PointCloud), IoError> {
        Ok((read_ply(&dir.join(&entry.path))?, read_ply(&dir.join(&entry.gt_path))?))
    }
}

/// Shape specs for `count` objects drawn from the stream `stream`, cycling families.
pub fn corpus_specs(count: usize, seed: u64, stream: &str) -> Vec<ShapeSpec> {
    (0..count)
        .map(|i| {
            let family = Family::ALL[i % Family::ALL.len()];
            ShapeSpec::random(family, derive_seed(seed, &[tag(stream), i as u64]))
        })
        .collect()
}

fn within_bounds(partial: &PointCloud, gt: &PointCloud) -> bool {
    let r = partial.len() as f64 / gt.len() as f64;
    (MIN_KEPT_FRACTION..=MAX_KEPT_FRACTION).contains(&r)
}

fn random_view(seed: u64) -> [f64; 3] {
    let mut rng = rng_from(seed);
    let v = crate::rng::normal_vec(&mut rng, 3);
    let n = v.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn make_partial(
    cfg: &BenchConfig,
    gt: &PointCloud,
    pattern: Pattern,
    object_seed: u64,
    sample: usize,
    used_parts: &mut Vec<u32>,
) -> Option<(PointCloud, PatternParams, u64)> {
    for attempt in 0..PATTERN_ATTEMPTS {
        let seed = derive_seed(object_seed, &[tag(pattern.name()), sample as u64, attempt]);
        let made = match pattern {
            Pattern::SingleScan => {
                let view = random_view(seed);
                single_scan(gt, view, cfg.scan_resolution).ok().map(|pc| {
                    (
                        pc,
                        PatternParams::SingleScan {
                            view,
                            resolution: cfg.scan_resolution,
                        },
                    )
                })
            }
            Pattern::RandomCrop => {
                let (lo, hi) = cfg.crop_fraction;
                let fraction = rng_from(seed).random_range(lo..=hi);
                random_crop(gt, fraction, seed)
                    .ok()
                    .map(|(pc, crop)| (pc, PatternParams::RandomCrop { fraction, seed, crop }))
            }
            Pattern::SemanticPart => {
                let mut parts: Vec<u32> = gt.labels()?.to_vec();
                parts.sort_unstable();
                parts.dedup();
                // Prefer parts not used by an earlier sample of this object.
                let fresh: Vec<u32> = parts.iter().copied().filter(|p| !used_parts.contains(p)).collect();
                let pool = if attempt < PATTERN_ATTEMPTS / 2 && !fresh.is_empty() { fresh } else { parts };
                let requested = pool[rng_from(seed).random_range(0..pool.len())];
                semantic_part(gt, requested)
                    .ok()
                    .map(|(pc, kept)| (pc, PatternParams::SemanticPart { requested, kept }))
            }
        };
        if let Some((pc, params)) = made {
            if within_bounds(&pc, gt) {
                if let PatternParams::SemanticPart { kept, .. } = params {
                    used_parts.push(kept);
                }
                return Some((pc, params, seed));
            }
        }
    }
    None
}

struct ObjectOutput {
    object: ManifestObject,
    gt: PointCloud,
    partials: Vec<(ManifestPartial, PointCloud)>,
}

fn build_object(cfg: &BenchConfig, index: usize, spec: ShapeSpec) -> Result<ObjectOutput, PartialityError> {
    let id = format!("obj{index:03}");
    let gt = gen_shape(&spec, cfg.gt_points)?.quantized_f32();
    let gt_path = format!("gt/{id}.ply");
    let mut partials = Vec::new();
    for pattern in Pattern::ALL {
        let mut used_parts = Vec::new();
        for sample in 0..cfg.samples_per_pattern {
            let (pc, params, seed) = make_partial(cfg, &gt, pattern, spec.seed, sample, &mut used_parts).ok_or(
                PartialityError::PatternExhausted {
                    object: id.clone(),
                    pattern: pattern.name(),
                },
            )?;
            let pid = format!("{id}_{}_{sample}", pattern.name());
            partials.push((
                ManifestPartial {
                    id: pid.clone(),
                    object: id.clone(),
                    family: spec.params.family(),
                    pattern,
                    sample,
                    seed,
                    params,
                    path: format!("partial/{pid}.ply"),
                    gt_path: gt_path.clone(),
                    points: pc.len(),
                },
                pc,
            ));
        }
    }
    Ok(ObjectOutput {
        object: ManifestObject {
            id,
            family: spec.params.family(),
            label: spec.params.family().label(),
            spec,
            gt_path,
            points: gt.len(),
        },
        gt,
        partials,
    })
}

fn create_dir(path: &Path) -> Result<(), PartialityError> {
    fs::create_dir_all(path).map_err(|source| {
        IoError::File {
            path: path.display().to_string(),
            source,
        }
        .into()
    })
}

/// Generates ground truths and partials under `out`, writes `manifest.json`
/// there and returns the manifest. Paths in the manifest are relative to `out`.
pub fn build_benchmark(cfg: &BenchConfig, out: &Path) -> Result<Manifest, PartialityError> {
    create_dir(&out.join("gt"))?;
    create_dir(&out.join("partial"))?;
    let specs = corpus_specs(cfg.objects, cfg.seed, "benchmark");
    let built: Vec<ObjectOutput> = specs
        .into_par_iter()
        .enumerate()
        .map(|(i, spec)| build_object(cfg, i, spec))
        .collect::<Result<_, _>>()?;
    let mut manifest = Manifest {
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        objects: Vec::new(),
        partials: Vec::new(),
    };
    for obj in built {
        write_ply(&out.join(&obj.object.gt_path), &obj.gt, PlyEncoding::BinaryLittleEndian)?;
        for (entry, pc) in obj.partials {
            write_ply(&out.join(&entry.path), &pc, PlyEncoding::BinaryLittleEndian)?;
            manifest.partials.push(entry);
        }
        manifest.objects.push(obj.object);
    }
    let path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    crate::geometry::io::write_bytes(&path, json.as_bytes())?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest, PartialityError> {
    let bytes = fs::read(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| PartialityError::Manifest {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(PartialityError::Manifest {
            path: path.display().to_string(),
            message: format!("unsupported version {}", manifest.version),
        });
    }
    Ok(manifest)
}
