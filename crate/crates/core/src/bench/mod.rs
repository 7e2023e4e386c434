//! Benchmark orchestration: completion runs over a manifest, scoring,
//! resumable per-item artifacts, CSV and Markdown reports.

mod csv;
mod pipeline;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use csv::{parse_csv, render_csv, CSV_VERSION};
pub use pipeline::{checkpoint_hash, train_backbone, train_flow_stage, train_vae_stage, CorpusSpec, TrainPlan, TrainingRecord};
pub use report::{format_value, render_markdown};

use crate::genmodel::{Backbone, Condition};
use crate::geometry::io::{read_ply, write_ply, IoError, PlyEncoding};
use crate::geometry::PointCloud;
use crate::metrics::{chamfer, farthest_point_sample, MetricReport, CHAMFER_SAMPLES};
use crate::partiality::{load_manifest, Family, Manifest, PartialityError, Pattern};
use crate::rng::{derive_seed, tag};
use crate::sampler::{run_method, Frame, Method, SamplerConfig};

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "VOXFILL_WORKERS";
/// Largest failure fraction a run may have and still succeed.
pub const MAX_FAILURE_RATE: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("{0} does not exist")]
    MissingPath(String),
    #[error("no seeds given")]
    NoSeeds,
    #[error("no methods given")]
    NoMethods,
    #[error("report has no rows")]
    EmptyReport,
    #[error("CSV line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("{0}")]
    Io(#[from] IoError),
    #[error(transparent)]
    Partiality(#[from] PartialityError),
    #[error(transparent)]
    Model(#[from] crate::genmodel::GenError),
    #[error("worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path, source: std::io::Error) -> BenchError {
    BenchError::Io(IoError::File {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub sampler: SamplerConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Worker threads; `None` uses the environment override or one per core.
    pub workers: Option<usize>,
    /// Condition each completion on the object's family label.
    pub use_labels: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("bench/manifest.json"),
            checkpoint: PathBuf::from("ckpt"),
            out: PathBuf::from("runs"),
            sampler: SamplerConfig {
                frame: Frame::Canonical,
                ..SamplerConfig::default()
            },
            methods: vec![Method::Full],
            seeds: vec![0],
            workers: None,
            use_labels: false,
        }
    }
}

impl RunConfig {
    pub fn worker_count(&self) -> usize {
        let env = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0);
        env.or(self.workers).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

/// One completion attempt. Metric values are raw (unscaled).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub partial: String,
    pub object: String,
    pub family: Family,
    pub pattern: Pattern,
    pub method: Method,
    pub seed: u64,
    pub status: Status,
    pub cd: Option<f64>,
    pub emd: Option<f64>,
    pub ucd: Option<f64>,
    pub uhd: Option<f64>,
    /// Set-level values over this (partial, method) group's seeds.
    pub mmd: Option<f64>,
    pub tmd: Option<f64>,
    pub error: Option<String>,
}

/// Median and mean of one metric over a group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Some(Self {
            median,
            mean: v.iter().sum::<f64>() / n as f64,
        })
    }
}

/// Aggregate over one (pattern, method) cell; `pattern = None` pools every pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub pattern: Option<Pattern>,
    pub method: Method,
    pub rows: usize,
    pub failures: usize,
    pub cd: Option<Summary>,
    pub emd: Option<Summary>,
    pub ucd: Option<Summary>,
    pub uhd: Option<Summary>,
    pub mmd: Option<Summary>,
    pub tmd: Option<Summary>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<Row>,
    /// Seconds per row as measured when the item was computed (including
    /// reused items), same order as `rows`; absent for rows loaded from CSV.
    pub seconds: Vec<Option<f64>>,
    /// Rows computed in this run (not reused).
    pub computed: usize,
    /// Stored completion per row; absent for error rows and CSV-loaded reports.
    pub clouds: Vec<Option<PathBuf>>,
}

fn pattern_order(p: Pattern) -> usize {
    Pattern::ALL.iter().position(|&q| q == p).expect("pattern listed")
}

impl BenchReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status == Status::Error).count()
    }

    pub fn failure_rate(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.failures() as f64 / self.rows.len() as f64
        }
    }

    /// Aggregates ordered by pattern then method, followed by the pooled rows.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut methods: Vec<Method> = self.rows.iter().map(|r| r.method).collect();
        methods.sort();
        methods.dedup();
        let mut patterns: Vec<Pattern> = self.rows.iter().map(|r| r.pattern).collect();
        patterns.sort_by_key(|&p| pattern_order(p));
        patterns.dedup();
        let mut out = Vec::new();
        for p in patterns.iter().map(|&p| Some(p)).chain([None]) {
            for &m in &methods {
                let rows: Vec<&Row> = self
                    .rows
                    .iter()
                    .filter(|r| r.method == m && p.is_none_or(|p| r.pattern == p))
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let col = |f: fn(&Row) -> Option<f64>| Summary::of(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
                // set-level metrics count once per (partial, method) group
                let group = |f: fn(&Row) -> Option<f64>| {
                    let mut seen = BTreeMap::new();
                    for r in &rows {
                        if let Some(v) = f(r) {
                            seen.entry(r.partial.as_str()).or_insert(v);
                        }
                    }
                    Summary::of(&seen.into_values().collect::<Vec<_>>())
                };
                out.push(Aggregate {
                    pattern: p,
                    method: m,
                    rows: rows.len(),
                    failures: rows.iter().filter(|r| r.status == Status::Error).count(),
                    cd: col(|r| r.cd),
                    emd: col(|r| r.emd),
                    ucd: col(|r| r.ucd),
                    uhd: col(|r| r.uhd),
                    mmd: group(|r| r.mmd),
                    tmd: group(|r| r.tmd),
                });
            }
        }
        out
    }

    /// Median CD per method over every pattern.
    pub fn median_cd(&self, method: Method) -> Option<f64> {
        self.aggregates()
            .into_iter()
            .find(|a| a.pattern.is_none() && a.method == method)
            .and_then(|a| a.cd.map(|s| s.median))
    }
}

/// Per-item artifact stored for resumption.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ItemRecord {
    key: String,
    row: Row,
    seconds: f64,
}

struct Task<'a> {
    entry: &'a crate::partiality::ManifestPartial,
    method: Method,
    seed: u64,
    key: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String, BenchError> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| io_err(path, e))?))
}

/// Sampler configuration for one (partial, method, seed) item.
pub fn item_config(base: &SamplerConfig, method: Method, seed: u64, partial_id: &str, label: Option<usize>) -> SamplerConfig {
    let mut cfg = base.for_method(method);
    cfg.seed = derive_seed(seed, &[tag(partial_id)]);
    if let Some(l) = label {
        cfg.condition = Condition {
            label: Some(l),
            guidance: base.condition.guidance,
        };
    }
    cfg
}

fn create_out_dir(out: &Path) -> Result<(), BenchError> {
    if out.is_dir() {
        return Ok(());
    }
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    fs::create_dir_all(tmp.join("items")).map_err(|e| io_err(&tmp, e))?;
    match fs::rename(&tmp, out) {
        Ok(()) => Ok(()),
        // another process won the race
        Err(_) if out.is_dir() => {
            let _ = fs::remove_dir_all(&tmp);
            Ok(())
        }
        Err(e) => Err(io_err(out, e)),
    }
}

fn load_record(dir: &Path, key: &str) -> Option<(ItemRecord, Option<PointCloud>)> {
    let bytes = fs::read(dir.join(format!("{key}.json"))).ok()?;
    let rec: ItemRecord = serde_json::from_slice(&bytes).ok()?;
    if rec.key != key {
        return None;
    }
    match rec.row.status {
        Status::Ok => {
            let pc = read_ply(&dir.join(format!("{key}.ply"))).ok()?;
            Some((rec, Some(pc)))
        }
        Status::Error => Some((rec, None)),
    }
}

fn score(completed: &PointCloud, gt: &PointCloud, partial: &PointCloud) -> Result<[f64; 4], crate::metrics::MetricError> {
    let r = MetricReport::single(completed, gt, partial)?;
    Ok([r.cd, r.emd, r.ucd, r.uhd])
}

fn run_item(
    task: &Task,
    model: &Backbone,
    manifest: &Manifest,
    root: &Path,
    base: &SamplerConfig,
    use_labels: bool,
) -> (Row, Option<PointCloud>) {
    let e = task.entry;
    let mut row = Row {
        partial: e.id.clone(),
        object: e.object.clone(),
        family: e.family,
        pattern: e.pattern,
        method: task.method,
        seed: task.seed,
        status: Status::Error,
        cd: None,
        emd: None,
        ucd: None,
        uhd: None,
        mmd: None,
        tmd: None,
        error: None,
    };
    let label = use_labels.then(|| e.family.label());
    let cfg = item_config(base, task.method, task.seed, &e.id, label);
    let result = manifest
        .load_partial(root, e)
        .map_err(|err| err.to_string())
        .and_then(|(partial, gt)| {
            let done = run_method(task.method, &partial, model, &cfg).map_err(|err| err.to_string())?;
            let pts = done.points.quantized_f32();
            let m = score(&pts, &gt, &partial).map_err(|err| err.to_string())?;
            Ok((pts, m))
        });
    match result {
        Ok((pts, [cd, emd, ucd, uhd])) => {
            row.status = Status::Ok;
            row.cd = Some(cd);
            row.emd = Some(emd);
            row.ucd = Some(ucd);
            row.uhd = Some(uhd);
            (row, Some(pts))
        }
        Err(msg) => {
            row.error = Some(msg);
            (row, None)
        }
    }
}

/// Fills MMD/TMD for every (partial, method) group with at least two successful seeds.
fn fill_set_metrics(rows: &mut [Row], clouds: &[Option<PointCloud>], gts: &BTreeMap<String, PointCloud>) {
    let mut groups: BTreeMap<(String, Method), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        groups.entry((r.partial.clone(), r.method)).or_default().push(i);
    }
    let sub: Vec<Option<PointCloud>> = clouds
        .par_iter()
        .map(|c| {
            c.as_ref().map(|pc| {
                PointCloud::new(farthest_point_sample(pc.points(), CHAMFER_SAMPLES)).expect("nonempty subsample")
            })
        })
        .collect();
    let results: Vec<(Vec<usize>, Option<(f64, f64)>)> = groups
        .into_par_iter()
        .map(|(_, idx)| {
            let ok: Vec<&PointCloud> = idx.iter().filter_map(|&i| sub[i].as_ref()).collect();
            let gt = gts.get(&rows[idx[0]].partial);
            let vals = match gt {
                Some(gt) if ok.len() >= 2 => {
                    let gt_sub = PointCloud::new(farthest_point_sample(gt.points(), CHAMFER_SAMPLES)).expect("gt");
                    let mmd = ok
                        .iter()
                        .map(|c| chamfer(c, &gt_sub, None).expect("nonempty"))
                        .fold(f64::INFINITY, f64::min);
                    let mut sum = 0.0;
                    let mut n = 0usize;
                    for i in 0..ok.len() {
                        for j in i + 1..ok.len() {
                            sum += chamfer(ok[i], ok[j], None).expect("nonempty");
                            n += 1;
                        }
                    }
                    Some((mmd, sum / n as f64))
                }
                _ => None,
            };
            (idx, vals)
        })
        .collect();
    for (idx, vals) in results {
        for i in idx {
            rows[i].mmd = vals.map(|v| v.0);
            rows[i].tmd = vals.map(|v| v.1);
        }
    }
}

/// Runs every (partial, method, seed) item, reusing finished items found in
/// `cfg.out`, and writes `results.csv` plus `timings.csv` there.
pub fn run_bench(cfg: &RunConfig) -> Result<BenchReport, BenchError> {
    for p in [&cfg.manifest, &cfg.checkpoint] {
        if !p.exists() {
            return Err(BenchError::MissingPath(p.display().to_string()));
        }
    }
    if cfg.seeds.is_empty() {
        return Err(BenchError::NoSeeds);
    }
    if cfg.methods.is_empty() {
        return Err(BenchError::NoMethods);
    }
    let manifest = load_manifest(&cfg.manifest)?;
    let root = cfg.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let (model, _) = Backbone::load(&cfg.checkpoint)?;
    let fingerprint = serde_json::json!({
        "manifest": file_hash(&cfg.manifest)?,
        "checkpoint": checkpoint_hash(&cfg.checkpoint)?,
        "sampler": cfg.sampler,
        "use_labels": cfg.use_labels,
    });
    let config_hash = sha256_hex(fingerprint.to_string().as_bytes());
    create_out_dir(&cfg.out)?;
    let items_dir = cfg.out.join("items");
    fs::create_dir_all(&items_dir).map_err(|e| io_err(&items_dir, e))?;

    let mut tasks = Vec::new();
    for entry in &manifest.partials {
        for &method in &cfg.methods {
            for &seed in &cfg.seeds {
                let key = sha256_hex(format!("{}|{}|{}|{}|{}", entry.id, entry.pattern.name(), method, seed, config_hash).as_bytes());
                tasks.push(Task {
                    entry,
                    method,
                    seed,
                    key,
                });
            }
        }
    }
    let workers = cfg.worker_count();
    info!("{} items on {workers} workers", tasks.len());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| BenchError::Pool(e.to_string()))?;
    let outcomes: Vec<Result<(Row, Option<PointCloud>, Option<f64>, bool), BenchError>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|task| {
                if let Some((rec, pc)) = load_record(&items_dir, &task.key) {
                    return Ok((rec.row, pc, Some(rec.seconds), false));
                }
                let start = Instant::now();
                let (row, pc) = run_item(task, &model, &manifest, &root, &cfg.sampler, cfg.use_labels);
                let seconds = start.elapsed().as_secs_f64();
                if let Some(msg) = &row.error {
                    warn!("{} {} seed {}: {msg}", row.partial, row.method, row.seed);
                }
                if let Some(pc) = &pc {
                    write_ply(&items_dir.join(format!("{}.ply", task.key)), pc, PlyEncoding::BinaryLittleEndian)?;
                }
                let rec = ItemRecord {
                    key: task.key.clone(),
                    row: row.clone(),
                    seconds,
                };
                let path = items_dir.join(format!("{}.json", task.key));
                fs::write(&path, serde_json::to_vec_pretty(&rec).expect("record serializes")).map_err(|e| io_err(&path, e))?;
                Ok((row, pc, Some(seconds), true))
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(tasks.len());
    let mut clouds = Vec::with_capacity(tasks.len());
    let mut seconds = Vec::with_capacity(tasks.len());
    let mut computed = 0;
    for o in outcomes {
        let (row, pc, s, fresh) = o?;
        rows.push(row);
        clouds.push(pc);
        seconds.push(s);
        computed += fresh as usize;
    }
    if cfg.seeds.len() >= 2 {
        let mut gts = BTreeMap::new();
        for e in &manifest.partials {
            gts.insert(e.id.clone(), read_ply(&Manifest::resolve(&root, &e.gt_path))?);
        }
        pool.install(|| fill_set_metrics(&mut rows, &clouds, &gts));
    }
    let paths = tasks
        .iter()
        .zip(&clouds)
        .map(|(t, c)| c.as_ref().map(|_| items_dir.join(format!("{}.ply", t.key))))
        .collect();
    let report = BenchReport {
        rows,
        seconds,
        computed,
        clouds: paths,
    };
    let csv_path = cfg.out.join("results.csv");
    fs::write(&csv_path, render_csv(&report)?).map_err(|e| io_err(&csv_path, e))?;
    let timing_path = cfg.out.join("timings.csv");
    let mut timing = String::from("partial,method,seed,seconds\n");
    for (r, s) in report.rows.iter().zip(&report.seconds) {
        let s = s.map(|s| format!("{s:.3}")).unwrap_or_default();
        timing.push_str(&format!("{},{},{},{}\n", r.partial, r.method, r.seed, s));
    }
    fs::write(&timing_path, timing).map_err(|e| io_err(&timing_path, e))?;
    Ok(report)
}
