//! Zero-shot completion loop over a trained backbone: explicit replacement
//! (ERS) and implicit alignment (IAS) per timestep, their ablations, and the
//! naive latent-replacement baseline.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, DiffError, Tape};
use crate::genmodel::{Backbone, Condition, GenError, Latent};
use crate::geometry::{
    downsample_mask, mask_from_partial, normalize, occupancy_to_points, voxelize, GeometryError, LatentMask,
    NormalizeTransform, OccupancyGrid, PointCloud, SpatialMask,
};
use crate::rng::{derive_seed, normal_vec, rng_from, tag, Rng};

/// Halvings of the IAS step size tried before a refinement step is skipped.
pub const IAS_BACKTRACKS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("step count must be at least 1")]
    NoSteps,
    #[error("ias_opt_steps must be at least 1")]
    NoOptSteps,
    #[error("eta must be finite and nonnegative, got {0}")]
    BadEta(f64),
    #[error("threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("t = {0} outside (0, 1]")]
    BadTime(f64),
    #[error("non-finite latent at t = {0}")]
    NonFiniteLatent(f64),
    #[error("non-finite alignment gradient at t = {0}")]
    NonFiniteGradient(f64),
    #[error("observation resolution {actual} does not match the model's {expected}")]
    Resolution { expected: usize, actual: usize },
    #[error("completion has no voxel at or above the threshold")]
    EmptyCompletion,
    #[error(transparent)]
    Model(#[from] GenError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl From<DiffError> for SamplerError {
    fn from(e: DiffError) -> Self {
        SamplerError::Model(e.into())
    }
}

/// Coordinate frame the partial is voxelized in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// Fit the partial's bounding box into the normalized cube.
    #[default]
    Fit,
    /// Use coordinates as given; they must already live in the unit cube.
    Canonical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// IAS step size, applied to the max-abs normalized gradient.
    pub eta: f64,
    pub threshold: f64,
    pub condition: Condition,
    pub seed: u64,
    pub use_ers: bool,
    pub use_pns: bool,
    pub use_ias: bool,
    pub ias_opt_steps: usize,
    /// Overwrite observed voxels with the partial after the final decode.
    pub final_replacement: bool,
    /// Diagnostic mode: every noise draw is zero.
    pub zero_noise: bool,
    pub frame: Frame,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            eta: 1.0,
            threshold: 0.5,
            condition: Condition::unconditional(),
            seed: 0,
            use_ers: true,
            use_pns: true,
            use_ias: true,
            ias_opt_steps: 1,
            final_replacement: true,
            zero_noise: false,
            frame: Frame::Fit,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.steps == 0 {
            return Err(SamplerError::NoSteps);
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(SamplerError::BadEta(self.eta));
        }
        if self.use_ias && self.ias_opt_steps == 0 {
            return Err(SamplerError::NoOptSteps);
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(SamplerError::BadThreshold(self.threshold));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Timesteps `1, 1 - dt, ..., dt`.
    pub fn schedule(&self) -> impl Iterator<Item = f64> {
        let n = self.steps;
        (0..n).map(move |i| (n - i) as f64 / n as f64)
    }

    /// Copy with the ablation flags of `method`.
    pub fn for_method(&self, method: Method) -> Self {
        let mut c = self.clone();
        c.use_ers = true;
        c.use_pns = true;
        c.use_ias = true;
        c.ias_opt_steps = 1;
        match method {
            Method::Full | Method::Baseline => {}
            Method::WoErs => c.use_ers = false,
            Method::WoPns => c.use_pns = false,
            Method::WoIas => c.use_ias = false,
            Method::Ias10 => c.ias_opt_steps = 10,
        }
        c
    }
}

/// Completion methods compared in the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    Baseline,
    WoErs,
    WoPns,
    WoIas,
    Ias10,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Full,
        Method::Baseline,
        Method::WoErs,
        Method::WoPns,
        Method::WoIas,
        Method::Ias10,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Baseline => "baseline",
            Method::WoErs => "wo_ers",
            Method::WoPns => "wo_pns",
            Method::WoIas => "wo_ias",
            Method::Ias10 => "ias10",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// Per-timestep telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: f64,
    /// Norm of the predicted clean latent.
    pub x0_norm: f64,
    /// Alignment loss before refinement; absent when IAS does not run.
    pub align_loss: Option<f64>,
    pub grad_norm: Option<f64>,
    /// IoU over observed voxels between the decoded prediction and the partial;
    /// absent when IAS does not run.
    pub masked_iou: Option<f64>,
}

/// Writes one JSON object per line.
pub fn write_trace_jsonl(out: &mut impl Write, trace: &[StepTrace]) -> std::io::Result<()> {
    for rec in trace {
        serde_json::to_writer(&mut *out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Partial observation in the model's grid: `S_p`, `M` and the latent mask.
#[derive(Clone, Debug)]
pub struct Observation {
    pub grid: OccupancyGrid,
    pub mask: SpatialMask,
    pub latent_mask: LatentMask,
    target: Array,
    weight: Array,
    latent_weight: Vec<f64>,
}

impl Observation {
    pub fn new(grid: OccupancyGrid, model: &Backbone) -> Result<Self, SamplerError> {
        let n = model.config.grid_res;
        if grid.resolution() != n {
            return Err(SamplerError::Resolution {
                expected: n,
                actual: grid.resolution(),
            });
        }
        let grid = grid.binarize(f64::MIN_POSITIVE);
        let mask = mask_from_partial(&grid);
        Self::with_mask(grid, mask, model)
    }

    /// Observation with an explicit mask (the grid is used as given).
    pub fn with_mask(grid: OccupancyGrid, mask: SpatialMask, model: &Backbone) -> Result<Self, SamplerError> {
        let n = model.config.grid_res;
        for r in [grid.resolution(), mask.resolution()] {
            if r != n {
                return Err(SamplerError::Resolution { expected: n, actual: r });
            }
        }
        let latent_mask = downsample_mask(&mask, model.config.latent_res)?;
        let shape = vec![n, n, n, 1];
        let target = Array::new(shape.clone(), grid.values().to_vec()).map_err(GenError::from)?;
        let weight = Array::new(shape, mask.as_grid().values().to_vec()).map_err(GenError::from)?;
        let latent_weight = latent_mask.broadcast(model.config.channels);
        Ok(Self {
            grid,
            mask,
            latent_mask,
            target,
            weight,
            latent_weight,
        })
    }

    fn masked_iou(&self, decoded: &[f64], threshold: f64) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for ((&s, &p), &m) in decoded.iter().zip(self.grid.values()).zip(self.mask.bits()) {
            if m {
                let (a, b) = (s >= threshold, p >= threshold);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

fn draw(rng: &mut Rng, len: usize, zero: bool) -> Vec<f64> {
    let v = normal_vec(rng, len);
    if zero {
        vec![0.0; len]
    } else {
        v
    }
}

fn latent_from(model: &Backbone, data: Vec<f64>) -> Result<Latent, SamplerError> {
    Ok(Array::new(model.config.latent_shape(), data).map_err(GenError::from)?)
}

fn check_time(t: f64) -> Result<(), SamplerError> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(SamplerError::BadTime(t))
    }
}

fn check_finite(x: &Latent, t: f64) -> Result<(), SamplerError> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(SamplerError::NonFiniteLatent(t))
    }
}

/// Next time on the uniform grid, snapped to exactly zero at the end.
fn next_time(t: f64, dt: f64) -> f64 {
    let next = t - dt;
    if next < 0.5 * dt {
        0.0
    } else {
        next
    }
}

/// Clean-latent estimate `x_t - t v` along the linear path.
pub fn clean_estimate(x_t: &[f64], v: &[f64], t: f64) -> Vec<f64> {
    x_t.iter().zip(v).map(|(x, v)| x - t * v).collect()
}

/// Noise estimate `x_t + (1 - t) v` along the linear path.
pub fn noise_estimate(x_t: &[f64], v: &[f64], t: f64) -> Vec<f64> {
    x_t.iter().zip(v).map(|(x, v)| x + (1.0 - t) * v).collect()
}

/// Partial-aware noise: `sqrt(1-t) x1 + sqrt(t) eps1` in observed latent
/// cells (`m = 1`), `eps2` elsewhere.
pub fn partial_aware_noise(x1: &[f64], m: &[f64], t: f64, eps1: &[f64], eps2: &[f64]) -> Vec<f64> {
    let (a, b) = ((1.0 - t).sqrt(), t.sqrt());
    x1.iter()
        .zip(m)
        .zip(eps1.iter().zip(eps2))
        .map(|((&x, &m), (&e1, &e2))| m * (a * x + b * e1) + (1.0 - m) * e2)
        .collect()
}

/// Forward interpolation `(1 - t) x0 + t x1`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

/// Intermediate quantities of one explicit replacement step.
#[derive(Clone, Debug)]
pub struct ErsParts {
    pub velocity: Latent,
    pub x0_hat: Latent,
    pub decoded: OccupancyGrid,
    /// Decoded grid with observed voxels overwritten, binarized.
    pub replaced: OccupancyGrid,
    pub x0_star: Latent,
    pub x1_hat: Latent,
    pub x1_star: Latent,
    pub x_star: Latent,
}

/// Explicit replacement at time `t` with every intermediate kept.
pub fn ers_parts(
    model: &Backbone,
    x_t: &Latent,
    t: f64,
    obs: &Observation,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<ErsParts, SamplerError> {
    check_time(t)?;
    check_finite(x_t, t)?;
    let len = x_t.len();
    let eps1 = draw(rng, len, cfg.zero_noise);
    let eps2 = draw(rng, len, cfg.zero_noise);
    let velocity = model.velocity(x_t, t, &cfg.condition)?;
    let x0_hat = latent_from(model, clean_estimate(x_t.data(), velocity.data(), t))?;
    let decoded = model.decode(&x0_hat)?;
    let replaced = decoded.replace_masked(&obs.grid, &obs.mask)?.binarize(cfg.threshold);
    let x0_star = model.encode(&replaced)?;
    let x1_hat = latent_from(model, noise_estimate(x_t.data(), velocity.data(), t))?;
    let x1_star = if cfg.use_pns {
        latent_from(model, partial_aware_noise(x1_hat.data(), &obs.latent_weight, t, &eps1, &eps2))?
    } else {
        x1_hat.clone()
    };
    let x_star = latent_from(model, interpolate(x0_star.data(), x1_star.data(), t))?;
    check_finite(&x_star, t)?;
    Ok(ErsParts {
        velocity,
        x0_hat,
        decoded,
        replaced,
        x0_star,
        x1_hat,
        x1_star,
        x_star,
    })
}

/// Explicit replacement at time `t`. With `use_ers = false` this is the plain
/// Euler update `x_t - dt * v`.
pub fn ers_step(
    model: &Backbone,
    x_t: &Latent,
    t: f64,
    obs: &Observation,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Latent, SamplerError> {
    if !cfg.use_ers {
        check_time(t)?;
        check_finite(x_t, t)?;
        let v = model.velocity(x_t, t, &cfg.condition)?;
        let mut x = x_t.clone();
        x.axpy(-cfg.dt(), &v)?;
        return Ok(x);
    }
    Ok(ers_parts(model, x_t, t, obs, cfg, rng)?.x_star)
}

/// Alignment loss and its gradient with respect to the clean latent.
fn align(model: &Backbone, x0: &Latent, obs: &Observation, want_grad: bool) -> Result<(f64, Option<Array>, Vec<f64>), SamplerError> {
    let mut tape = Tape::new();
    let x = if want_grad {
        tape.input(x0.clone())
    } else {
        tape.constant(x0.clone())
    };
    let s = model.decode_on_tape(&mut tape, x)?;
    let target = tape.constant(obs.target.clone());
    let weight = tape.constant(obs.weight.clone());
    let loss = tape.bce(s, target, Some(weight))?;
    let value = tape.value(loss).data()[0];
    let decoded = tape.value(s).data().to_vec();
    let grad = if want_grad { Some(tape.grad(loss, x)?) } else { None };
    Ok((value, grad, decoded))
}

/// Implicit alignment at time `t`, returning `x_{t-dt}` and the step's trace record.
pub fn ias_step(
    model: &Backbone,
    x_star: &Latent,
    t: f64,
    obs: &Observation,
    cfg: &SamplerConfig,
) -> Result<(Latent, StepTrace), SamplerError> {
    check_time(t)?;
    if !(cfg.eta >= 0.0 && cfg.eta.is_finite()) {
        return Err(SamplerError::BadEta(cfg.eta));
    }
    check_finite(x_star, t)?;
    let v = model.velocity(x_star, t, &cfg.condition)?;
    let mut x0 = latent_from(model, clean_estimate(x_star.data(), v.data(), t))?;
    let mut trace = StepTrace {
        t,
        x0_norm: x0.norm(),
        align_loss: None,
        grad_norm: None,
        masked_iou: None,
    };
    let refine = cfg.use_ias && obs.mask.count() > 0;
    if refine {
        let (mut loss, mut grad, decoded) = align(model, &x0, obs, true)?;
        trace.align_loss = Some(loss);
        trace.masked_iou = Some(obs.masked_iou(&decoded, cfg.threshold));
        for k in 0..cfg.ias_opt_steps {
            let g = grad.take().expect("gradient requested");
            if !g.all_finite() {
                return Err(SamplerError::NonFiniteGradient(t));
            }
            if k == 0 {
                trace.grad_norm = Some(g.norm());
            }
            let scale = g.max_abs();
            if scale == 0.0 || cfg.eta == 0.0 {
                break;
            }
            let mut eta = cfg.eta;
            let mut accepted = None;
            for _ in 0..=IAS_BACKTRACKS {
                let mut cand = x0.clone();
                cand.axpy(-eta / scale, &g)?;
                let more = k + 1 < cfg.ias_opt_steps;
                let (l, cg, _) = align(model, &cand, obs, more)?;
                if l < loss {
                    accepted = Some((cand, l, cg));
                    break;
                }
                eta *= 0.5;
            }
            match accepted {
                Some((cand, l, cg)) => {
                    x0 = cand;
                    loss = l;
                    grad = cg;
                }
                None => break,
            }
            if grad.is_none() {
                break;
            }
        }
    }
    let t_next = next_time(t, cfg.dt());
    let out = x0.zip_map(&v, "ias", |x, v| x + t_next * v)?;
    check_finite(&out, t)?;
    Ok((out, trace))
}

/// Completed shape in the caller's frame plus the final grid and trace.
#[derive(Clone, Debug)]
pub struct Completion {
    pub points: PointCloud,
    /// Occupancy probabilities in the model frame, after final replacement.
    pub grid: OccupancyGrid,
    pub trace: Vec<StepTrace>,
    pub transform: NormalizeTransform,
}

/// Voxelizes `partial` in the configured frame.
pub fn observe(partial: &PointCloud, model: &Backbone, frame: Frame) -> Result<(Observation, NormalizeTransform), SamplerError> {
    let (pc, transform) = match frame {
        Frame::Fit => normalize(partial)?,
        Frame::Canonical => (partial.clone(), NormalizeTransform::IDENTITY),
    };
    let grid = voxelize(&pc, model.config.grid_res)?;
    Ok((Observation::new(grid, model)?, transform))
}

fn stream(cfg: &SamplerConfig, name: &str) -> Rng {
    rng_from(derive_seed(cfg.seed, &[tag(name)]))
}

/// Runs the replacement/alignment loop on an observation and returns the
/// final occupancy grid (after the optional hard replacement).
pub fn complete_observation(
    model: &Backbone,
    obs: &Observation,
    cfg: &SamplerConfig,
) -> Result<(OccupancyGrid, Vec<StepTrace>), SamplerError> {
    cfg.validate()?;
    let mut rng = stream(cfg, "complete");
    let mut x = latent_from(model, draw(&mut rng, model.config.latent_len(), cfg.zero_noise))?;
    let mut trace = Vec::with_capacity(cfg.steps);
    for t in cfg.schedule() {
        let x_star = if cfg.use_ers {
            ers_step(model, &x, t, obs, cfg, &mut rng)?
        } else {
            x
        };
        let (next, rec) = ias_step(model, &x_star, t, obs, cfg)?;
        x = next;
        trace.push(rec);
    }
    let mut grid = model.decode(&x)?;
    if cfg.final_replacement {
        grid = grid.replace_masked(&obs.grid, &obs.mask)?;
    }
    Ok((grid, trace))
}

fn finish(
    grid: OccupancyGrid,
    trace: Vec<StepTrace>,
    transform: NormalizeTransform,
    threshold: f64,
) -> Result<Completion, SamplerError> {
    let pts = match occupancy_to_points(&grid, threshold) {
        Ok(p) => p,
        Err(GeometryError::EmptyCloud) => return Err(SamplerError::EmptyCompletion),
        Err(e) => return Err(e.into()),
    };
    Ok(Completion {
        points: pts.map_points(|p| transform.invert(p)),
        grid,
        trace,
        transform,
    })
}

/// Completes a partial point cloud.
pub fn complete(partial: &PointCloud, model: &Backbone, cfg: &SamplerConfig) -> Result<Completion, SamplerError> {
    cfg.validate()?;
    let (obs, transform) = observe(partial, model, cfg.frame)?;
    let (grid, trace) = complete_observation(model, &obs, cfg)?;
    finish(grid, trace, transform, cfg.threshold)
}

/// Baseline loop on an observation: Euler steps with the encoded partial
/// re-noised to the current level and pasted into observed latent cells.
pub fn naive_replacement_observation(
    model: &Backbone,
    obs: &Observation,
    cfg: &SamplerConfig,
) -> Result<(OccupancyGrid, Vec<StepTrace>), SamplerError> {
    cfg.validate()?;
    let mut rng = stream(cfg, "complete");
    let len = model.config.latent_len();
    let mut x = latent_from(model, draw(&mut rng, len, cfg.zero_noise))?;
    let known = model.encode(&obs.grid)?;
    let dt = cfg.dt();
    let mut trace = Vec::with_capacity(cfg.steps);
    for t in cfg.schedule() {
        check_finite(&x, t)?;
        let v = model.velocity(&x, t, &cfg.condition)?;
        x.axpy(-dt, &v)?;
        let t_next = next_time(t, dt);
        let eps = draw(&mut rng, len, cfg.zero_noise);
        let data = x
            .data()
            .iter()
            .zip(known.data())
            .zip(obs.latent_weight.iter().zip(&eps))
            .map(|((&x, &k), (&m, &e))| m * ((1.0 - t_next) * k + t_next * e) + (1.0 - m) * x)
            .collect();
        x = latent_from(model, data)?;
        trace.push(StepTrace {
            t,
            x0_norm: x.norm(),
            align_loss: None,
            grad_norm: None,
            masked_iou: None,
        });
    }
    Ok((model.decode(&x)?, trace))
}

/// Naive latent-replacement baseline on a partial point cloud.
pub fn naive_latent_replacement(
    partial: &PointCloud,
    model: &Backbone,
    cfg: &SamplerConfig,
) -> Result<Completion, SamplerError> {
    cfg.validate()?;
    let (obs, transform) = observe(partial, model, cfg.frame)?;
    let (grid, trace) = naive_replacement_observation(model, &obs, cfg)?;
    finish(grid, trace, transform, cfg.threshold)
}

/// Dispatches to the baseline or the replacement/alignment loop.
pub fn run_method(
    method: Method,
    partial: &PointCloud,
    model: &Backbone,
    base: &SamplerConfig,
) -> Result<Completion, SamplerError> {
    let cfg = base.for_method(method);
    match method {
        Method::Baseline => naive_latent_replacement(partial, model, &cfg),
        _ => complete(partial, model, &cfg),
    }
}
