//! Toy latent generative backbone: occupancy VAE plus a flow-matching
//! velocity model with classifier-free guidance.
//!
//! Latents are `[n, n, n, c]` arrays; occupancy grids enter and leave the
//! networks as `[N, N, N, 1]` arrays in the grid's own index order.

mod data;
mod params;
mod train;

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use data::{corpus_fingerprint, training_corpus, CorpusItem};
pub use params::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamSet, TensorEntry, CHECKPOINT_MANIFEST};
pub use train::{
    encode_corpus, fit_latent_normalization, init_flow, init_vae, train_flow, train_vae, EpochStats,
    FlowTrainConfig, TrainStats, VaeTrainConfig,
};

use crate::diffcore::{Array, DiffError, Tape, Var};
use crate::geometry::io::IoError;
use crate::geometry::{GeometryError, OccupancyGrid};
use crate::rng::{normal_vec, rng_from};

/// Latent feature block `[n, n, n, c]`.
pub type Latent = Array;

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("grid resolution {actual} does not match the model's {expected}")]
    Resolution { expected: usize, actual: usize },
    #[error("latent shape {actual:?} does not match the model's {expected:?}")]
    LatentShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("label {label} outside 1..={max}")]
    UnknownLabel { label: usize, max: usize },
    #[error("t = {0} outside [0, 1]")]
    BadTime(f64),
    #[error("guidance scale {0} must be finite and nonnegative")]
    BadGuidance(f64),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("{stage}: non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { stage: &'static str, epoch: usize, step: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("invalid checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("step count must be at least 1")]
    NoSteps,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Sizes of the backbone networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub grid_res: usize,
    pub latent_res: usize,
    pub channels: usize,
    /// Channel widths of the two strided encoder convolutions.
    pub enc_widths: [usize; 2],
    /// Channel widths of the decoder convolutions at `n` and `2n`.
    pub dec_widths: [usize; 2],
    pub flow_hidden: usize,
    pub time_features: usize,
    /// Number of category labels (labels are `1..=labels`; `0` is the null condition).
    pub labels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            grid_res: 32,
            latent_res: 8,
            channels: 8,
            enc_widths: [16, 32],
            dec_widths: [32, 16],
            flow_hidden: 32,
            time_features: 16,
            labels: 5,
        }
    }
}

impl BackboneConfig {
    pub fn latent_shape(&self) -> Vec<usize> {
        vec![self.latent_res, self.latent_res, self.latent_res, self.channels]
    }

    pub fn latent_len(&self) -> usize {
        self.latent_res.pow(3) * self.channels
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.grid_res != 4 * self.latent_res || self.latent_res == 0 {
            return Err(GenError::BadConfig(format!(
                "grid resolution {} must be 4x the latent resolution {}",
                self.grid_res, self.latent_res
            )));
        }
        let widths = [self.channels, self.flow_hidden, self.time_features];
        if widths.iter().chain(&self.enc_widths).chain(&self.dec_widths).any(|&w| w == 0) {
            return Err(GenError::BadConfig("zero-width layer".into()));
        }
        Ok(())
    }
}

/// Conditioning for the velocity model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    /// Category label, or `None` for unconditional generation.
    pub label: Option<usize>,
    /// Classifier-free guidance scale `w`.
    pub guidance: f64,
}

impl Condition {
    pub const DEFAULT_GUIDANCE: f64 = 3.0;

    pub fn unconditional() -> Self {
        Self {
            label: None,
            guidance: Self::DEFAULT_GUIDANCE,
        }
    }

    pub fn label(label: usize) -> Self {
        Self {
            label: Some(label),
            guidance: Self::DEFAULT_GUIDANCE,
        }
    }

    pub fn with_guidance(self, guidance: f64) -> Self {
        Self { guidance, ..self }
    }
}

/// Sinusoidal features of `t`, frequencies spaced geometrically from 1 to 100.
pub fn time_features(t: f64, dims: usize) -> Vec<f64> {
    let half = dims / 2;
    let mut out = Vec::with_capacity(dims);
    for k in 0..half {
        let f = if half > 1 {
            100f64.powf(k as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out.push((PI * f * t).sin());
        out.push((PI * f * t).cos());
    }
    out.resize(dims, t);
    out
}

/// How parameters are placed on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bind {
    /// Differentiable leaves, for training.
    Trainable,
    /// Constants, so only data-path gradients are formed.
    Frozen,
}

pub(crate) struct Binder<'a> {
    params: &'a ParamSet,
    mode: Bind,
    pub bound: Vec<(String, Var)>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ParamSet, mode: Bind) -> Self {
        Self {
            params,
            mode,
            bound: Vec::new(),
        }
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var, GenError> {
        if let Some((_, v)) = self.bound.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let value = self.params.get(name)?.clone();
        let v = match self.mode {
            Bind::Trainable => tape.input_shared(value),
            Bind::Frozen => tape.constant_shared(value),
        };
        self.bound.push((name.to_string(), v));
        Ok(v)
    }

    fn conv(&mut self, tape: &mut Tape, name: &str, x: Var, stride: usize) -> Result<Var, GenError> {
        let w = self.var(tape, &format!("{name}.w"))?;
        let b = self.var(tape, &format!("{name}.b"))?;
        Ok(tape.conv3d(x, w, b, stride)?)
    }
}

/// Encoder head outputs: posterior mean (normalized latent) and log-variance.
pub(crate) fn encoder_graph(b: &mut Binder, tape: &mut Tape, x: Var) -> Result<(Var, Var), GenError> {
    let h = b.conv(tape, "enc.0", x, 2)?;
    let h = tape.silu(h)?;
    let h = b.conv(tape, "enc.1", h, 2)?;
    let h = tape.silu(h)?;
    let mu = b.conv(tape, "enc.mu", h, 1)?;
    let logvar = b.conv(tape, "enc.logvar", h, 1)?;
    Ok((mu, logvar))
}

/// Maps a raw encoder mean to the normalized latent space, when fitted.
pub(crate) fn normalize_graph(b: &mut Binder, tape: &mut Tape, mu: Var) -> Result<Var, GenError> {
    if b.params.contains("latent.to_norm.w") {
        b.conv(tape, "latent.to_norm", mu, 1)
    } else {
        Ok(mu)
    }
}

/// Decoder logits `[N, N, N, 1]` for a normalized latent.
pub(crate) fn decoder_logits(b: &mut Binder, tape: &mut Tape, z: Var) -> Result<Var, GenError> {
    let z = if b.params.contains("latent.from_norm.w") {
        b.conv(tape, "latent.from_norm", z, 1)?
    } else {
        z
    };
    let h = b.conv(tape, "dec.0", z, 1)?;
    let h = tape.silu(h)?;
    let h = tape.upsample(h, 2)?;
    let h = b.conv(tape, "dec.1", h, 1)?;
    let h = tape.silu(h)?;
    let h = b.conv(tape, "dec.head", h, 1)?;
    Ok(tape.depth_to_space(h, 2)?)
}

/// Velocity field for one condition row (`0` = null).
pub(crate) fn flow_graph(
    b: &mut Binder,
    tape: &mut Tape,
    x: Var,
    t: f64,
    row: usize,
    cfg: &BackboneConfig,
) -> Result<Var, GenError> {
    let feats = tape.constant(Array::new(vec![1, cfg.time_features], time_features(t, cfg.time_features))?);
    // row 0 is the null embedding; label rows are offsets added to it
    let mut onehot = vec![0.0; cfg.labels + 1];
    onehot[0] = 1.0;
    onehot[row] = 1.0;
    let onehot = tape.constant(Array::new(vec![1, cfg.labels + 1], onehot)?);
    let tw = b.var(tape, "flow.time.w")?;
    let tb = b.var(tape, "flow.time.b")?;
    let table = b.var(tape, "flow.cond")?;
    let te = tape.matmul(feats, tw)?;
    let ce = tape.matmul(onehot, table)?;
    let emb = tape.add(te, ce)?;
    let emb = tape.reshape(emb, vec![cfg.flow_hidden])?;
    let emb = tape.add(emb, tb)?;
    let h = b.conv(tape, "flow.in", x, 1)?;
    let h = tape.add_channel(h, emb)?;
    let h = tape.silu(h)?;
    let h = b.conv(tape, "flow.mid", h, 1)?;
    let h = tape.add_channel(h, emb)?;
    let h = tape.silu(h)?;
    b.conv(tape, "flow.out", h, 1)
}

/// Trained encoder, decoder and velocity model.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamSet,
}

impl Backbone {
    pub fn new(config: BackboneConfig, params: ParamSet) -> Result<Self, GenError> {
        config.validate()?;
        Ok(Self { config, params })
    }

    /// Untrained backbone with freshly initialized weights.
    pub fn random(config: BackboneConfig, seed: u64) -> Result<Self, GenError> {
        let mut params = init_vae(&config, seed);
        params.merge(&init_flow(&config, seed));
        Self::new(config, params)
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointManifest), GenError> {
        let (params, manifest) = load_checkpoint(dir)?;
        Ok((Self::new(manifest.config.clone(), params)?, manifest))
    }

    pub fn grid_array(&self, grid: &OccupancyGrid) -> Result<Array, GenError> {
        let n = self.config.grid_res;
        if grid.resolution() != n {
            return Err(GenError::Resolution {
                expected: n,
                actual: grid.resolution(),
            });
        }
        Ok(Array::new(vec![n, n, n, 1], grid.values().to_vec())?)
    }

    pub fn check_latent(&self, x: &Array) -> Result<(), GenError> {
        let expected = self.config.latent_shape();
        if x.shape() != expected.as_slice() {
            return Err(GenError::LatentShape {
                expected,
                actual: x.shape().to_vec(),
            });
        }
        if !x.all_finite() {
            return Err(DiffError::NonFinite("latent").into());
        }
        Ok(())
    }

    /// Deterministic encoding (posterior mean).
    pub fn encode(&self, grid: &OccupancyGrid) -> Result<Latent, GenError> {
        let input = self.grid_array(grid)?;
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, Bind::Frozen);
        let x = tape.constant(input);
        let (mu, _) = encoder_graph(&mut b, &mut tape, x)?;
        let z = normalize_graph(&mut b, &mut tape, mu)?;
        Ok(tape.value(z).clone())
    }

    /// Occupancy probabilities `[N, N, N, 1]` recorded on `tape` for latent `z`.
    pub fn decode_on_tape(&self, tape: &mut Tape, z: Var) -> Result<Var, GenError> {
        self.check_latent(tape.try_value(z)?)?;
        let mut b = Binder::new(&self.params, Bind::Frozen);
        let logits = decoder_logits(&mut b, tape, z)?;
        Ok(tape.logistic(logits)?)
    }

    pub fn decode(&self, z: &Latent) -> Result<OccupancyGrid, GenError> {
        let mut tape = Tape::new();
        let v = tape.constant(z.clone());
        let p = self.decode_on_tape(&mut tape, v)?;
        let n = self.config.grid_res;
        Ok(OccupancyGrid::from_values(n, tape.value(p).data().to_vec())?)
    }

    fn velocity_row(&self, x: &Latent, t: f64, row: usize) -> Result<Latent, GenError> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, Bind::Frozen);
        let xv = tape.constant(x.clone());
        let v = flow_graph(&mut b, &mut tape, xv, t, row, &self.config)?;
        Ok(tape.value(v).clone())
    }

    /// Guided velocity `v_null + w (v_label - v_null)`; a single evaluation
    /// when the condition is unconditional, `w = 0` or `w = 1`.
    pub fn velocity(&self, x: &Latent, t: f64, cond: &Condition) -> Result<Latent, GenError> {
        self.check_latent(x)?;
        if !(0.0..=1.0).contains(&t) {
            return Err(GenError::BadTime(t));
        }
        let w = cond.guidance;
        if !(w.is_finite() && w >= 0.0) {
            return Err(GenError::BadGuidance(w));
        }
        let Some(label) = cond.label else {
            return self.velocity_row(x, t, 0);
        };
        if label == 0 || label > self.config.labels {
            return Err(GenError::UnknownLabel {
                label,
                max: self.config.labels,
            });
        }
        if w == 0.0 {
            return self.velocity_row(x, t, 0);
        }
        if w == 1.0 {
            return self.velocity_row(x, t, label);
        }
        let v_null = self.velocity_row(x, t, 0)?;
        let v_label = self.velocity_row(x, t, label)?;
        Ok(v_null.zip_map(&v_label, "cfg", |n, l| n + w * (l - n))?)
    }

    /// Euler integration from `x1` at `t = 1` down to `t = 0`.
    pub fn integrate(&self, x1: Latent, steps: usize, cond: &Condition) -> Result<Latent, GenError> {
        if steps == 0 {
            return Err(GenError::NoSteps);
        }
        let dt = 1.0 / steps as f64;
        let mut x = x1;
        for i in 0..steps {
            let t = 1.0 - i as f64 * dt;
            let v = self.velocity(&x, t, cond)?;
            x.axpy(-dt, &v)?;
        }
        Ok(x)
    }

    /// Samples a shape from noise drawn with `seed` and returns decoded probabilities.
    pub fn sample_unconditional(&self, steps: usize, seed: u64) -> Result<OccupancyGrid, GenError> {
        self.sample(steps, seed, &Condition::unconditional())
    }

    pub fn sample(&self, steps: usize, seed: u64, cond: &Condition) -> Result<OccupancyGrid, GenError> {
        let mut rng = rng_from(seed);
        let x1 = Array::new(self.config.latent_shape(), normal_vec(&mut rng, self.config.latent_len()))?;
        let x0 = self.integrate(x1, steps, cond)?;
        self.decode(&x0)
    }
}
