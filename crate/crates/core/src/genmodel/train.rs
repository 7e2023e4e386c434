//! Training loops for the VAE and the velocity model.

use std::f64::consts::PI;
use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::params::{init_conv, init_matrix, seeded};
use super::{
    decoder_logits, encoder_graph, flow_graph, Backbone, BackboneConfig, Bind, Binder, CorpusItem, GenError, Latent,
    ParamSet,
};
use crate::diffcore::{Adam, Array, DiffError, Tape};
use crate::rng::{derive_seed, normal_vec, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 8,
            lr: 2e-3,
            beta: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the label with the null condition.
    pub p_drop: f64,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch: 16,
            lr: 2e-3,
            p_drop: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean objective over the epoch.
    pub loss: f64,
    /// Reconstruction part (VAE) or regression loss (flow).
    pub data: f64,
    /// Mean KL divergence, unweighted; zero for the flow.
    pub kl: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub epochs: Vec<EpochStats>,
}

fn check_common(epochs: usize, batch: usize, lr: f64) -> Result<(), GenError> {
    if epochs == 0 || batch == 0 {
        return Err(GenError::BadConfig("epochs and batch must be positive".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(GenError::BadConfig(format!("learning rate {lr}")));
    }
    Ok(())
}

/// Fresh encoder and decoder weights.
pub fn init_vae(cfg: &BackboneConfig, seed: u64) -> ParamSet {
    let mut rng = seeded(derive_seed(seed, &[tag("init-vae")]));
    let mut p = ParamSet::new();
    let [e0, e1] = cfg.enc_widths;
    let [d0, d1] = cfg.dec_widths;
    init_conv(&mut p, &mut rng, "enc.0", 3, 1, e0);
    init_conv(&mut p, &mut rng, "enc.1", 3, e0, e1);
    init_conv(&mut p, &mut rng, "enc.mu", 1, e1, cfg.channels);
    init_conv(&mut p, &mut rng, "enc.logvar", 1, e1, cfg.channels);
    init_conv(&mut p, &mut rng, "dec.0", 3, cfg.channels, d0);
    init_conv(&mut p, &mut rng, "dec.1", 3, d0, d1);
    init_conv(&mut p, &mut rng, "dec.head", 3, d1, 8);
    p
}

/// Fresh velocity-model weights, including the condition table (row 0 is null).
pub fn init_flow(cfg: &BackboneConfig, seed: u64) -> ParamSet {
    let mut rng = seeded(derive_seed(seed, &[tag("init-flow")]));
    let mut p = ParamSet::new();
    let h = cfg.flow_hidden;
    init_conv(&mut p, &mut rng, "flow.in", 3, cfg.channels, h);
    init_conv(&mut p, &mut rng, "flow.mid", 3, h, h);
    init_conv(&mut p, &mut rng, "flow.out", 3, h, cfg.channels);
    init_matrix(&mut p, &mut rng, "flow.time.w", cfg.time_features, h, (1.0 / cfg.time_features as f64).sqrt());
    p.insert("flow.time.b", Array::zeros(&[h]));
    init_matrix(&mut p, &mut rng, "flow.cond", 1, h, 0.1);
    let mut table = p.get("flow.cond").expect("just inserted").data().to_vec();
    table.resize((cfg.labels + 1) * h, 0.0);
    p.insert("flow.cond", Array::new(vec![cfg.labels + 1, h], table).expect("table shape"));
    p
}

/// Trainable subset of a parameter set, flattened for the optimizer.
struct Flat {
    names: Vec<String>,
    values: Vec<Array>,
}

impl Flat {
    fn new(p: &ParamSet, prefix: &str) -> Result<Self, GenError> {
        let names: Vec<String> = p.with_prefix(prefix).map(str::to_string).collect();
        let values = names
            .iter()
            .map(|n| p.get(n).map(|a| a.as_ref().clone()))
            .collect::<Result<_, _>>()?;
        Ok(Self { names, values })
    }

    fn write_back(&self, p: &mut ParamSet) {
        for (n, v) in self.names.iter().zip(&self.values) {
            p.insert(n.clone(), v.clone());
        }
    }

    fn zero_grads(&self) -> Vec<Array> {
        self.values.iter().map(Array::zeros_like).collect()
    }
}

fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    0.5 * base * (1.0 + (PI * epoch as f64 / epochs as f64).cos())
}

fn accumulate(
    grads: &mut [Array],
    flat: &Flat,
    binder: &Binder,
    tape: &Tape,
    loss: crate::diffcore::Var,
    scale: f64,
    at: (&'static str, usize, usize),
) -> Result<(), GenError> {
    let g = tape.backward(loss).map_err(|e| match e {
        DiffError::NonFinite(_) => GenError::NonFiniteLoss {
            stage: at.0,
            epoch: at.1,
            step: at.2,
        },
        other => other.into(),
    })?;
    for (acc, name) in grads.iter_mut().zip(&flat.names) {
        if let Some((_, v)) = binder.bound.iter().find(|(n, _)| n == name) {
            if let Some(gv) = g.get(*v) {
                acc.axpy(scale, gv)?;
            }
        }
    }
    Ok(())
}

/// Trains encoder and decoder on reconstruction BCE plus `beta` times the KL term.
/// Returns the trained parameters (without latent normalization) and per-epoch stats.
pub fn train_vae(
    corpus: &[CorpusItem],
    cfg: &BackboneConfig,
    tc: &VaeTrainConfig,
) -> Result<(ParamSet, TrainStats), GenError> {
    cfg.validate()?;
    check_common(tc.epochs, tc.batch, tc.lr)?;
    if !(tc.beta >= 0.0 && tc.beta.is_finite()) {
        return Err(GenError::BadConfig(format!("beta {}", tc.beta)));
    }
    if corpus.is_empty() {
        return Err(GenError::EmptyCorpus);
    }
    let n = cfg.grid_res;
    let inputs: Vec<Arc<Array>> = corpus
        .iter()
        .map(|item| {
            if item.grid.resolution() != n {
                return Err(GenError::Resolution {
                    expected: n,
                    actual: item.grid.resolution(),
                });
            }
            Ok(Arc::new(Array::new(vec![n, n, n, 1], item.grid.values().to_vec())?))
        })
        .collect::<Result<_, GenError>>()?;

    let mut params = init_vae(cfg, tc.seed);
    let mut flat = Flat::new(&params, "")?;
    let mut opt = Adam::new(tc.lr, &flat.values);
    let mut rng = seeded(derive_seed(tc.seed, &[tag("train-vae")]));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut stats = TrainStats::default();
    let latent_len = cfg.latent_len();

    for epoch in 0..tc.epochs {
        opt.lr = cosine_lr(tc.lr, epoch, tc.epochs);
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_rec, mut sum_kl) = (0.0, 0.0, 0.0);
        for (step, chunk) in order.chunks(tc.batch).enumerate() {
            let mut grads = flat.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let mut tape = Tape::new();
                let mut b = Binder::new(&params, Bind::Trainable);
                let x = tape.constant_shared(inputs[idx].clone());
                let (mu, logvar) = encoder_graph(&mut b, &mut tape, x)?;
                let eps = tape.constant(Array::new(cfg.latent_shape(), normal_vec(&mut rng, latent_len))?);
                let half = tape.scale(logvar, 0.5)?;
                let std = tape.exp(half)?;
                let noise = tape.mul(std, eps)?;
                let z = tape.add(mu, noise)?;
                let logits = decoder_logits(&mut b, &mut tape, z)?;
                let p = tape.logistic(logits)?;
                let rec = tape.bce(p, x, None)?;
                // 0.5 * mean(mu^2 + exp(logvar) - logvar - 1)
                let mu2 = tape.mul(mu, mu)?;
                let var = tape.exp(logvar)?;
                let k = tape.add(mu2, var)?;
                let k = tape.sub(k, logvar)?;
                let k = tape.add_scalar(k, -1.0)?;
                let k = tape.mean(k)?;
                let kl = tape.scale(k, 0.5)?;
                let wkl = tape.scale(kl, tc.beta)?;
                let loss = tape.add(rec, wkl)?;
                let lv = tape.value(loss).data()[0];
                if !lv.is_finite() {
                    return Err(GenError::NonFiniteLoss {
                        stage: "vae",
                        epoch,
                        step,
                    });
                }
                sum_loss += lv;
                sum_rec += tape.value(rec).data()[0];
                sum_kl += tape.value(kl).data()[0];
                accumulate(&mut grads, &flat, &b, &tape, loss, scale, ("vae", epoch, step))?;
            }
            opt.step(&mut flat.values, &grads)?;
            flat.write_back(&mut params);
        }
        let m = corpus.len() as f64;
        let e = EpochStats {
            epoch,
            loss: sum_loss / m,
            data: sum_rec / m,
            kl: sum_kl / m,
        };
        info!("vae epoch {epoch}: loss {:.5} rec {:.5} kl {:.4}", e.loss, e.data, e.kl);
        stats.epochs.push(e);
    }
    Ok((params, stats))
}

fn raw_mean(params: &ParamSet, cfg: &BackboneConfig, item: &CorpusItem) -> Result<Array, GenError> {
    let n = cfg.grid_res;
    let mut tape = Tape::new();
    let mut b = Binder::new(params, Bind::Frozen);
    let x = tape.constant(Array::new(vec![n, n, n, 1], item.grid.values().to_vec())?);
    let (mu, _) = encoder_graph(&mut b, &mut tape, x)?;
    Ok(tape.value(mu).clone())
}

/// Adds per-channel standardization of the encoder mean, fitted on the labeled
/// corpus items, as diagonal 1x1 convolutions `latent.to_norm` / `latent.from_norm`.
pub fn fit_latent_normalization(
    params: &mut ParamSet,
    cfg: &BackboneConfig,
    corpus: &[CorpusItem],
) -> Result<(), GenError> {
    let c = cfg.channels;
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let mut count = 0usize;
    for item in corpus.iter().filter(|i| i.label.is_some()) {
        let mu = raw_mean(params, cfg, item)?;
        for cell in mu.data().chunks(c) {
            for (k, &v) in cell.iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        count += mu.len() / c;
    }
    if count == 0 {
        return Err(GenError::EmptyCorpus);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let std: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / count as f64 - m * m).max(1e-12).sqrt())
        .collect();
    let diag = |d: &[f64]| {
        let mut w = vec![0.0; c * c];
        for k in 0..c {
            w[k * c + k] = d[k];
        }
        Array::new(vec![1, 1, 1, c, c], w)
    };
    let inv: Vec<f64> = std.iter().map(|s| 1.0 / s).collect();
    params.insert("latent.to_norm.w", diag(&inv)?);
    params.insert(
        "latent.to_norm.b",
        Array::new(vec![c], mean.iter().zip(&std).map(|(m, s)| -m / s).collect())?,
    );
    params.insert("latent.from_norm.w", diag(&std)?);
    params.insert("latent.from_norm.b", Array::new(vec![c], mean)?);
    Ok(())
}

/// Encodes every labeled corpus item with the deterministic encoder.
pub fn encode_corpus(model: &Backbone, corpus: &[CorpusItem]) -> Result<Vec<(Latent, usize)>, GenError> {
    corpus
        .iter()
        .filter_map(|item| item.label.map(|l| (item, l)))
        .map(|(item, l)| Ok((model.encode(&item.grid)?, l)))
        .collect()
}

/// Flow-matching regression of `G(x_t, t, cond)` onto `x1 - x0` along
/// `x_t = (1 - t) x0 + t x1`, with label dropout for guidance.
pub fn train_flow(
    latents: &[(Latent, usize)],
    cfg: &BackboneConfig,
    tc: &FlowTrainConfig,
) -> Result<(ParamSet, TrainStats), GenError> {
    cfg.validate()?;
    check_common(tc.epochs, tc.batch, tc.lr)?;
    if !(0.0..=1.0).contains(&tc.p_drop) {
        return Err(GenError::BadConfig(format!("p_drop {}", tc.p_drop)));
    }
    if latents.is_empty() {
        return Err(GenError::EmptyCorpus);
    }
    let shape = cfg.latent_shape();
    for (x, label) in latents {
        if x.shape() != shape.as_slice() {
            return Err(GenError::LatentShape {
                expected: shape.clone(),
                actual: x.shape().to_vec(),
            });
        }
        if *label == 0 || *label > cfg.labels {
            return Err(GenError::UnknownLabel {
                label: *label,
                max: cfg.labels,
            });
        }
    }

    let mut params = init_flow(cfg, tc.seed);
    let mut flat = Flat::new(&params, "")?;
    let mut opt = Adam::new(tc.lr, &flat.values);
    let mut rng = seeded(derive_seed(tc.seed, &[tag("train-flow")]));
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut stats = TrainStats::default();
    let len = cfg.latent_len();

    for epoch in 0..tc.epochs {
        opt.lr = cosine_lr(tc.lr, epoch, tc.epochs);
        order.shuffle(&mut rng);
        let mut sum_loss = 0.0;
        for (step, chunk) in order.chunks(tc.batch).enumerate() {
            let mut grads = flat.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let (x0, label) = &latents[idx];
                let x1 = normal_vec(&mut rng, len);
                let t: f64 = rng.random();
                let row = if rng.random::<f64>() < tc.p_drop { 0 } else { *label };
                let xt: Vec<f64> = x0.data().iter().zip(&x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
                let target: Vec<f64> = x0.data().iter().zip(&x1).map(|(a, b)| b - a).collect();
                let mut tape = Tape::new();
                let mut b = Binder::new(&params, Bind::Trainable);
                let xv = tape.constant(Array::new(shape.clone(), xt)?);
                let tv = tape.constant(Array::new(shape.clone(), target)?);
                let v = flow_graph(&mut b, &mut tape, xv, t, row, cfg)?;
                let d = tape.sub(v, tv)?;
                let d2 = tape.mul(d, d)?;
                let loss = tape.mean(d2)?;
                let lv = tape.value(loss).data()[0];
                if !lv.is_finite() {
                    return Err(GenError::NonFiniteLoss {
                        stage: "flow",
                        epoch,
                        step,
                    });
                }
                sum_loss += lv;
                accumulate(&mut grads, &flat, &b, &tape, loss, scale, ("flow", epoch, step))?;
            }
            opt.step(&mut flat.values, &grads)?;
            flat.write_back(&mut params);
        }
        let loss = sum_loss / latents.len() as f64;
        info!("flow epoch {epoch}: loss {loss:.5}");
        stats.epochs.push(EpochStats {
            epoch,
            loss,
            data: loss,
            kl: 0.0,
        });
    }
    Ok((params, stats))
}
