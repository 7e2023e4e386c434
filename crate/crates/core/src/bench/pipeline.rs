//! Checkpoint production: procedural corpus, VAE stage, flow stage.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{io_err, BenchError};
use crate::genmodel::{
    corpus_fingerprint, encode_corpus, fit_latent_normalization, load_checkpoint, save_checkpoint, train_flow,
    train_vae, Backbone, BackboneConfig, CheckpointManifest, CorpusItem, FlowTrainConfig, GenError, TrainStats,
    VaeTrainConfig, CHECKPOINT_MANIFEST,
};

/// Procedural training corpus description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub shapes: usize,
    /// All-empty grids appended for the VAE stage.
    pub empty: usize,
    pub seed: u64,
    pub stream: String,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            shapes: 500,
            empty: 5,
            seed: 0,
            stream: "train".into(),
        }
    }
}

impl CorpusSpec {
    pub fn build(&self, res: usize) -> Result<Vec<CorpusItem>, GenError> {
        crate::genmodel::training_corpus(self.shapes, self.empty, self.seed, &self.stream, res)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub backbone: BackboneConfig,
    pub corpus: CorpusSpec,
    pub vae: VaeTrainConfig,
    pub flow: FlowTrainConfig,
}

/// Stored in the checkpoint manifest's `training` field.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub corpus: CorpusSpec,
    pub vae: Option<VaeTrainConfig>,
    pub flow: Option<FlowTrainConfig>,
    pub vae_stats: Option<TrainStats>,
    pub flow_stats: Option<TrainStats>,
    /// Wall-clock seconds per stage.
    #[serde(default)]
    pub vae_seconds: Option<f64>,
    #[serde(default)]
    pub flow_seconds: Option<f64>,
}

impl TrainingRecord {
    pub fn from_manifest(manifest: &CheckpointManifest) -> Option<Self> {
        serde_json::from_value(manifest.training.clone()).ok()
    }
}

fn manifest_for(cfg: &BackboneConfig, corpus: &[CorpusItem], seed: u64, record: &TrainingRecord) -> CheckpointManifest {
    CheckpointManifest {
        version: 1,
        config: cfg.clone(),
        tensors: vec![],
        corpus_fingerprint: Some(corpus_fingerprint(corpus)),
        seed: Some(seed),
        training: serde_json::to_value(record).expect("record serializes"),
    }
}

/// Trains the VAE and fits latent normalization; the checkpoint has no flow weights.
pub fn train_vae_stage(plan: &TrainPlan, out: &Path) -> Result<Backbone, GenError> {
    let start = Instant::now();
    let corpus = plan.corpus.build(plan.backbone.grid_res)?;
    info!("vae corpus: {} grids", corpus.len());
    let (mut params, stats) = train_vae(&corpus, &plan.backbone, &plan.vae)?;
    fit_latent_normalization(&mut params, &plan.backbone, &corpus)?;
    let params = params.quantized_f32();
    let record = TrainingRecord {
        corpus: plan.corpus.clone(),
        vae: Some(plan.vae.clone()),
        flow: None,
        vae_stats: Some(stats),
        flow_stats: None,
        vae_seconds: Some(start.elapsed().as_secs_f64()),
        flow_seconds: None,
    };
    save_checkpoint(out, &params, manifest_for(&plan.backbone, &corpus, plan.vae.seed, &record))?;
    Backbone::new(plan.backbone.clone(), params)
}

/// Trains the flow on latents of the corpus recorded in the VAE checkpoint at `vae_dir`.
pub fn train_flow_stage(vae_dir: &Path, flow: &FlowTrainConfig, out: &Path) -> Result<Backbone, GenError> {
    let start = Instant::now();
    let (params, manifest) = load_checkpoint(vae_dir)?;
    let mut record = TrainingRecord::from_manifest(&manifest)
        .ok_or_else(|| GenError::BadConfig("VAE checkpoint lacks a training record".into()))?;
    let cfg = manifest.config.clone();
    let vae = Backbone::new(cfg.clone(), params)?;
    let corpus = record.corpus.build(cfg.grid_res)?;
    if Some(corpus_fingerprint(&corpus)) != manifest.corpus_fingerprint {
        return Err(GenError::BadConfig("regenerated corpus does not match the VAE checkpoint".into()));
    }
    let latents = encode_corpus(&vae, &corpus)?;
    info!("flow corpus: {} latents", latents.len());
    let (fp, stats) = train_flow(&latents, &cfg, flow)?;
    let mut all = vae.params.clone();
    all.merge(&fp.quantized_f32());
    record.flow = Some(flow.clone());
    record.flow_stats = Some(stats);
    record.flow_seconds = Some(start.elapsed().as_secs_f64());
    save_checkpoint(out, &all, manifest_for(&cfg, &corpus, flow.seed, &record))?;
    Backbone::new(cfg, all)
}

/// Both stages; the VAE-only checkpoint goes to `out/vae`, the full one to `out`.
pub fn train_backbone(plan: &TrainPlan, out: &Path) -> Result<Backbone, GenError> {
    let vae_dir = out.join("vae");
    train_vae_stage(plan, &vae_dir)?;
    train_flow_stage(&vae_dir, &plan.flow, out)
}

/// SHA-256 over the checkpoint manifest and every tensor file it lists, in name order.
pub fn checkpoint_hash(dir: &Path) -> Result<String, BenchError> {
    let manifest_path = dir.join(CHECKPOINT_MANIFEST);
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.path())
        .collect();
    if !entries.contains(&manifest_path) {
        return Err(BenchError::MissingPath(manifest_path.display().to_string()));
    }
    entries.sort();
    let mut h = Sha256::new();
    for path in entries {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
