//! Procedural training corpus for the backbone.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::GenError;
use crate::geometry::{voxelize, OccupancyGrid};
use crate::partiality::{corpus_specs, gen_shape};

/// Surface samples drawn per corpus shape before voxelization.
pub const CORPUS_SAMPLES: usize = 16384;

#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub grid: OccupancyGrid,
    /// Family label, `None` for the empty grids mixed into the VAE corpus.
    pub label: Option<usize>,
}

/// `count` voxelized shapes from `stream`, plus `empty` all-zero grids at the end.
pub fn training_corpus(
    count: usize,
    empty: usize,
    seed: u64,
    stream: &str,
    res: usize,
) -> Result<Vec<CorpusItem>, GenError> {
    let specs = corpus_specs(count, seed, stream);
    let mut items = specs
        .par_iter()
        .map(|spec| {
            let pc = gen_shape(spec, CORPUS_SAMPLES).map_err(|e| GenError::BadConfig(e.to_string()))?;
            Ok(CorpusItem {
                grid: voxelize(&pc, res)?,
                label: Some(spec.params.family().label()),
            })
        })
        .collect::<Result<Vec<_>, GenError>>()?;
    items.extend((0..empty).map(|_| CorpusItem {
        grid: OccupancyGrid::empty(res),
        label: None,
    }));
    Ok(items)
}

/// SHA-256 over labels and grid contents.
pub fn corpus_fingerprint(items: &[CorpusItem]) -> String {
    let mut h = Sha256::new();
    for item in items {
        h.update((item.label.unwrap_or(0) as u64).to_le_bytes());
        h.update((item.grid.resolution() as u64).to_le_bytes());
        for v in item.grid.values() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
