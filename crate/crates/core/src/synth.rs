//! Synthetic witness benchmark: Gaussian bags where positive bags hide a few
//! mean-shifted instances.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{write_manifest, Manifest, SlideRecord};
use crate::error::{Error, Result};
use crate::fbag::{write_bag, FeatureBag};
use crate::tiler::{PatchCoord, TRANSFORMER_PATCH_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub bags: usize,
    pub instances: usize,
    pub dim: usize,
    /// Fraction of a positive bag's instances replaced by witnesses.
    pub witness_frac: f64,
    /// Added to every dimension of a witness.
    pub shift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { bags: 200, instances: 64, dim: 32, witness_frac: 0.05, shift: 1.0, seed: 42 }
    }
}

impl SynthConfig {
    pub fn witnesses_per_bag(&self) -> usize {
        ((self.instances as f64 * self.witness_frac).round() as usize).clamp(1, self.instances)
    }
}

/// Patches laid out row-major on a square grid of `TRANSFORMER_PATCH_SIZE` cells.
pub fn grid_coords(n: usize) -> Vec<PatchCoord> {
    let side = (n as f64).sqrt().ceil().max(1.0) as usize;
    (0..n)
        .map(|i| {
            let p = TRANSFORMER_PATCH_SIZE;
            PatchCoord::new((i % side) as u32 * p, (i / side) as u32 * p, p)
        })
        .collect()
}

/// Alternating labels starting with 0 so both classes are equally sized.
pub fn witness_bags(cfg: &SynthConfig) -> Result<(Vec<FeatureBag>, Vec<u8>)> {
    if cfg.bags == 0 || cfg.instances == 0 || cfg.dim == 0 {
        return Err(Error::invalid("synthetic benchmark needs positive bags, instances and dim"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let witnesses = cfg.witnesses_per_bag();
    let mut bags = Vec::with_capacity(cfg.bags);
    let mut labels = Vec::with_capacity(cfg.bags);
    for b in 0..cfg.bags {
        let label = (b % 2) as u8;
        let mut x = Array2::from_shape_fn((cfg.instances, cfg.dim), |_| rng.sample::<f64, _>(StandardNormal));
        if label == 1 {
            let mut rows: Vec<usize> = (0..cfg.instances).collect();
            rows.shuffle(&mut rng);
            for &r in &rows[..witnesses] {
                for v in x.row_mut(r) {
                    *v = rng.sample::<f64, _>(StandardNormal) + cfg.shift;
                }
            }
        }
        bags.push(FeatureBag::new(format!("syn{b:04}"), TRANSFORMER_PATCH_SIZE, grid_coords(cfg.instances), x)?);
        labels.push(label);
    }
    Ok((bags, labels))
}

/// Writes one FBAG per slide plus `manifest.csv` (labels `positive`/`negative`)
/// under `dir`; returns the manifest path.
pub fn write_benchmark(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    let bag_dir = dir.join("bags");
    std::fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    let (bags, labels) = witness_bags(cfg)?;
    let mut records = Vec::with_capacity(bags.len());
    for (bag, label) in bags.iter().zip(&labels) {
        let rel = PathBuf::from("bags").join(format!("{}.fbag", bag.slide_id));
        write_bag(bag, &dir.join(&rel))?;
        records.push(SlideRecord {
            slide_id: bag.slide_id.clone(),
            bag_path: rel,
            raw_label: if *label == 1 { "positive" } else { "negative" }.to_string(),
        });
    }
    let path = dir.join("manifest.csv");
    write_manifest(&Manifest { records }, &path)?;
    Ok(path)
}
