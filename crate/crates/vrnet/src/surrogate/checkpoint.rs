//! Checkpoint format: a JSON manifest (architecture, phases, layer table,
//! batch-norm statistics, seeds) next to a raw little-endian f64 array file
//! holding every parameter in declared order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::mandel::IsotropicPhase;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BnEntry {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PhasesEntry {
    pub e0: f64,
    pub nu0: f64,
    pub e1: f64,
    pub nu1: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelEntry {
    pub kernels: [usize; 4],
    pub channels: [usize; 4],
    pub mlp_widths: Vec<usize>,
    pub out_dim: usize,
    pub aux_dim: usize,
    pub scale: f64,
    pub resolution: usize,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub model: ModelEntry,
    pub phases: PhasesEntry,
    pub layers: Vec<LayerEntry>,
    pub bn: Vec<BnEntry>,
}

impl Model {
    /// Writes `manifest.json` and `params.bin` into the directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut layers = Vec::new();
        let mut offset = 0usize;
        for l in &self.layout {
            let v = self.store.value(l.pid);
            layers.push(LayerEntry {
                name: l.name.clone(),
                shape: v.shape().to_vec(),
                offset,
                len: v.numel(),
            });
            offset += v.numel();
        }
        let manifest = CheckpointManifest {
            version: 1,
            model: ModelEntry {
                kernels: self.cfg.kernels,
                channels: self.cfg.channels,
                mlp_widths: self.cfg.mlp_widths.clone(),
                out_dim: self.cfg.out_dim,
                aux_dim: self.cfg.aux_dim,
                scale: self.cfg.scale,
                resolution: self.cfg.resolution,
                temperature: self.cfg.temperature,
                seed: self.cfg.seed,
            },
            phases: PhasesEntry {
                e0: self.phases().0.young(),
                nu0: self.phases().0.poisson(),
                e1: self.phases().1.young(),
                nu1: self.phases().1.poisson(),
            },
            layers,
            bn: self
                .bn
                .iter()
                .map(|s| BnEntry {
                    mean: s.running_mean.clone(),
                    var: s.running_var.clone(),
                    initialized: s.initialized,
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Parse(format!("manifest encode: {e}")))?;
        fs::write(dir.join(MANIFEST_FILE), json)?;

        let flat = self.store.flat_values();
        let mut bytes = Vec::with_capacity(flat.len() * 8);
        for v in flat {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(PARAMS_FILE), bytes)?;
        Ok(())
    }

    /// Rebuilds a model from a checkpoint directory.
    pub fn load(dir: &Path) -> Result<Model> {
        let json = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&json).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        let cfg = ModelConfig {
            kernels: manifest.model.kernels,
            channels: manifest.model.channels,
            mlp_widths: manifest.model.mlp_widths.clone(),
            out_dim: manifest.model.out_dim,
            aux_dim: manifest.model.aux_dim,
            scale: manifest.model.scale,
            resolution: manifest.model.resolution,
            temperature: manifest.model.temperature,
            seed: manifest.model.seed,
        };
        let phases = (
            IsotropicPhase::new(manifest.phases.e0, manifest.phases.nu0)?,
            IsotropicPhase::new(manifest.phases.e1, manifest.phases.nu1)?,
        );
        let mut model = Model::new(cfg, phases)?;
        // layer table must match the rebuilt architecture
        if manifest.layers.len() != model.layout.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} layers, architecture builds {}",
                manifest.layers.len(),
                model.layout.len()
            )));
        }
        for (entry, l) in manifest.layers.iter().zip(&model.layout) {
            if entry.name != l.name || entry.shape != model.store.value(l.pid).shape() {
                return Err(Error::Parse(format!("layer mismatch at {}", entry.name)));
            }
        }
        let bytes = fs::read(dir.join(PARAMS_FILE))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Parse("params.bin length is not a multiple of 8".into()));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.store.load_flat_values(&flat)?;
        if manifest.bn.len() != model.bn.len() {
            return Err(Error::Parse("batch-norm state count mismatch".into()));
        }
        for (entry, state) in manifest.bn.iter().zip(&mut model.bn) {
            if entry.mean.len() != state.running_mean.len() {
                return Err(Error::Parse("batch-norm width mismatch".into()));
            }
            state.running_mean = entry.mean.clone();
            state.running_var = entry.var.clone();
            state.initialized = entry.initialized;
        }
        Ok(model)
    }
}
