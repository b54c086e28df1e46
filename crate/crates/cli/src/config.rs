//! Flat TOML run configuration with key=value overrides and a stable
//! content hash. Every run directory records its resolved config, so two
//! runs with equal hashes and seeds produce byte-identical metric files.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub city_name: String,

    // Synthetic city.
    pub city_h: usize,
    pub city_v: usize,
    pub city_t: usize,
    pub interval_minutes: u32,
    pub phase_shift_hours: f64,

    // Model.
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub h0: usize,
    pub v0: usize,
    pub t0: usize,
    pub context_d: usize,

    // Diffusion schedule.
    pub k_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub literal_eq5: bool,

    // Training.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_ratio: f64,
    pub recon_weight: f64,
    /// Extra same-shape cities synthesized (seeds derived from the data
    /// city's seed) and pooled into the pretraining windows.
    pub train_cities: usize,

    // Fine-tuning.
    pub n_neg: usize,
    /// Negative if the default log(n_neg+1)/(10 n_neg) scaling applies.
    pub lambda: f64,
    pub clamp: f64,
    pub freeze: String,

    // Evaluation.
    pub task: String,
    pub window_t: usize,
    pub fraction: f64,
    pub fewshot_steps: usize,
    pub sample_chains: usize,

    // Deployment optimizer.
    pub stations: u32,
    pub station_capacity: f64,
    pub dep_alpha: f64,
    pub dep_beta: f64,
    pub dep_relaxed: bool,

    // Sleep optimizer.
    pub rru_capacity: f64,
    pub max_rru: u32,
    pub alpha_energy: f64,
    pub beta_energy: f64,
    pub initial_rru: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            city_name: "synthetic".into(),
            city_h: 8,
            city_v: 8,
            city_t: 64,
            interval_minutes: 15,
            phase_shift_hours: 0.0,
            layers: 2,
            width: 16,
            heads: 2,
            h0: 2,
            v0: 2,
            t0: 8,
            context_d: 16,
            k_steps: 50,
            beta_min: 1e-4,
            beta_max: 0.05,
            literal_eq5: false,
            steps: 200,
            batch_size: 4,
            lr: 1e-3,
            mask_ratio: 0.5,
            recon_weight: 1.0,
            train_cities: 16,
            n_neg: 2,
            lambda: -1.0,
            clamp: 10.0,
            freeze: "finetune-default".into(),
            task: "short".into(),
            window_t: 64,
            fraction: -1.0,
            fewshot_steps: 200,
            sample_chains: 8,
            stations: 8,
            station_capacity: 100.0,
            dep_alpha: 0.1,
            dep_beta: 1.0,
            dep_relaxed: false,
            rru_capacity: 100.0,
            max_rru: 4,
            alpha_energy: 0.01,
            beta_energy: 0.1,
            initial_rru: 4,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                text.parse().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for pair in overrides {
            let Some((key, value)) = pair.split_once('=') else {
                bail!("override `{pair}` is not KEY=VALUE");
            };
            let parsed: toml::Value = match value.parse::<toml::Value>() {
                Ok(v) => v,
                Err(_) => toml::Value::String(value.to_string()),
            };
            table.insert(key.trim().to_string(), parsed);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("config does not match the expected keys")?;
        Ok(cfg)
    }

    /// Canonical serialized form (struct field order, which is fixed).
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.lambda < 0.0 {
            ((self.n_neg + 1) as f64).ln() / (self.n_neg as f64 * 10.0)
        } else {
            self.lambda
        }
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
