//! Run configuration: flat TOML keys, every field defaulted, validated as a
//! whole before any compute starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ShareMode;
use crate::error::{Error, Result};
use crate::graph::default_alpha;
use crate::learn::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    Cosine,
    Inner,
}

/// Whose embeddings rank candidates during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPerspective {
    /// Each device's ego-graph user view against the global item table.
    Device,
    /// The global user row in place of the personal one, same ego view.
    Server,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareKind {
    Fixed,
    Uniform,
    Range,
}

/// Scalar knobs of the training protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Cosine threshold for adding predicted links.
    pub threshold: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// L2 weight on base embedding rows.
    pub lambda: f64,
    /// Contrastive loss weight.
    pub lambda1: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub dim: usize,
    /// Devices only see a first-order ego graph; must be 1.
    pub device_layers: usize,
    pub server_layers: usize,
    /// Device layer weights; empty means `1 / (L + 1)`.
    pub device_alpha: Vec<f64>,
    /// Server layer weights; empty means `1 / (L + 1)`.
    pub server_alpha: Vec<f64>,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub server_batch_size: usize,
    pub impair_fraction: f64,
    pub mend_epochs: usize,
    pub mend_lr: f64,
    /// Per-user cap on predicted links.
    pub mend_top_n: usize,
    /// Row-norm clip for device uploads; 0 disables clipping.
    pub ldp_clip: f64,
    /// Laplace scale added to each uploaded component; 0 disables noise.
    pub ldp_noise: f64,
    pub eval_k: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub scoring: Scoring,
    pub eval_perspective: EvalPerspective,
    /// Broadcast global user rows to non-participating sharers too.
    pub sync_all_users: bool,
    pub disable_gm: bool,
    pub disable_cl: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            threshold: 0.6,
            tau: 0.2,
            lambda: 1e-4,
            lambda1: 0.1,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            dim: 64,
            device_layers: 1,
            server_layers: 3,
            device_alpha: Vec::new(),
            server_alpha: Vec::new(),
            clients_per_round: 256,
            rounds: 500,
            local_epochs: 1,
            server_batch_size: 1024,
            impair_fraction: 0.1,
            mend_epochs: 200,
            mend_lr: 0.01,
            mend_top_n: 50,
            ldp_clip: 0.0,
            ldp_noise: 0.0,
            eval_k: 20,
            eval_every: 5,
            patience: 10,
            scoring: Scoring::Cosine,
            eval_perspective: EvalPerspective::Device,
            sync_all_users: false,
            disable_gm: false,
            disable_cl: false,
        }
    }
}

impl HyperParams {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn device_alpha(&self) -> [f64; 2] {
        match self.device_alpha.as_slice() {
            [a0, a1] => [*a0, *a1],
            _ => [0.5, 0.5],
        }
    }

    pub fn server_alpha(&self) -> Vec<f64> {
        if self.server_alpha.is_empty() {
            default_alpha(self.server_layers)
        } else {
            self.server_alpha.clone()
        }
    }

    /// Effective contrastive weight after the ablation switch.
    pub fn cl_weight(&self) -> f64 {
        if self.disable_cl {
            0.0
        } else {
            self.lambda1
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                v.push(msg);
            }
        };
        check(self.tau > 0.0, format!("tau must be > 0, got {}", self.tau));
        check(
            (-1.0..=1.0).contains(&self.threshold),
            format!("threshold must lie in [-1, 1], got {}", self.threshold),
        );
        check(self.lambda >= 0.0, format!("lambda must be >= 0, got {}", self.lambda));
        check(self.lambda1 >= 0.0, format!("lambda1 must be >= 0, got {}", self.lambda1));
        check(
            self.learning_rate >= 0.0,
            format!("learning_rate must be >= 0, got {}", self.learning_rate),
        );
        check(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
            "adam betas must lie in [0, 1)".to_string(),
        );
        check(self.adam_eps > 0.0, "adam_eps must be > 0".to_string());
        check(self.dim >= 1, "dim must be >= 1".to_string());
        check(
            self.device_layers == 1,
            format!("device_layers must be 1 (ego graph), got {}", self.device_layers),
        );
        check(self.server_layers >= 1, "server_layers must be >= 1".to_string());
        check(
            self.device_alpha.is_empty() || self.device_alpha.len() == 2,
            format!("device_alpha needs 2 weights, got {}", self.device_alpha.len()),
        );
        check(
            self.server_alpha.is_empty() || self.server_alpha.len() == self.server_layers + 1,
            format!(
                "server_alpha needs {} weights, got {}",
                self.server_layers + 1,
                self.server_alpha.len()
            ),
        );
        check(self.clients_per_round >= 1, "clients_per_round must be >= 1".to_string());
        check(self.local_epochs >= 1, "local_epochs must be >= 1".to_string());
        check(self.server_batch_size >= 1, "server_batch_size must be >= 1".to_string());
        check(
            self.impair_fraction > 0.0 && self.impair_fraction < 1.0,
            format!("impair_fraction must lie in (0, 1), got {}", self.impair_fraction),
        );
        check(self.mend_lr > 0.0, "mend_lr must be > 0".to_string());
        check(self.mend_top_n >= 1, "mend_top_n must be >= 1".to_string());
        check(self.ldp_clip >= 0.0, "ldp_clip must be >= 0".to_string());
        check(self.ldp_noise >= 0.0, "ldp_noise must be >= 0".to_string());
        check(self.eval_k >= 1, "eval_k must be >= 1".to_string());
        check(self.eval_every >= 1, "eval_every must be >= 1".to_string());
        check(self.patience >= 1, "patience must be >= 1".to_string());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Full experiment description. Keys are flat; see the README for the list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Interaction file; empty selects the synthetic corpus.
    pub dataset_path: String,
    pub synth_users: usize,
    pub synth_items: usize,
    pub synth_clusters: usize,
    pub synth_density: f64,
    pub min_user: usize,
    pub min_item: usize,
    pub split: [u32; 3],
    pub share_mode: ShareKind,
    pub share_ratio: f64,
    pub share_lo: f64,
    pub share_hi: f64,
    pub data_seed: u64,
    pub policy_seed: u64,
    pub train_seed: u64,
    pub out_dir: String,
    pub hyper: HyperParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_path: String::new(),
            synth_users: 200,
            synth_items: 300,
            synth_clusters: 4,
            synth_density: 0.3,
            min_user: 0,
            min_item: 0,
            split: [8, 1, 1],
            share_mode: ShareKind::Uniform,
            share_ratio: 0.5,
            share_lo: 0.0,
            share_hi: 1.0,
            data_seed: 1,
            policy_seed: 2,
            train_seed: 3,
            out_dir: "runs/default".to_string(),
            hyper: HyperParams::default(),
        }
    }
}

// The `hyper` block is written flat into the file; these are its keys.
const HYPER_KEYS: &[&str] = &[
    "threshold", "tau", "lambda", "lambda1", "learning_rate", "adam_beta1", "adam_beta2",
    "adam_eps", "dim", "device_layers", "server_layers", "device_alpha", "server_alpha",
    "clients_per_round", "rounds", "local_epochs", "server_batch_size", "impair_fraction",
    "mend_epochs", "mend_lr", "mend_top_n", "ldp_clip", "ldp_noise", "eval_k", "eval_every",
    "patience", "scoring", "eval_perspective", "sync_all_users", "disable_gm", "disable_cl",
];

impl RunConfig {
    pub fn share(&self) -> ShareMode {
        match self.share_mode {
            ShareKind::Fixed => ShareMode::Fixed {
                ratio: self.share_ratio,
            },
            ShareKind::Uniform => ShareMode::Uniform,
            ShareKind::Range => ShareMode::Range {
                lo: self.share_lo,
                hi: self.share_hi,
            },
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    /// Parses flat TOML text. Unknown keys and out-of-range values are all
    /// reported together.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        let mut cfg = RunConfig::default();
        let mut errors = Vec::new();
        for (key, value) in table {
            if let Err(e) = cfg.set_value(&key, value) {
                errors.push(e);
            }
        }
        errors.extend(cfg.violations());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies a `key=value` override, with the value in TOML syntax (bare
    /// words are taken as strings).
    pub fn set_override(&mut self, assignment: &str) -> std::result::Result<(), String> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| format!("override {assignment:?} is not key=value"))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        self.set_value(key, value)
    }

    fn set_value(&mut self, key: &str, value: toml::Value) -> std::result::Result<(), String> {
        let target = if HYPER_KEYS.contains(&key) {
            "hyper"
        } else if key == "hyper" {
            return Err("unknown key \"hyper\"".to_string());
        } else {
            ""
        };
        // round-trip through a table so serde does the type checking
        let mut current = toml::Table::try_from(&*self).map_err(|e| e.to_string())?;
        if target == "hyper" {
            let hyper = current
                .get_mut("hyper")
                .and_then(toml::Value::as_table_mut)
                .expect("hyper table");
            hyper.insert(key.to_string(), value);
        } else {
            if !current.contains_key(key) {
                return Err(format!("unknown key {key:?}"));
            }
            current.insert(key.to_string(), value);
        }
        let parsed: RunConfig = toml::Value::Table(current)
            .try_into()
            .map_err(|e: toml::de::Error| format!("{key}: {}", e.message()))?;
        *self = parsed;
        Ok(())
    }

    /// Serialises with every key materialised, flat.
    pub fn to_toml_string(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("config serialises");
        if let Some(toml::Value::Table(hyper)) = table.remove("hyper") {
            table.extend(hyper);
        }
        toml::to_string(&table).expect("table serialises")
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.hyper.violations();
        if self.dataset_path.is_empty() {
            if !(self.synth_density > 0.0 && self.synth_density <= 1.0) {
                v.push(format!("synth_density must lie in (0, 1], got {}", self.synth_density));
            }
            if self.synth_clusters == 0 || self.synth_users == 0 || self.synth_items == 0 {
                v.push("synth_users, synth_items and synth_clusters must be >= 1".to_string());
            }
        }
        if self.split.contains(&0) {
            v.push("split ratios must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.share_ratio) {
            v.push(format!("share_ratio must lie in [0, 1], got {}", self.share_ratio));
        }
        if !(0.0..=1.0).contains(&self.share_lo)
            || !(0.0..=1.0).contains(&self.share_hi)
            || self.share_lo > self.share_hi
        {
            v.push("share_lo <= share_hi must both lie in [0, 1]".to_string());
        }
        if self.out_dir.is_empty() {
            v.push("out_dir must not be empty".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}
