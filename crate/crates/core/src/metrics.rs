//! Run artifacts: line-delimited metric records, round and audit logs, the
//! resolved config, and model and dataset snapshots.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::EvalResult;
use crate::federation::{EvalRecord, TrainingOutcome};
use crate::graph::{EmbeddingState, Table};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const DATASET_DIR: &str = "dataset";
pub const MENDED_FILE: &str = "mended_links.tsv";
pub const PER_USER_FILE: &str = "test_per_user.tsv";

/// One evaluation as a metrics line. Field order is fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricLine {
    pub k: usize,
    pub round: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub bpr_loss: f64,
    pub cl_loss: f64,
    pub server_loss: f64,
    pub share_mode: String,
}

impl MetricLine {
    /// Validation metrics of `rec`.
    pub fn from_record(rec: &EvalRecord, share_mode: &str) -> Self {
        MetricLine {
            k: rec.val.k,
            round: rec.round,
            recall: rec.val.recall,
            ndcg: rec.val.ndcg,
            bpr_loss: rec.bpr_loss,
            cl_loss: rec.cl_loss,
            server_loss: rec.server_loss,
            share_mode: share_mode.to_string(),
        }
    }
}

impl Serialize for MetricLine {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(7))?;
        m.serialize_entry("round", &self.round)?;
        m.serialize_entry(&format!("recall@{}", self.k), &self.recall)?;
        m.serialize_entry(&format!("ndcg@{}", self.k), &self.ndcg)?;
        m.serialize_entry("bpr_loss", &self.bpr_loss)?;
        m.serialize_entry("cl_loss", &self.cl_loss)?;
        m.serialize_entry("server_loss", &self.server_loss)?;
        m.serialize_entry("share_mode", &self.share_mode)?;
        m.end()
    }
}

/// Test metrics of users whose raw share ratio falls in one bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ShareBin {
    pub label: String,
    pub users: usize,
    pub recall: f64,
    pub ndcg: f64,
}

/// Ten ratio bins of width 0.1; the first includes 0 and the last includes 1.
pub fn share_bins(raw_ratio: &[f64], result: &EvalResult) -> Vec<ShareBin> {
    let mut acc = vec![(0usize, 0.0, 0.0); 10];
    for m in &result.per_user {
        let r = raw_ratio[m.user as usize];
        let b = ((r * 10.0).floor() as usize).min(9);
        acc[b].0 += 1;
        acc[b].1 += m.recall;
        acc[b].2 += m.ndcg;
    }
    acc.into_iter()
        .enumerate()
        .map(|(b, (n, rec, nd))| {
            let lo = format!("{:.1}", b as f64 / 10.0);
            let hi = format!("{:.1}", (b + 1) as f64 / 10.0);
            let label = match b {
                0 => format!("[0,{hi})"),
                9 => format!("[{lo},1]"),
                _ => format!("[{lo},{hi})"),
            };
            let d = n.max(1) as f64;
            ShareBin {
                label,
                users: n,
                recall: rec / d,
                ndcg: nd / d,
            }
        })
        .collect()
}

/// Final summary line: test metrics at the best validation point.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub k: usize,
    pub best_round: usize,
    pub rounds_run: usize,
    pub stopped_early: bool,
    pub val_recall: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub share_mode: String,
    pub bins: Vec<ShareBin>,
}

impl Summary {
    pub fn from_outcome(out: &TrainingOutcome, share_mode: &str) -> Self {
        let best = out.best_record();
        Summary {
            k: best.test.k,
            best_round: best.round,
            rounds_run: out.rounds.len(),
            stopped_early: out.stopped_early,
            val_recall: best.val.recall,
            recall: best.test.recall,
            ndcg: best.test.ndcg,
            share_mode: share_mode.to_string(),
            bins: share_bins(&out.simulation.policy.raw_ratio, &best.test),
        }
    }
}

impl Serialize for ShareBin {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(4))?;
        m.serialize_entry("share_ratio", &self.label)?;
        m.serialize_entry("users", &self.users)?;
        m.serialize_entry("recall", &self.recall)?;
        m.serialize_entry("ndcg", &self.ndcg)?;
        m.end()
    }
}

impl Serialize for Summary {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(10))?;
        m.serialize_entry("summary", &true)?;
        m.serialize_entry("best_round", &self.best_round)?;
        m.serialize_entry("rounds_run", &self.rounds_run)?;
        m.serialize_entry("stopped_early", &self.stopped_early)?;
        m.serialize_entry(&format!("val_recall@{}", self.k), &self.val_recall)?;
        m.serialize_entry(&format!("recall@{}", self.k), &self.recall)?;
        m.serialize_entry(&format!("ndcg@{}", self.k), &self.ndcg)?;
        m.serialize_entry("share_mode", &self.share_mode)?;
        m.serialize_entry("share_bins", &self.bins)?;
        m.end()
    }
}

/// Trained parameters needed to re-score a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub round: usize,
    pub global: EmbeddingState,
    /// Each device's personal user row.
    pub personal: Table,
}

impl ModelSnapshot {
    pub fn from_outcome(out: &TrainingOutcome) -> Self {
        ModelSnapshot {
            round: out.simulation.round,
            global: out.simulation.server.global.clone(),
            personal: out.simulation.personal_rows(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &serde_json::to_string(self).expect("snapshot serializes"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes one JSON value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(&row).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_run(dir: &Path, cfg: &RunConfig, out: &TrainingOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mode = cfg.share().label();
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml_string())?;
    write_metrics(&dir.join(METRICS_FILE), out, &mode)?;
    write_jsonl(&dir.join(ROUNDS_FILE), &out.rounds)?;
    write_jsonl(&dir.join(AUDIT_FILE), &out.simulation.audit.events)?;
    out.best_record().test.write_tsv(&dir.join(PER_USER_FILE))?;
    ModelSnapshot::from_outcome(out).save(&dir.join(MODEL_FILE))?;
    out.split.save(&dir.join(DATASET_DIR))?;
    if let Some(m) = &out.simulation.mending {
        m.write_tsv(&dir.join(MENDED_FILE))?;
    }
    Ok(())
}

/// Writes only the metrics file.
pub fn write_metrics(path: &Path, out: &TrainingOutcome, share_mode: &str) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in &out.history {
        let line = serde_json::to_string(&MetricLine::from_record(rec, share_mode)).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    let summary = serde_json::to_string(&Summary::from_outcome(out, share_mode)).expect("summary serializes");
    writeln!(w, "{summary}").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
