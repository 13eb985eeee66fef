//! Round orchestration and full training runs.

use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{client_local_train, ClientUpload, DeviceState, ReceivedViews};
use crate::config::{EvalPerspective, HyperParams, RunConfig};
use crate::data::{
    assign_share_policy, filter_k_core, load_interactions, split_dataset, synth_dataset, SharePolicy,
    SplitDataset, Tier,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::graph::{ego_infer, EmbeddingState, Table};
use crate::mending::{mend, MendingArtifacts};
use crate::seed;
use crate::server::{
    apply_ldp, build_server_graph, embedding_exchange, fedavg_aggregate, server_infer, server_train, Delivery,
    ServerState, ServerUpdate,
};

/// Uniform sample of `min(n, n_users)` distinct users, ascending.
pub fn select_clients(n_users: usize, n: usize, round: usize, seed_value: u64) -> Vec<u32> {
    if n >= n_users {
        return (0..n_users as u32).collect();
    }
    let mut rng = seed::rng(seed_value, &[seed::SELECT, round as u64]);
    let mut picked: Vec<u32> = index::sample(&mut rng, n_users, n)
        .into_iter()
        .map(|u| u as u32)
        .collect();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<u32>,
    pub mean_bpr: f64,
    pub mean_cl: f64,
    pub server_loss: f64,
    /// Sum of participant losses.
    pub device_loss: f64,
    /// `device_loss + server_loss`.
    pub total_loss: f64,
    #[serde(skip)]
    pub wall_time_ms: f64,
}

/// What crossed the device/server boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    /// Server views handed to a device.
    Exchange { round: usize, delivery: Delivery },
    /// A device upload reaching the server.
    Upload {
        round: usize,
        device: u32,
        tier: Tier,
        user_rows: Vec<u32>,
        item_rows: usize,
        user_view: bool,
    },
    /// Positive pairs a device trained on.
    Train { round: usize, device: u32, positives: Vec<u32> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    pub events: Vec<AuditEvent>,
}

/// Per-device training seed for a round.
fn device_seed(train_seed: u64, round: usize, user: u32) -> u64 {
    seed::derive(train_seed, &[seed::DEVICE, round as u64, user as u64])
}

/// The simulated federation: server, devices and the fixed share policy.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub policy: SharePolicy,
    pub mending: Option<MendingArtifacts>,
    pub server: ServerState,
    pub devices: Vec<DeviceState>,
    pub hyper: HyperParams,
    pub train_seed: u64,
    pub round: usize,
    pub audit: AuditLog,
}

impl Simulation {
    /// Builds the server graph from the contributed pairs, mends it unless
    /// disabled, and initialises the global model and one device per user.
    pub fn new(split: &SplitDataset, policy: SharePolicy, hyper: HyperParams, train_seed: u64) -> Result<Self> {
        hyper.validate()?;
        let (n_users, n_items) = (split.n_users(), split.n_items());
        let shared = build_server_graph(&policy, n_users, n_items)?;
        let (graph, mending) = if hyper.disable_gm {
            (shared, None)
        } else {
            let art = mend(&shared, &hyper, train_seed)?;
            (art.mended(&shared)?, Some(art))
        };
        let mut rng = seed::rng(train_seed, &[seed::INIT]);
        let global = EmbeddingState::xavier(n_users, n_items, hyper.dim, &mut rng);
        let devices = (0..n_users)
            .map(|u| {
                DeviceState::new(
                    u as u32,
                    policy.tier[u],
                    split.train[u].clone(),
                    global.users.row(u).to_vec(),
                )
            })
            .collect();
        Ok(Simulation {
            policy,
            mending,
            server: ServerState::new(global, graph),
            devices,
            hyper,
            train_seed,
            round: 0,
            audit: AuditLog::default(),
        })
    }

    pub fn n_users(&self) -> usize {
        self.devices.len()
    }

    /// Select, exchange, train devices, train server, privatise, aggregate,
    /// broadcast.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let round = self.round + 1;
        let start = Instant::now();
        let report = self.round_inner(round).map_err(|e| Error::Round {
            round,
            source: Box::new(e),
        })?;
        self.round = round;
        Ok(RoundReport {
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
            ..report
        })
    }

    fn round_inner(&mut self, round: usize) -> Result<RoundReport> {
        let hyper = &self.hyper;
        let selected = select_clients(self.n_users(), hyper.clients_per_round, round, self.train_seed);

        let mut received: Vec<Option<ReceivedViews>> = vec![None; selected.len()];
        if hyper.cl_weight() > 0.0 {
            let views = server_infer(&self.server.graph, &self.server.global, &hyper.server_alpha())?;
            let local: Vec<Vec<u32>> = self.devices.iter().map(|d| d.local_train.clone()).collect();
            let (maps, log) = embedding_exchange(
                &self.policy.tier,
                &self.server.uploaded_user_views,
                &selected,
                &views,
                &local,
            );
            received = maps;
            for delivery in log {
                self.audit.events.push(AuditEvent::Exchange { round, delivery });
            }
        }

        let mut slot = vec![usize::MAX; self.n_users()];
        for (k, &u) in selected.iter().enumerate() {
            slot[u as usize] = k;
        }
        let items = &self.server.global.items;
        let train_seed = self.train_seed;
        let uploads: Vec<ClientUpload> = self
            .devices
            .par_iter_mut()
            .filter(|d| slot[d.user as usize] != usize::MAX)
            .map(|d| {
                let recv = received[slot[d.user as usize]].as_ref();
                client_local_train(d, items, recv, hyper, device_seed(train_seed, round, d.user))
            })
            .collect::<Result<_>>()?;

        let server_up = if self.server.graph.n_edges() > 0 {
            server_train(
                &mut self.server,
                hyper,
                seed::derive(self.train_seed, &[seed::SERVER, round as u64]),
            )?
        } else {
            ServerUpdate::default()
        };

        let private = hyper.ldp_clip > 0.0 || hyper.ldp_noise > 0.0;
        let deltas: Vec<_> = uploads
            .iter()
            .map(|up| {
                if private {
                    let mut rng = seed::rng(self.train_seed, &[seed::LDP, round as u64, up.user as u64]);
                    apply_ldp(&up.delta, hyper.ldp_clip, hyper.ldp_noise, &mut rng)
                } else {
                    up.delta.clone()
                }
            })
            .collect();
        let mut weighted: Vec<_> = deltas.iter().zip(&uploads).map(|(d, up)| (d, up.weight)).collect();
        weighted.push((&server_up.delta, server_up.weight));
        let next = fedavg_aggregate(&weighted, &self.server.global);
        if !next.is_finite() {
            return Err(Error::numeric(format!("aggregated model after round {round}")));
        }
        self.server.global = next;

        for (up, delta) in uploads.iter().zip(&deltas) {
            self.audit.events.push(AuditEvent::Train {
                round,
                device: up.user,
                positives: up.positives.clone(),
            });
            self.audit.events.push(AuditEvent::Upload {
                round,
                device: up.user,
                tier: up.tier,
                user_rows: delta.users.keys().copied().collect(),
                item_rows: delta.items.len(),
                user_view: up.local_view.is_some(),
            });
            if let Some(view) = &up.local_view {
                self.server.record_upload(up.user, up.tier, round, view.clone());
            }
        }

        let global = &self.server.global;
        for dev in self.devices.iter_mut() {
            let participated = slot[dev.user as usize] != usize::MAX;
            if dev.tier.shares() && (participated || hyper.sync_all_users) {
                dev.p_u.copy_from_slice(global.users.row(dev.user as usize));
            }
        }

        let n = uploads.len().max(1) as f64;
        let device_loss: f64 = uploads.iter().map(|u| u.loss).sum();
        let server_loss = server_up.loss.total;
        Ok(RoundReport {
            round,
            participants: selected,
            mean_bpr: uploads.iter().map(|u| u.bpr_loss).sum::<f64>() / n,
            mean_cl: uploads.iter().map(|u| u.cl_loss).sum::<f64>() / n,
            server_loss,
            device_loss,
            total_loss: device_loss + server_loss,
            wall_time_ms: 0.0,
        })
    }

    /// Each device's current `p_u`, one row per user.
    pub fn personal_rows(&self) -> Table {
        let mut out = Table::zeros(self.n_users(), self.server.global.dim());
        for dev in &self.devices {
            out.row_mut(dev.user as usize).copy_from_slice(&dev.p_u);
        }
        out
    }

    /// Ranking metrics against `relevant`, excluding each user's train items.
    pub fn evaluate(&self, relevant: &[Vec<u32>]) -> EvalResult {
        let train: Vec<Vec<u32>> = self.devices.iter().map(|d| d.local_train.clone()).collect();
        evaluate_model(&self.personal_rows(), &self.server.global, &train, relevant, &self.hyper)
    }
}

/// Scores every user with its ego view over its train items, built from its
/// personal row or the global user row depending on the perspective. Items
/// outside a user's ego graph keep only their layer-0 term.
pub fn evaluate_model(
    personal: &Table,
    global: &EmbeddingState,
    train: &[Vec<u32>],
    relevant: &[Vec<u32>],
    hyper: &HyperParams,
) -> EvalResult {
    let alpha = hyper.device_alpha();
    let mut users = Table::zeros(global.users.rows(), global.dim());
    for (u, local_train) in train.iter().enumerate() {
        let p = match hyper.eval_perspective {
            EvalPerspective::Device => personal.row(u),
            EvalPerspective::Server => global.users.row(u),
        };
        let local: Vec<&[f64]> = local_train.iter().map(|&i| global.items.row(i as usize)).collect();
        users.row_mut(u).copy_from_slice(&ego_infer(p, &local, alpha).user);
    }
    let mut items = global.items.clone();
    items.as_mut_slice().iter_mut().for_each(|x| *x *= alpha[0]);
    evaluate(&users, &items, train, relevant, hyper.eval_k, hyper.scoring)
}

/// Loads or synthesises interactions, applies the k-core filter and splits.
pub fn prepare_split(cfg: &RunConfig) -> Result<SplitDataset> {
    let raw = if cfg.dataset_path.is_empty() {
        synth_dataset(
            cfg.synth_users,
            cfg.synth_items,
            cfg.synth_clusters,
            cfg.synth_density,
            seed::derive(cfg.data_seed, &[seed::SYNTH]),
        )?
    } else {
        load_interactions(Path::new(&cfg.dataset_path))?
    };
    let filtered = filter_k_core(&raw, cfg.min_user, cfg.min_item)?;
    split_dataset(&filtered, cfg.split, cfg.data_seed)
}

/// One evaluation point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub round: usize,
    pub val: EvalResult,
    pub test: EvalResult,
    pub bpr_loss: f64,
    pub cl_loss: f64,
    pub server_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub split: SplitDataset,
    pub simulation: Simulation,
    pub history: Vec<EvalRecord>,
    pub rounds: Vec<RoundReport>,
    /// Index into `history` of the best validation recall.
    pub best: usize,
    pub stopped_early: bool,
}

impl TrainingOutcome {
    pub fn best_record(&self) -> &EvalRecord {
        &self.history[self.best]
    }
}

/// Full run: data, policy, server graph and mending once, then rounds with
/// periodic validation and patience-based early stopping.
pub fn run_training(cfg: &RunConfig) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let split = prepare_split(cfg)?;
    run_training_on(cfg, split)
}

/// As [`run_training`] on an already prepared split.
pub fn run_training_on(cfg: &RunConfig, split: SplitDataset) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let policy = assign_share_policy(&split, cfg.share(), cfg.policy_seed);
    let mut sim = Simulation::new(&split, policy, cfg.hyper.clone(), cfg.train_seed)?;
    let hyper = cfg.hyper.clone();

    let record = |sim: &Simulation, last: Option<&RoundReport>| EvalRecord {
        round: sim.round,
        val: sim.evaluate(&split.val),
        test: sim.evaluate(&split.test),
        bpr_loss: last.map_or(0.0, |r| r.mean_bpr),
        cl_loss: last.map_or(0.0, |r| r.mean_cl),
        server_loss: last.map_or(0.0, |r| r.server_loss),
    };

    let mut history = vec![record(&sim, None)];
    let mut rounds = Vec::with_capacity(hyper.rounds);
    let (mut best, mut stale, mut stopped_early) = (0usize, 0usize, false);
    for r in 1..=hyper.rounds {
        rounds.push(sim.run_round()?);
        if r % hyper.eval_every != 0 && r != hyper.rounds {
            continue;
        }
        history.push(record(&sim, rounds.last()));
        let latest = history.len() - 1;
        if history[latest].val.recall > history[best].val.recall {
            best = latest;
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.patience && r != hyper.rounds {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainingOutcome {
        split,
        simulation: sim,
        history,
        rounds,
        best,
        stopped_early,
    })
}
