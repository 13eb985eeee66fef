//! Server-side state and operations: the shared graph, embedding exchange,
//! the server's own training step, local differential privacy on uploads,
//! and per-row federated averaging.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::client::ReceivedViews;
use crate::config::HyperParams;
use crate::data::{SharePolicy, Tier};
use crate::error::Result;
use crate::graph::{propagate_combine, BipartiteGraph, EmbeddingState, Side};
use crate::learn::{
    compute_gradients, Adam, ContrastTerm, DeltaBundle, LossBreakdown, LossSpec, Trainable,
};
use crate::seed;

/// A user view uploaded by a sharing device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadedView {
    pub tier: Tier,
    pub round: usize,
    pub view: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    /// The broadcast model.
    pub global: EmbeddingState,
    /// Shared links plus predicted links.
    pub graph: BipartiteGraph,
    pub uploaded_user_views: BTreeMap<u32, UploadedView>,
    pub adam: Adam,
}

impl ServerState {
    pub fn new(global: EmbeddingState, graph: BipartiteGraph) -> Self {
        ServerState {
            global,
            graph,
            uploaded_user_views: BTreeMap::new(),
            adam: Adam::default(),
        }
    }

    /// Stores a sharer's uploaded view. `NONE` users are never stored.
    pub fn record_upload(&mut self, user: u32, tier: Tier, round: usize, view: Vec<f64>) {
        if tier.shares() {
            self.uploaded_user_views
                .insert(user, UploadedView { tier, round, view });
        }
    }
}

/// Graph over every contributed `(user, item)` pair.
pub fn build_server_graph(policy: &SharePolicy, n_users: usize, n_items: usize) -> Result<BipartiteGraph> {
    BipartiteGraph::build(policy.contributed_pairs(), n_users, n_items)
}

/// Server-side user and item views of `global` on `graph`.
pub fn server_infer(graph: &BipartiteGraph, global: &EmbeddingState, alpha: &[f64]) -> Result<EmbeddingState> {
    propagate_combine(graph, global, alpha)
}

/// One exchange decision, for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub device: u32,
    pub tier: Tier,
    /// User ids whose server views the device received.
    pub user_views: Vec<u32>,
    pub item_views: usize,
}

/// Builds each selected device's received-views map.
///
/// A sharing device gets its own server user view, the server views of every
/// `ALL` user that has uploaded, and server item views for its local items.
/// `NONE` devices get nothing. `PART` and `NONE` users never appear in another
/// device's map.
pub fn embedding_exchange(
    tiers: &[Tier],
    uploaded: &BTreeMap<u32, UploadedView>,
    selected: &[u32],
    server_views: &EmbeddingState,
    local_train: &[Vec<u32>],
) -> (Vec<Option<ReceivedViews>>, Vec<Delivery>) {
    let public: Vec<u32> = uploaded
        .iter()
        .filter(|(&u, v)| v.tier == Tier::All && tiers[u as usize] == Tier::All)
        .map(|(&u, _)| u)
        .collect();
    let mut maps = Vec::with_capacity(selected.len());
    let mut log = Vec::with_capacity(selected.len());
    for &d in selected {
        let tier = tiers[d as usize];
        if !tier.shares() {
            maps.push(None);
            log.push(Delivery {
                device: d,
                tier,
                user_views: Vec::new(),
                item_views: 0,
            });
            continue;
        }
        let mut recv = ReceivedViews::default();
        recv.users.insert(d, server_views.users.row(d as usize).to_vec());
        for &a in &public {
            recv.users
                .entry(a)
                .or_insert_with(|| server_views.users.row(a as usize).to_vec());
        }
        for &i in &local_train[d as usize] {
            recv.items.insert(i, server_views.items.row(i as usize).to_vec());
        }
        log.push(Delivery {
            device: d,
            tier,
            user_views: recv.users.keys().copied().collect(),
            item_views: recv.items.len(),
        });
        maps.push(Some(recv));
    }
    (maps, log)
}

/// Result of the server's training step, as an upload for aggregation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ServerUpdate {
    pub delta: DeltaBundle,
    pub weight: f64,
    pub loss: LossBreakdown,
}

/// Positive pairs and one sampled negative each for a server minibatch.
pub fn server_batch(graph: &BipartiteGraph, batch_size: usize, seed_value: u64) -> Vec<(u32, u32, u32)> {
    let edges: Vec<(u32, u32)> = graph.edges().collect();
    if edges.is_empty() {
        return Vec::new();
    }
    let mut rng = seed::rng(seed_value, &[0]);
    let take = batch_size.min(edges.len());
    let mut picked: Vec<usize> = index::sample(&mut rng, edges.len(), take).into_vec();
    picked.sort_unstable();
    let n_items = graph.n_items() as u32;
    let mut out = Vec::with_capacity(take);
    for k in picked {
        let (u, i) = edges[k];
        if graph.user_degree(u as usize) >= n_items as usize {
            continue;
        }
        let j = loop {
            let j = rng.gen_range(0..n_items);
            if !graph.has_edge(u as usize, j as usize) {
                break j;
            }
        };
        out.push((u, i, j));
    }
    out
}

/// The server's step on its shared graph: ranking loss on a minibatch plus,
/// unless the contrastive weight is zero, InfoNCE between uploaded local user
/// views and server user views for uploaders in the batch, and between
/// broadcast item rows and server item views for batch items.
pub fn server_train(state: &mut ServerState, hyper: &HyperParams, seed_value: u64) -> Result<ServerUpdate> {
    if state.graph.n_edges() == 0 {
        return Ok(ServerUpdate::default());
    }
    let batch = server_batch(&state.graph, hyper.server_batch_size, seed_value);
    let lambda1 = hyper.cl_weight();
    let mut contrast = Vec::new();
    if lambda1 > 0.0 {
        let users: Vec<u32> = {
            let mut seen = HashSet::new();
            let mut v: Vec<u32> = batch
                .iter()
                .map(|t| t.0)
                .filter(|u| state.uploaded_user_views.contains_key(u) && seen.insert(*u))
                .collect();
            v.sort_unstable();
            v
        };
        if !users.is_empty() {
            contrast.push(ContrastTerm {
                side: Side::User,
                fixed: users
                    .iter()
                    .map(|u| state.uploaded_user_views[u].view.clone())
                    .collect(),
                rows: users,
                trainable: Trainable::Candidates,
            });
        }
        let mut items: Vec<u32> = batch.iter().map(|t| t.1).collect();
        items.sort_unstable();
        items.dedup();
        contrast.push(ContrastTerm {
            side: Side::Item,
            fixed: items
                .iter()
                .map(|&i| state.global.items.row(i as usize).to_vec())
                .collect(),
            rows: items,
            trainable: Trainable::Candidates,
        });
    }
    let spec = LossSpec {
        bpr: batch,
        lambda: hyper.lambda,
        contrast,
        lambda1,
        tau: hyper.tau,
        mending: Vec::new(),
    };
    let alpha = hyper.server_alpha();
    let (loss, grads) = compute_gradients(&state.graph, &state.global, &alpha, &spec)?;
    let mut next = state.global.clone();
    state.adam.step(&mut next, &grads, &hyper.adam());
    let mut delta = DeltaBundle::default();
    for side in [Side::User, Side::Item] {
        for &r in grads.side(side).keys() {
            let new = next.table(side).row(r as usize);
            let old = state.global.table(side).row(r as usize);
            delta
                .side_mut(side)
                .insert(r, new.iter().zip(old).map(|(a, b)| a - b).collect());
        }
    }
    delta.check_finite("server update")?;
    Ok(ServerUpdate {
        delta,
        weight: spec.bpr.len() as f64,
        loss,
    })
}

/// Laplace(0, `scale`) sample by inverse CDF.
pub fn sample_laplace<R: Rng>(scale: f64, rng: &mut R) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    let u: f64 = rng.gen_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Clips each row to L2 norm `clip` (0 disables) and adds i.i.d. Laplace
/// noise of scale `noise_scale` to every component.
pub fn apply_ldp<R: Rng>(upload: &DeltaBundle, clip: f64, noise_scale: f64, rng: &mut R) -> DeltaBundle {
    let mut out = upload.clone();
    for side in [Side::User, Side::Item] {
        for row in out.side_mut(side).values_mut() {
            if clip > 0.0 {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > clip {
                    let s = clip / norm;
                    row.iter_mut().for_each(|x| *x *= s);
                }
            }
            if noise_scale > 0.0 {
                row.iter_mut().for_each(|x| *x += sample_laplace(noise_scale, rng));
            }
        }
    }
    out
}

/// Per-row weighted average of deltas over the uploads that touch the row,
/// added to `base`. Rows nobody touched, or touched only with zero weight,
/// are left as they are.
pub fn fedavg_aggregate(uploads: &[(&DeltaBundle, f64)], base: &EmbeddingState) -> EmbeddingState {
    let mut out = base.clone();
    for side in [Side::User, Side::Item] {
        let mut acc: BTreeMap<u32, (Vec<f64>, f64)> = BTreeMap::new();
        for (delta, w) in uploads {
            for (&r, d) in delta.side(side) {
                let slot = acc.entry(r).or_insert_with(|| (vec![0.0; d.len()], 0.0));
                for (o, x) in slot.0.iter_mut().zip(d) {
                    *o += w * x;
                }
                slot.1 += w;
            }
        }
        let table = out.table_mut(side);
        for (r, (sum, wsum)) in acc {
            if wsum <= 0.0 {
                continue;
            }
            for (o, s) in table.row_mut(r as usize).iter_mut().zip(sum) {
                *o += s / wsum;
            }
        }
    }
    out
}
