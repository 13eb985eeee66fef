//! Server-side graph completion.
//!
//! A fraction of the shared links is hidden, a light-graph-convolution
//! encoder is trained on the remaining graph to score hidden links near
//! cosine 1 and sampled non-links near 0, and non-edges scoring at least the
//! threshold are then added to the shared graph.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::HyperParams;
use crate::error::{Error, Result};
use crate::graph::{propagate_combine, BipartiteGraph, EmbeddingState};
use crate::learn::{compute_gradients, cosine_sim, Adam, AdamConfig, LossSpec};
use crate::seed;

/// A predicted link with its cosine score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredLink {
    pub user: u32,
    pub item: u32,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct MendingArtifacts {
    pub impaired_graph: BipartiteGraph,
    pub removed_links: Vec<(u32, u32)>,
    pub mender_embeddings: EmbeddingState,
    pub predicted_links: Vec<ScoredLink>,
    /// Mending loss per epoch, measured before that epoch's update.
    pub losses: Vec<f64>,
}

/// Hides `floor(fraction * |E|)` links chosen at random, skipping any link
/// whose removal would leave one of its endpoints without neighbours.
pub fn impair_graph(
    g: &BipartiteGraph,
    fraction: f64,
    seed_value: u64,
) -> Result<(BipartiteGraph, Vec<(u32, u32)>)> {
    if g.n_edges() == 0 {
        return Err(Error::contract("cannot impair a graph without edges"));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::contract(format!("impair fraction {fraction} outside [0, 1)")));
    }
    let target = (fraction * g.n_edges() as f64).floor() as usize;
    let mut edges: Vec<(u32, u32)> = g.edges().collect();
    let mut rng = seed::rng(seed_value, &[seed::IMPAIR]);
    edges.shuffle(&mut rng);

    let mut du: Vec<usize> = (0..g.n_users()).map(|u| g.user_degree(u)).collect();
    let mut di: Vec<usize> = (0..g.n_items()).map(|i| g.item_degree(i)).collect();
    let mut removed = Vec::with_capacity(target);
    for &(u, i) in &edges {
        if removed.len() == target {
            break;
        }
        if du[u as usize] >= 2 && di[i as usize] >= 2 {
            du[u as usize] -= 1;
            di[i as usize] -= 1;
            removed.push((u, i));
        }
    }
    removed.sort_unstable();
    let gone: HashSet<(u32, u32)> = removed.iter().copied().collect();
    let impaired = BipartiteGraph::build(
        g.edges().filter(|e| !gone.contains(e)),
        g.n_users(),
        g.n_items(),
    )?;
    Ok((impaired, removed))
}

/// Encoder settings for [`train_mender`].
#[derive(Debug, Clone)]
pub struct MenderConfig {
    pub epochs: usize,
    pub dim: usize,
    pub alpha: Vec<f64>,
    pub adam: AdamConfig,
}

impl MenderConfig {
    pub fn from_hyper(h: &HyperParams) -> Self {
        MenderConfig {
            epochs: h.mend_epochs,
            dim: h.dim,
            alpha: h.server_alpha(),
            adam: AdamConfig {
                lr: h.mend_lr,
                ..h.adam()
            },
        }
    }
}

pub struct MenderOutcome {
    /// Propagated and combined encoder output.
    pub embeddings: EmbeddingState,
    pub losses: Vec<f64>,
}

/// Trains a fresh encoder on `impaired` so that `removed` links score cosine
/// 1 and an equal number of sampled non-links score 0.
pub fn train_mender(
    impaired: &BipartiteGraph,
    removed: &[(u32, u32)],
    cfg: &MenderConfig,
    seed_value: u64,
) -> Result<MenderOutcome> {
    let (nu, ni) = (impaired.n_users(), impaired.n_items());
    let mut rng = seed::rng(seed_value, &[seed::MENDER]);
    let mut base = EmbeddingState::xavier(nu, ni, cfg.dim, &mut rng);
    let hidden: HashSet<(u32, u32)> = removed.iter().copied().collect();
    let mut hidden_deg = vec![0usize; nu];
    let mut active = vec![false; ni];
    for &(u, i) in removed {
        hidden_deg[u as usize] += 1;
        active[i as usize] = true;
    }
    let active_items: Vec<u32> = (0..ni as u32)
        .filter(|&i| impaired.item_degree(i as usize) > 0 || active[i as usize])
        .collect();

    let mut opt = Adam::default();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(seed_value, &[seed::MENDER, epoch as u64 + 1]);
        let mut links: Vec<(u32, u32, f64)> = removed.iter().map(|&(u, i)| (u, i, 1.0)).collect();
        for &(u, _) in removed {
            let known = impaired.user_degree(u as usize) + hidden_deg[u as usize];
            if known >= active_items.len() {
                continue;
            }
            if let Some(j) = sample_non_link(impaired, &hidden, &active_items, u, &mut rng) {
                links.push((u, j, 0.0));
            }
        }
        let spec = LossSpec {
            mending: links,
            ..Default::default()
        };
        let (loss, grads) = compute_gradients(impaired, &base, &cfg.alpha, &spec)?;
        if !loss.mending.is_finite() {
            return Err(Error::numeric(format!("mending loss at epoch {epoch}")));
        }
        losses.push(loss.mending);
        opt.step(&mut base, &grads, &cfg.adam);
    }
    let embeddings = propagate_combine(impaired, &base, &cfg.alpha)?;
    Ok(MenderOutcome { embeddings, losses })
}

fn sample_non_link<R: Rng>(
    g: &BipartiteGraph,
    hidden: &HashSet<(u32, u32)>,
    items: &[u32],
    user: u32,
    rng: &mut R,
) -> Option<u32> {
    for _ in 0..64 * items.len().max(1) {
        let j = items[rng.gen_range(0..items.len())];
        if !g.has_edge(user as usize, j as usize) && !hidden.contains(&(user, j)) {
            return Some(j);
        }
    }
    None
}

/// Non-edges of `g` between nodes of nonzero degree whose cosine score is at
/// least `t`, keeping each user's `top_n` best. Sorted by `(user, item)`.
pub fn predict_links(g: &BipartiteGraph, z: &EmbeddingState, t: f64, top_n: usize) -> Vec<ScoredLink> {
    let items: Vec<usize> = (0..g.n_items()).filter(|&i| g.item_degree(i) > 0).collect();
    let per_user: Vec<Vec<ScoredLink>> = (0..g.n_users())
        .into_par_iter()
        .map(|u| {
            if g.user_degree(u) == 0 {
                return Vec::new();
            }
            let zu = z.users.row(u);
            let mut hits: Vec<ScoredLink> = items
                .iter()
                .filter(|&&i| !g.has_edge(u, i))
                .filter_map(|&i| {
                    let score = cosine_sim(zu, z.items.row(i));
                    (score >= t).then_some(ScoredLink {
                        user: u as u32,
                        item: i as u32,
                        score,
                    })
                })
                .collect();
            if hits.len() > top_n {
                hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item.cmp(&b.item)));
                hits.truncate(top_n);
                hits.sort_by_key(|l| l.item);
            }
            hits
        })
        .collect();
    per_user.into_iter().flatten().collect()
}

/// Impair, train and predict on the shared graph `g`.
///
/// With nothing to hide (too few links to remove under the degree guard) no
/// links are predicted.
pub fn mend(g: &BipartiteGraph, hyper: &HyperParams, seed_value: u64) -> Result<MendingArtifacts> {
    let cfg = MenderConfig::from_hyper(hyper);
    if g.n_edges() == 0 {
        return Ok(MendingArtifacts {
            impaired_graph: g.clone(),
            removed_links: Vec::new(),
            mender_embeddings: EmbeddingState::zeros(g.n_users(), g.n_items(), cfg.dim),
            predicted_links: Vec::new(),
            losses: Vec::new(),
        });
    }
    let (impaired, removed) = impair_graph(g, hyper.impair_fraction, seed_value)?;
    let outcome = train_mender(&impaired, &removed, &cfg, seed_value)?;
    let predicted_links = if removed.is_empty() {
        Vec::new()
    } else {
        predict_links(g, &outcome.embeddings, hyper.threshold, hyper.mend_top_n)
    };
    Ok(MendingArtifacts {
        impaired_graph: impaired,
        removed_links: removed,
        mender_embeddings: outcome.embeddings,
        predicted_links,
        losses: outcome.losses,
    })
}

impl MendingArtifacts {
    /// `g` plus every predicted link.
    pub fn mended(&self, g: &BipartiteGraph) -> Result<BipartiteGraph> {
        g.with_edges(self.predicted_links.iter().map(|l| (l.user, l.item)))
    }

    pub fn write_tsv(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::from("user\titem\tscore\n");
        for l in &self.predicted_links {
            out.push_str(&format!("{}\t{}\t{:.6}\n", l.user, l.item, l.score));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
