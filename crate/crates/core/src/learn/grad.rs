//! Analytic gradients of the training losses through light graph
//! convolution.
//!
//! The forward map `E0 -> sum_l alpha_l A^l E0` is linear with a symmetric
//! operator, so the gradient with respect to the base tables is the same map
//! applied to the gradient with respect to the combined output.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::loss::{bpr_triple_grad, info_nce_with_grad, mending_link_grad};
use crate::error::{Error, Result};
use crate::graph::{propagate_combine, BipartiteGraph, EmbeddingState, Side, Table};

/// Sparse per-row vectors for the user and item tables. Used both for
/// gradients and for parameter deltas.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle {
    pub users: BTreeMap<u32, Vec<f64>>,
    pub items: BTreeMap<u32, Vec<f64>>,
}

impl GradientBundle {
    pub fn side(&self, side: Side) -> &BTreeMap<u32, Vec<f64>> {
        match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        }
    }

    pub fn side_mut(&mut self, side: Side) -> &mut BTreeMap<u32, Vec<f64>> {
        match side {
            Side::User => &mut self.users,
            Side::Item => &mut self.items,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty() && self.items.is_empty()
    }

    pub fn add_row(&mut self, side: Side, row: u32, values: &[f64]) {
        let slot = self
            .side_mut(side)
            .entry(row)
            .or_insert_with(|| vec![0.0; values.len()]);
        for (o, v) in slot.iter_mut().zip(values) {
            *o += v;
        }
    }

    /// Fails with the first row holding a non-finite entry.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for side in [Side::User, Side::Item] {
            if let Some((row, _)) = self
                .side(side)
                .iter()
                .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            {
                return Err(Error::numeric(format!("{context}: {side:?} row {row}")));
            }
        }
        Ok(())
    }
}

/// A parameter delta has the same shape as a gradient.
pub type DeltaBundle = GradientBundle;

/// Which view of a contrastive pair carries gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    /// The propagated rows are anchors; fixed views are candidates.
    Anchors,
    /// Fixed views are anchors; the propagated rows are candidates.
    Candidates,
}

/// InfoNCE term over the rows `rows` of one side, paired position-wise with
/// `fixed` views; row `k` and `fixed[k]` form the positive pair.
#[derive(Debug, Clone)]
pub struct ContrastTerm {
    pub side: Side,
    pub rows: Vec<u32>,
    pub fixed: Vec<Vec<f64>>,
    pub trainable: Trainable,
}

/// Everything that enters one loss evaluation on a graph.
#[derive(Debug, Clone, Default)]
pub struct LossSpec {
    /// `(user, positive item, negative item)` triples.
    pub bpr: Vec<(u32, u32, u32)>,
    /// Weight of the squared norm of the base rows used by `bpr`.
    pub lambda: f64,
    pub contrast: Vec<ContrastTerm>,
    pub lambda1: f64,
    pub tau: f64,
    /// `(user, item, target)` links for the link-recovery loss.
    pub mending: Vec<(u32, u32, f64)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub cl: f64,
    pub reg: f64,
    pub mending: f64,
    pub total: f64,
}

impl LossSpec {
    /// Distinct base rows entering the regulariser.
    pub fn reg_rows(&self) -> (Vec<u32>, Vec<u32>) {
        let mut users: Vec<u32> = self.bpr.iter().map(|t| t.0).collect();
        let mut items: Vec<u32> = self.bpr.iter().flat_map(|t| [t.1, t.2]).collect();
        users.sort_unstable();
        users.dedup();
        items.sort_unstable();
        items.dedup();
        (users, items)
    }
}

/// Loss value at `state` after propagation with weights `alpha`.
pub fn evaluate_loss(
    g: &BipartiteGraph,
    state: &EmbeddingState,
    alpha: &[f64],
    spec: &LossSpec,
) -> Result<LossBreakdown> {
    forward(g, state, alpha, spec, false).map(|(l, _)| l)
}

/// Loss and gradient with respect to the base tables `state`.
pub fn compute_gradients(
    g: &BipartiteGraph,
    state: &EmbeddingState,
    alpha: &[f64],
    spec: &LossSpec,
) -> Result<(LossBreakdown, GradientBundle)> {
    let (loss, upstream) = forward(g, state, alpha, spec, true)?;
    let upstream = upstream.expect("gradient requested");
    let mut base = propagate_combine(g, &upstream, alpha)?;

    let (reg_users, reg_items) = spec.reg_rows();
    if spec.lambda != 0.0 {
        for &u in &reg_users {
            let src = state.users.row(u as usize).to_vec();
            for (o, x) in base.users.row_mut(u as usize).iter_mut().zip(src) {
                *o += 2.0 * spec.lambda * x;
            }
        }
        for &i in &reg_items {
            let src = state.items.row(i as usize).to_vec();
            for (o, x) in base.items.row_mut(i as usize).iter_mut().zip(src) {
                *o += 2.0 * spec.lambda * x;
            }
        }
    }

    let mut bundle = GradientBundle::default();
    for side in [Side::User, Side::Item] {
        let t = base.table(side);
        for r in 0..t.rows() {
            let row = t.row(r);
            if row.iter().any(|&x| x != 0.0) {
                bundle.side_mut(side).insert(r as u32, row.to_vec());
            }
        }
    }
    bundle.check_finite("gradient")?;
    Ok((loss, bundle))
}

fn add_into(t: &mut Table, row: u32, g: &[f64], scale: f64) {
    for (o, x) in t.row_mut(row as usize).iter_mut().zip(g) {
        *o += scale * x;
    }
}

fn forward(
    g: &BipartiteGraph,
    state: &EmbeddingState,
    alpha: &[f64],
    spec: &LossSpec,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<EmbeddingState>)> {
    let fin = propagate_combine(g, state, alpha)?;
    let mut grad = want_grad.then(|| EmbeddingState::zeros(g.n_users(), g.n_items(), state.dim()));
    let mut loss = LossBreakdown::default();

    for &(u, i, j) in &spec.bpr {
        let t = bpr_triple_grad(
            fin.users.row(u as usize),
            fin.items.row(i as usize),
            fin.items.row(j as usize),
        );
        loss.bpr += t.loss;
        if let Some(gs) = grad.as_mut() {
            add_into(&mut gs.users, u, &t.user, 1.0);
            add_into(&mut gs.items, i, &t.pos, 1.0);
            add_into(&mut gs.items, j, &t.neg, 1.0);
        }
    }

    for term in &spec.contrast {
        if term.rows.is_empty() {
            continue;
        }
        if term.rows.len() != term.fixed.len() {
            return Err(Error::contract("contrast rows and fixed views differ in length"));
        }
        let table = fin.table(term.side);
        let live: Vec<&[f64]> = term.rows.iter().map(|&r| table.row(r as usize)).collect();
        let fixed: Vec<&[f64]> = term.fixed.iter().map(Vec::as_slice).collect();
        let positive: Vec<usize> = (0..live.len()).collect();
        let (anchors, candidates) = match term.trainable {
            Trainable::Anchors => (&live, &fixed),
            Trainable::Candidates => (&fixed, &live),
        };
        let out = info_nce_with_grad(anchors, candidates, &positive, spec.tau)?;
        loss.cl += out.loss;
        if let Some(gs) = grad.as_mut() {
            let live_grads = match term.trainable {
                Trainable::Anchors => &out.anchors,
                Trainable::Candidates => &out.candidates,
            };
            let t = gs.table_mut(term.side);
            for (&r, gr) in term.rows.iter().zip(live_grads) {
                add_into(t, r, gr, spec.lambda1);
            }
        }
    }

    for &(u, i, target) in &spec.mending {
        let (l, gu, gi) = mending_link_grad(fin.users.row(u as usize), fin.items.row(i as usize), target);
        loss.mending += l;
        if let Some(gs) = grad.as_mut() {
            add_into(&mut gs.users, u, &gu, 1.0);
            add_into(&mut gs.items, i, &gi, 1.0);
        }
    }

    let (ru, ri) = spec.reg_rows();
    let reg_u: f64 = ru.iter().map(|&u| sq(state.users.row(u as usize))).sum();
    let reg_i: f64 = ri.iter().map(|&i| sq(state.items.row(i as usize))).sum();
    loss.reg = reg_u + reg_i;
    loss.total = loss.bpr + spec.lambda1 * loss.cl + spec.lambda * loss.reg + loss.mending;
    if !loss.total.is_finite() {
        return Err(Error::numeric("loss"));
    }
    Ok((loss, grad))
}

fn sq(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}
