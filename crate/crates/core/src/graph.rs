//! User-item bipartite graphs and light graph convolution.
//!
//! Propagation follows the symmetric normalisation
//! `e_u^(l+1) = sum_{i in N(u)} e_i^(l) / (sqrt|N(u)| sqrt|N(i)|)` (and the
//! mirror rule for items). The stacked operator over users and items is
//! symmetric, so the adjoint of `propagate + combine` is the same map applied
//! to the upstream gradient.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `rows x dim` matrix of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Table {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Table {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_vec(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::contract(format!(
                "table data has {} values, expected {}x{}",
                data.len(),
                rows,
                dim
            )));
        }
        Ok(Table { rows, dim, data })
    }

    /// Xavier-uniform initialisation with fan-in `dim` and fan-out `rows`.
    pub fn xavier<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + dim) as f64).sqrt();
        let data = (0..rows * dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Table { rows, dim, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn scaled_add(&mut self, alpha: f64, other: &Table) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }
}

/// User and item embedding tables sharing one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingState {
    pub users: Table,
    pub items: Table,
}

impl EmbeddingState {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Self {
        EmbeddingState {
            users: Table::zeros(n_users, dim),
            items: Table::zeros(n_items, dim),
        }
    }

    pub fn xavier<R: Rng>(n_users: usize, n_items: usize, dim: usize, rng: &mut R) -> Self {
        EmbeddingState {
            users: Table::xavier(n_users, dim, rng),
            items: Table::xavier(n_items, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.users.dim
    }

    pub fn is_finite(&self) -> bool {
        self.users.is_finite() && self.items.is_finite()
    }

    pub fn table(&self, side: Side) -> &Table {
        match side {
            Side::User => &self.users,
            Side::Item => &self.items,
        }
    }

    pub fn table_mut(&mut self, side: Side) -> &mut Table {
        match side {
            Side::User => &mut self.users,
            Side::Item => &mut self.items,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    User,
    Item,
}

/// Undirected user-item graph stored as two CSR halves.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    n_users: usize,
    n_items: usize,
    user_offsets: Vec<usize>,
    user_adj: Vec<u32>,
    item_offsets: Vec<usize>,
    item_adj: Vec<u32>,
}

fn csr(n: usize, mut edges: Vec<(u32, u32)>) -> (Vec<usize>, Vec<u32>) {
    edges.sort_unstable();
    let mut offsets = vec![0usize; n + 1];
    for &(src, _) in &edges {
        offsets[src as usize + 1] += 1;
    }
    for k in 0..n {
        offsets[k + 1] += offsets[k];
    }
    (offsets, edges.into_iter().map(|(_, dst)| dst).collect())
}

impl BipartiteGraph {
    /// Builds the graph from `(user, item)` pairs; duplicates collapse to one edge.
    pub fn build<I>(pairs: I, n_users: usize, n_items: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, u32)>,
    {
        let mut set = BTreeSet::new();
        for (u, i) in pairs {
            if u as usize >= n_users {
                return Err(Error::Index {
                    kind: "user",
                    index: u as usize,
                    len: n_users,
                });
            }
            if i as usize >= n_items {
                return Err(Error::Index {
                    kind: "item",
                    index: i as usize,
                    len: n_items,
                });
            }
            set.insert((u, i));
        }
        let forward: Vec<(u32, u32)> = set.iter().copied().collect();
        let backward: Vec<(u32, u32)> = set.iter().map(|&(u, i)| (i, u)).collect();
        let (user_offsets, user_adj) = csr(n_users, forward);
        let (item_offsets, item_adj) = csr(n_items, backward);
        Ok(BipartiteGraph {
            n_users,
            n_items,
            user_offsets,
            user_adj,
            item_offsets,
            item_adj,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_edges(&self) -> usize {
        self.user_adj.len()
    }

    pub fn user_neighbors(&self, u: usize) -> &[u32] {
        &self.user_adj[self.user_offsets[u]..self.user_offsets[u + 1]]
    }

    pub fn item_neighbors(&self, i: usize) -> &[u32] {
        &self.item_adj[self.item_offsets[i]..self.item_offsets[i + 1]]
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.user_offsets[u + 1] - self.user_offsets[u]
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.item_offsets[i + 1] - self.item_offsets[i]
    }

    pub fn has_edge(&self, u: usize, i: usize) -> bool {
        self.user_neighbors(u).binary_search(&(i as u32)).is_ok()
    }

    /// Edges in ascending `(user, item)` order.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.n_users)
            .flat_map(move |u| self.user_neighbors(u).iter().map(move |&i| (u as u32, i)))
    }

    pub fn with_edges<I>(&self, extra: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, u32)>,
    {
        BipartiteGraph::build(self.edges().chain(extra), self.n_users, self.n_items)
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        for (u, i) in self.edges() {
            writeln!(out, "{u}\t{i}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    fn check_dims(&self, e: &EmbeddingState) -> Result<()> {
        if e.users.rows != self.n_users || e.items.rows != self.n_items {
            return Err(Error::contract(format!(
                "embedding tables {}x{} do not match graph {}x{}",
                e.users.rows, e.items.rows, self.n_users, self.n_items
            )));
        }
        Ok(())
    }

    /// One propagation layer.
    fn step(&self, prev: &EmbeddingState) -> EmbeddingState {
        let dim = prev.dim();
        let mut next = EmbeddingState::zeros(self.n_users, self.n_items, dim);
        let inv_sqrt = |deg: usize| 1.0 / (deg as f64).sqrt();
        next.users
            .data
            .par_chunks_mut(dim.max(1))
            .enumerate()
            .for_each(|(u, out)| {
                let du = self.user_degree(u);
                if du == 0 {
                    return;
                }
                for &i in self.user_neighbors(u) {
                    let c = inv_sqrt(du) * inv_sqrt(self.item_degree(i as usize));
                    for (o, x) in out.iter_mut().zip(prev.items.row(i as usize)) {
                        *o += c * x;
                    }
                }
            });
        next.items
            .data
            .par_chunks_mut(dim.max(1))
            .enumerate()
            .for_each(|(i, out)| {
                let di = self.item_degree(i);
                if di == 0 {
                    return;
                }
                for &u in self.item_neighbors(i) {
                    let c = inv_sqrt(di) * inv_sqrt(self.user_degree(u as usize));
                    for (o, x) in out.iter_mut().zip(prev.users.row(u as usize)) {
                        *o += c * x;
                    }
                }
            });
        next
    }
}

/// Runs `layers` rounds of light graph convolution, returning all
/// `layers + 1` states starting with `e0`.
pub fn lgc_propagate(
    g: &BipartiteGraph,
    e0: &EmbeddingState,
    layers: usize,
) -> Result<Vec<EmbeddingState>> {
    g.check_dims(e0)?;
    let mut out = Vec::with_capacity(layers + 1);
    out.push(e0.clone());
    for l in 0..layers {
        let next = g.step(&out[l]);
        out.push(next);
    }
    Ok(out)
}

/// Weighted sum of per-layer states.
pub fn layer_combine(layers: &[EmbeddingState], alpha: &[f64]) -> Result<EmbeddingState> {
    if layers.len() != alpha.len() || layers.is_empty() {
        return Err(Error::contract(format!(
            "{} layer weights for {} layers",
            alpha.len(),
            layers.len()
        )));
    }
    let first = &layers[0];
    let mut out = EmbeddingState::zeros(first.users.rows, first.items.rows, first.dim());
    for (layer, &a) in layers.iter().zip(alpha) {
        out.users.scaled_add(a, &layer.users);
        out.items.scaled_add(a, &layer.items);
    }
    Ok(out)
}

/// `1 / (L + 1)` for each of the `L + 1` layers.
pub fn default_alpha(layers: usize) -> Vec<f64> {
    vec![1.0 / (layers + 1) as f64; layers + 1]
}

/// `layer_combine(lgc_propagate(g, e0, alpha.len() - 1), alpha)`.
///
/// Also the adjoint map: feeding a gradient with respect to the combined
/// output yields the gradient with respect to `e0`.
pub fn propagate_combine(
    g: &BipartiteGraph,
    e0: &EmbeddingState,
    alpha: &[f64],
) -> Result<EmbeddingState> {
    if alpha.is_empty() {
        return Err(Error::contract("empty layer weights"));
    }
    g.check_dims(e0)?;
    let mut acc = EmbeddingState::zeros(g.n_users, g.n_items, e0.dim());
    acc.users.scaled_add(alpha[0], &e0.users);
    acc.items.scaled_add(alpha[0], &e0.items);
    let mut cur = e0.clone();
    for &a in &alpha[1..] {
        cur = g.step(&cur);
        acc.users.scaled_add(a, &cur.users);
        acc.items.scaled_add(a, &cur.items);
    }
    Ok(acc)
}

/// Device-side views on a first-order ego graph.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoViews {
    pub user: Vec<f64>,
    /// One view per local item, in input order.
    pub items: Vec<Vec<f64>>,
}

/// Closed-form single-layer inference on a user's ego graph.
///
/// Every local item has the user as its only neighbour, so with `n` local
/// items: `e_u = a0 p_u + a1 sum_i q_i / sqrt(n)` and
/// `e_i = a0 q_i + a1 p_u / sqrt(n)`. With no local items `e_u = a0 p_u`.
pub fn ego_infer(p_u: &[f64], local_items: &[&[f64]], alpha: [f64; 2]) -> EgoViews {
    let [a0, a1] = alpha;
    let n = local_items.len();
    let mut user: Vec<f64> = p_u.iter().map(|x| a0 * x).collect();
    if n == 0 {
        return EgoViews {
            user,
            items: Vec::new(),
        };
    }
    let c = a1 / (n as f64).sqrt();
    for q in local_items {
        for (o, x) in user.iter_mut().zip(q.iter()) {
            *o += c * x;
        }
    }
    let items = local_items
        .iter()
        .map(|q| q.iter().zip(p_u).map(|(qi, pu)| a0 * qi + c * pu).collect())
        .collect();
    EgoViews { user, items }
}

/// Adjoint of [`ego_infer`]: maps gradients on the views back onto `p_u`
/// and the local item rows.
pub fn ego_backward(
    grad_user: &[f64],
    grad_items: &[Vec<f64>],
    alpha: [f64; 2],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let [a0, a1] = alpha;
    let n = grad_items.len();
    let mut gp: Vec<f64> = grad_user.iter().map(|x| a0 * x).collect();
    if n == 0 {
        return (gp, Vec::new());
    }
    let c = a1 / (n as f64).sqrt();
    for gi in grad_items {
        for (o, x) in gp.iter_mut().zip(gi) {
            *o += c * x;
        }
    }
    let gq = grad_items
        .iter()
        .map(|gi| gi.iter().zip(grad_user).map(|(g, gu)| a0 * g + c * gu).collect())
        .collect();
    (gp, gq)
}
