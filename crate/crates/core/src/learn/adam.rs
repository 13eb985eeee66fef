//! Lazy Adam: moments live only for rows that have received a gradient, and
//! rows absent from a step are left untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::grad::GradientBundle;
use crate::graph::{EmbeddingState, Side};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments for one table, with a per-table step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamTable {
    pub step: u64,
    moments: BTreeMap<u32, (Vec<f64>, Vec<f64>)>,
}

impl AdamTable {
    /// Advances the step counter; call once before updating the rows of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn moments(&self, row: u32) -> Option<(&[f64], &[f64])> {
        self.moments.get(&row).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Applies the bias-corrected update to `param` in place.
    pub fn update_row(&mut self, row: u32, param: &mut [f64], grad: &[f64], cfg: &AdamConfig) {
        let (m, v) = self
            .moments
            .entry(row)
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for k in 0..grad.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * grad[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            param[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// Optimiser state for a pair of embedding tables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    pub users: AdamTable,
    pub items: AdamTable,
}

impl Adam {
    pub fn table_mut(&mut self, side: Side) -> &mut AdamTable {
        match side {
            Side::User => &mut self.users,
            Side::Item => &mut self.items,
        }
    }

    /// One optimiser step over the rows present in `grads`.
    pub fn step(&mut self, state: &mut EmbeddingState, grads: &GradientBundle, cfg: &AdamConfig) {
        for side in [Side::User, Side::Item] {
            let rows = grads.side(side);
            if rows.is_empty() {
                continue;
            }
            let opt = self.table_mut(side);
            opt.begin_step();
            let table = state.table_mut(side);
            for (&r, g) in rows {
                opt.update_row(r, table.row_mut(r as usize), g, cfg);
            }
        }
    }
}

/// Convenience wrapper matching the functional form `state' = adam(state, grads)`.
pub fn adam_step(
    state: &EmbeddingState,
    grads: &GradientBundle,
    opt: &mut Adam,
    cfg: &AdamConfig,
) -> EmbeddingState {
    let mut next = state.clone();
    opt.step(&mut next, grads, cfg);
    next
}
