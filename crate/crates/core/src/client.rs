//! Device-side state and the local training step.
//!
//! A device sees only its own training items and the broadcast item table.
//! Its user view comes from a one-layer ego graph. Devices that share data
//! add a contrastive term against the server-side views they were sent.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;

use crate::config::HyperParams;
use crate::data::Tier;
use crate::error::{Error, Result};
use crate::graph::{ego_backward, ego_infer, Table};
use crate::learn::{bpr_triple_grad, info_nce_with_grad, Adam, DeltaBundle};
use crate::seed;

/// Per-device state. The item table itself is not stored: every device's
/// copy equals the broadcast global table at the start of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub user: u32,
    pub tier: Tier,
    /// The user's training items, sorted.
    pub local_train: Vec<u32>,
    pub p_u: Vec<f64>,
    pub adam: Adam,
}

impl DeviceState {
    pub fn new(user: u32, tier: Tier, local_train: Vec<u32>, p_u: Vec<f64>) -> Self {
        DeviceState {
            user,
            tier,
            local_train,
            p_u,
            adam: Adam::default(),
        }
    }

    /// The device's current user view against the given item table.
    pub fn user_view(&self, items: &Table, alpha: [f64; 2]) -> Vec<f64> {
        let rows: Vec<&[f64]> = self.local_train.iter().map(|&i| items.row(i as usize)).collect();
        ego_infer(&self.p_u, &rows, alpha).user
    }
}

/// Server-side views sent to one device for contrastive learning.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReceivedViews {
    pub users: BTreeMap<u32, Vec<f64>>,
    pub items: BTreeMap<u32, Vec<f64>>,
}

impl ReceivedViews {
    pub fn is_empty(&self) -> bool {
        self.users.is_empty() && self.items.is_empty()
    }
}

/// What a device sends back after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub user: u32,
    pub tier: Tier,
    /// New minus old rows. Contains the user row only for sharing tiers.
    pub delta: DeltaBundle,
    /// Number of training pairs.
    pub weight: f64,
    /// Locally computed user view, only for sharing tiers.
    pub local_view: Option<Vec<f64>>,
    /// Items used as positives.
    pub positives: Vec<u32>,
    pub bpr_loss: f64,
    pub cl_loss: f64,
    pub reg_loss: f64,
    /// `bpr + lambda1 * cl + lambda * reg`.
    pub loss: f64,
}

/// `k` items outside `train` (sorted), drawn without replacement. When fewer
/// than `k` items qualify the draw wraps around and repeats them.
pub fn sample_negatives<R: Rng>(
    k: usize,
    n_items: usize,
    train: &[u32],
    rng: &mut R,
) -> Result<Vec<u32>> {
    let available = n_items.saturating_sub(train.len());
    if available == 0 {
        return Err(Error::contract("user has interacted with every item"));
    }
    let mut out = Vec::with_capacity(k);
    let mut used = HashSet::with_capacity(k.min(available));
    while out.len() < k {
        if used.len() == available {
            used.clear();
        }
        let j = rng.gen_range(0..n_items as u32);
        if train.binary_search(&j).is_err() && used.insert(j) {
            out.push(j);
        }
    }
    Ok(out)
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Device objective and its gradient for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceGrad {
    pub bpr: f64,
    pub cl: f64,
    pub reg: f64,
    /// `bpr + lambda1 * cl + lambda * reg`.
    pub total: f64,
    /// Gradient for `p_u`.
    pub user: Vec<f64>,
    /// Gradients for the positive and negative item rows.
    pub items: BTreeMap<u32, Vec<f64>>,
}

/// Ranking loss over `(local_train[k], negatives[k])` on the ego graph,
/// optional contrastive terms against `contrast`, and L2 on `p` and every
/// batch item row. `rows` must hold every positive and negative item.
pub fn device_gradients(
    user: u32,
    p: &[f64],
    local_train: &[u32],
    negatives: &[u32],
    rows: &BTreeMap<u32, Vec<f64>>,
    contrast: Option<&ReceivedViews>,
    hyper: &HyperParams,
) -> Result<DeviceGrad> {
    let alpha = hyper.device_alpha();
    let lambda = hyper.lambda;
    let lambda1 = hyper.cl_weight();
    let n = local_train.len();
    if negatives.len() != n {
        return Err(Error::contract("one negative per positive required"));
    }
    let local: Vec<&[f64]> = local_train.iter().map(|i| rows[i].as_slice()).collect();
    let views = ego_infer(p, &local, alpha);
    let neg_views: Vec<Vec<f64>> = negatives
        .iter()
        .map(|j| rows[j].iter().map(|x| alpha[0] * x).collect())
        .collect();

    let d = p.len();
    let mut g_user = vec![0.0; d];
    let mut g_items = vec![vec![0.0; d]; n];
    let mut g_neg: BTreeMap<u32, Vec<f64>> = BTreeMap::new();

    let mut bpr = 0.0;
    for k in 0..n {
        let t = bpr_triple_grad(&views.user, &views.items[k], &neg_views[k]);
        bpr += t.loss;
        axpy(&mut g_user, 1.0, &t.user);
        axpy(&mut g_items[k], 1.0, &t.pos);
        let slot = g_neg.entry(negatives[k]).or_insert_with(|| vec![0.0; d]);
        axpy(slot, alpha[0], &t.neg);
    }

    let mut cl = 0.0;
    if let Some(recv) = contrast {
        if let Some(own) = recv.users.keys().position(|&v| v == user) {
            let cands: Vec<&[f64]> = recv.users.values().map(Vec::as_slice).collect();
            let out = info_nce_with_grad(&[&views.user], &cands, &[own], hyper.tau)?;
            cl += out.loss;
            axpy(&mut g_user, lambda1, &out.anchors[0]);
        }
        let shared: Vec<usize> = (0..n)
            .filter(|&k| recv.items.contains_key(&local_train[k]))
            .collect();
        if !shared.is_empty() {
            let anchors: Vec<&[f64]> = shared.iter().map(|&k| views.items[k].as_slice()).collect();
            let cands: Vec<&[f64]> = shared
                .iter()
                .map(|&k| recv.items[&local_train[k]].as_slice())
                .collect();
            let positive: Vec<usize> = (0..shared.len()).collect();
            let out = info_nce_with_grad(&anchors, &cands, &positive, hyper.tau)?;
            cl += out.loss;
            for (&k, g) in shared.iter().zip(&out.anchors) {
                axpy(&mut g_items[k], lambda1, g);
            }
        }
    }

    let (mut gp, gq) = ego_backward(&g_user, &g_items, alpha);
    let mut grads: BTreeMap<u32, Vec<f64>> = local_train.iter().copied().zip(gq).collect();
    for (j, g) in g_neg {
        let slot = grads.entry(j).or_insert_with(|| vec![0.0; d]);
        axpy(slot, 1.0, &g);
    }

    let mut reg = p.iter().map(|x| x * x).sum::<f64>();
    axpy(&mut gp, 2.0 * lambda, p);
    for (i, g) in grads.iter_mut() {
        let row = &rows[i];
        reg += row.iter().map(|x| x * x).sum::<f64>();
        axpy(g, 2.0 * lambda, row);
    }
    Ok(DeviceGrad {
        bpr,
        cl,
        reg,
        total: bpr + lambda1 * cl + lambda * reg,
        user: gp,
        items: grads,
    })
}

/// Runs `local_epochs` full-batch Adam steps on the device's ego graph.
///
/// `NONE` devices minimise the ranking loss only, as do sharing devices whose
/// map holds no other user's view. Otherwise `lambda1` times the contrastive
/// loss is added: the user side contrasts the local user view against the
/// received user views (its own server view is the positive), and the item
/// side contrasts local item views against server item views for local items
/// present in the map.
pub fn client_local_train(
    dev: &mut DeviceState,
    items: &Table,
    received: Option<&ReceivedViews>,
    hyper: &HyperParams,
    seed_value: u64,
) -> Result<ClientUpload> {
    let alpha = hyper.device_alpha();
    let cfg = hyper.adam();
    let lambda = hyper.lambda;
    let lambda1 = hyper.cl_weight();
    let n = dev.local_train.len();
    // Without another user's view there is no contrastive set; training
    // falls back to the ranking loss.
    let contrast = match received {
        Some(r) if dev.tier.shares() && lambda1 > 0.0 && r.users.len() >= 2 => Some(r),
        _ => None,
    };

    let mut rows: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut p = dev.p_u.clone();
    let p_old = dev.p_u.clone();
    let (mut bpr_sum, mut cl_sum, mut reg_sum) = (0.0, 0.0, 0.0);
    let epochs = if n == 0 { 0 } else { hyper.local_epochs };

    for epoch in 0..epochs {
        let mut rng = seed::rng(seed_value, &[epoch as u64]);
        let negatives = sample_negatives(n, items.rows(), &dev.local_train, &mut rng)?;
        for &i in dev.local_train.iter().chain(&negatives) {
            rows.entry(i).or_insert_with(|| items.row(i as usize).to_vec());
        }

        let g = device_gradients(dev.user, &p, &dev.local_train, &negatives, &rows, contrast, hyper)?;
        let (gp, grads) = (g.user, g.items);
        let (bpr, cl, reg) = (g.bpr, g.cl, g.reg);

        if gp.iter().chain(grads.values().flatten()).any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!("device {} update", dev.user)));
        }
        dev.adam.users.begin_step();
        dev.adam.users.update_row(dev.user, &mut p, &gp, &cfg);
        dev.adam.items.begin_step();
        for (i, g) in &grads {
            let row = rows.get_mut(i).expect("row loaded");
            dev.adam.items.update_row(*i, row, g, &cfg);
        }

        bpr_sum += bpr;
        cl_sum += cl;
        reg_sum += reg;
    }

    let mut delta = DeltaBundle::default();
    for (&i, row) in &rows {
        let old = items.row(i as usize);
        delta
            .items
            .insert(i, row.iter().zip(old).map(|(a, b)| a - b).collect());
    }
    if dev.tier.shares() && epochs > 0 {
        delta
            .users
            .insert(dev.user, p.iter().zip(&p_old).map(|(a, b)| a - b).collect());
    }
    delta.check_finite(&format!("device {}", dev.user))?;
    dev.p_u = p;

    let local_view = dev.tier.shares().then(|| {
        let local: Vec<&[f64]> = dev
            .local_train
            .iter()
            .map(|i| rows.get(i).map_or_else(|| items.row(*i as usize), Vec::as_slice))
            .collect();
        ego_infer(&dev.p_u, &local, alpha).user
    });

    let e = epochs.max(1) as f64;
    let (bpr_loss, cl_loss, reg_loss) = (bpr_sum / e, cl_sum / e, reg_sum / e);
    Ok(ClientUpload {
        user: dev.user,
        tier: dev.tier,
        delta,
        weight: n as f64,
        local_view,
        positives: dev.local_train.clone(),
        bpr_loss,
        cl_loss,
        reg_loss,
        loss: bpr_loss + lambda1 * cl_loss + lambda * reg_loss,
    })
}
