//! Scalar losses on final embeddings, each paired with its gradient with
//! respect to the vectors it reads.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, defined as 0 when either vector has norm below 1e-12.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Cosine similarity and its gradients with respect to `a` and `b`.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return (0.0, vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let c = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| y * inv - c * x / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| x * inv - c * y / (nb * nb))
        .collect();
    (c, ga, gb)
}

/// `-ln(sigmoid(x))`, evaluated without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Squared L2 norm summed over rows.
pub fn l2_penalty(rows: &[&[f64]]) -> f64 {
    rows.iter().map(|r| dot(r, r)).sum()
}

/// Pairwise ranking loss with one negative per positive, plus `lambda`
/// times the squared norm of `reg_rows`.
pub fn bpr_loss(
    user: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    lambda: f64,
    reg_rows: &[&[f64]],
) -> Result<f64> {
    if positives.len() != negatives.len() {
        return Err(Error::contract(format!(
            "{} positives paired with {} negatives",
            positives.len(),
            negatives.len()
        )));
    }
    let rank: f64 = positives
        .iter()
        .zip(negatives)
        .map(|(p, n)| neg_log_sigmoid(cosine_sim(user, p) - cosine_sim(user, n)))
        .sum();
    Ok(rank + lambda * l2_penalty(reg_rows))
}

/// Gradients of one BPR triple with respect to user, positive and negative.
pub struct BprGrad {
    pub loss: f64,
    pub user: Vec<f64>,
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

pub fn bpr_triple_grad(user: &[f64], pos: &[f64], neg: &[f64]) -> BprGrad {
    let (cp, gup, gp) = cosine_with_grad(user, pos);
    let (cn, gun, gn) = cosine_with_grad(user, neg);
    let x = cp - cn;
    // d/dx -ln sigmoid(x) = -sigmoid(-x)
    let s = -sigmoid(-x);
    BprGrad {
        loss: neg_log_sigmoid(x),
        user: gup.iter().zip(&gun).map(|(a, b)| s * (a - b)).collect(),
        pos: gp.iter().map(|g| s * g).collect(),
        neg: gn.iter().map(|g| -s * g).collect(),
    }
}

/// InfoNCE over anchors and candidates: anchor `k` is pulled towards
/// `candidates[positive[k]]` and pushed from every other candidate, with
/// logits `cos / tau`.
pub struct InfoNceGrad {
    pub loss: f64,
    pub anchors: Vec<Vec<f64>>,
    pub candidates: Vec<Vec<f64>>,
}

pub fn info_nce_with_grad(
    anchors: &[&[f64]],
    candidates: &[&[f64]],
    positive: &[usize],
    tau: f64,
) -> Result<InfoNceGrad> {
    if anchors.len() != positive.len() {
        return Err(Error::contract("one positive index per anchor required"));
    }
    if let Some(&bad) = positive.iter().find(|&&p| p >= candidates.len()) {
        return Err(Error::contract(format!(
            "positive index {bad} outside {} candidates",
            candidates.len()
        )));
    }
    let dim = anchors
        .first()
        .or(candidates.first())
        .map_or(0, |v| v.len());
    let unit = |v: &[f64]| -> (f64, Vec<f64>) {
        let n = norm(v);
        if n < NORM_EPS {
            (0.0, vec![0.0; v.len()])
        } else {
            (n, v.iter().map(|x| x / n).collect())
        }
    };
    let a_hat: Vec<(f64, Vec<f64>)> = anchors.iter().map(|a| unit(a)).collect();
    let c_hat: Vec<(f64, Vec<f64>)> = candidates.iter().map(|c| unit(c)).collect();

    let mut out = InfoNceGrad {
        loss: 0.0,
        anchors: vec![vec![0.0; dim]; anchors.len()],
        candidates: vec![vec![0.0; dim]; candidates.len()],
    };
    // d cos(a, c) / da = (c_hat - cos * a_hat) / |a|, and symmetrically for c.
    let mut c_dir = vec![vec![0.0; dim]; candidates.len()];
    let mut c_self = vec![0.0; candidates.len()];
    let mut cos = vec![0.0; candidates.len()];
    let mut logits = vec![0.0; candidates.len()];
    for (k, (na, ah)) in a_hat.iter().enumerate() {
        for (v, (_, ch)) in c_hat.iter().enumerate() {
            cos[v] = dot(ah, ch);
            logits[v] = cos[v] / tau;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + z.ln();
        out.loss += lse - logits[positive[k]];
        if *na == 0.0 {
            continue;
        }
        let mut a_dir = vec![0.0; dim];
        let mut a_self = 0.0;
        for (v, (_, ch)) in c_hat.iter().enumerate() {
            let softmax = (logits[v] - lse).exp();
            let coef = (softmax - if v == positive[k] { 1.0 } else { 0.0 }) / tau;
            if coef == 0.0 {
                continue;
            }
            for (o, x) in a_dir.iter_mut().zip(ch) {
                *o += coef * x;
            }
            a_self += coef * cos[v];
            for (o, x) in c_dir[v].iter_mut().zip(ah) {
                *o += coef * x;
            }
            c_self[v] += coef * cos[v];
        }
        for ((o, d), x) in out.anchors[k].iter_mut().zip(&a_dir).zip(ah) {
            *o = (d - a_self * x) / na;
        }
    }
    for (v, (nc, ch)) in c_hat.iter().enumerate() {
        if *nc == 0.0 {
            continue;
        }
        for ((o, d), x) in out.candidates[v].iter_mut().zip(&c_dir[v]).zip(ch) {
            *o = (d - c_self[v] * x) / nc;
        }
    }
    Ok(out)
}

/// InfoNCE between two views keyed by node id. Node `u`'s local view is the
/// anchor, its global view the positive, every other global view a negative.
pub fn infonce_loss(
    local: &BTreeMap<u32, Vec<f64>>,
    global: &BTreeMap<u32, Vec<f64>>,
    tau: f64,
) -> Result<f64> {
    if !local.keys().eq(global.keys()) {
        return Err(Error::contract("local and global views cover different ids"));
    }
    if local.is_empty() {
        return Err(Error::contract("contrastive batch is empty"));
    }
    let anchors: Vec<&[f64]> = local.values().map(Vec::as_slice).collect();
    let candidates: Vec<&[f64]> = global.values().map(Vec::as_slice).collect();
    let positive: Vec<usize> = (0..anchors.len()).collect();
    Ok(info_nce_with_grad(&anchors, &candidates, &positive, tau)?.loss)
}

/// `|cos(z_u, z_i) - target|` and its subgradient (0 at the kink).
pub fn mending_link_grad(zu: &[f64], zi: &[f64], target: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let (c, gu, gi) = cosine_with_grad(zu, zi);
    let r = c - target;
    let s = if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    };
    (
        r.abs(),
        gu.into_iter().map(|g| s * g).collect(),
        gi.into_iter().map(|g| s * g).collect(),
    )
}

/// Link-recovery loss: positive links target cosine 1, negatives target 0.
pub fn mending_loss(
    users: &[&[f64]],
    items: &[&[f64]],
    positive_links: &[(usize, usize)],
    negative_links: &[(usize, usize)],
) -> f64 {
    let pos = positive_links
        .iter()
        .map(|&(u, i)| (cosine_sim(users[u], items[i]) - 1.0).abs());
    let neg = negative_links
        .iter()
        .map(|&(u, i)| cosine_sim(users[u], items[i]).abs());
    pos.chain(neg).sum()
}

/// `bpr + lambda1 * cl + lambda * reg`, where `bpr` excludes its own penalty.
pub fn combined_loss(bpr: f64, cl: f64, lambda1: f64, lambda: f64, reg: f64) -> f64 {
    bpr + lambda1 * cl + lambda * reg
}
