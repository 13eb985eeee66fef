//! Interaction data: loading, k-core filtering, per-user splits, synthetic
//! corpora and per-user data-contribution decisions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Implicit-feedback interactions with dense ids, before splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    /// Raw id for each dense user id.
    pub user_ids: Vec<u64>,
    /// Raw id for each dense item id.
    pub item_ids: Vec<u64>,
    /// Distinct `(user, item)` pairs in first-appearance order.
    pub interactions: Vec<(u32, u32)>,
}

impl InteractionDataset {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Densifies raw `(user, item)` pairs in first-appearance order and drops
    /// duplicate pairs.
    pub fn from_raw<I: IntoIterator<Item = (u64, u64)>>(raw: I) -> Self {
        let mut users: HashMap<u64, u32> = HashMap::new();
        let mut items: HashMap<u64, u32> = HashMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut seen = HashSet::new();
        let mut interactions = Vec::new();
        for (ru, ri) in raw {
            let u = *users.entry(ru).or_insert_with(|| {
                user_ids.push(ru);
                (user_ids.len() - 1) as u32
            });
            let i = *items.entry(ri).or_insert_with(|| {
                item_ids.push(ri);
                (item_ids.len() - 1) as u32
            });
            if seen.insert((u, i)) {
                interactions.push((u, i));
            }
        }
        InteractionDataset {
            user_ids,
            item_ids,
            interactions,
        }
    }
}

/// Reads whitespace-separated `user item [ignored...]` lines.
pub fn load_interactions(path: &Path) -> Result<InteractionDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut tokens = line.split_whitespace();
        let Some(first) = tokens.next() else {
            continue;
        };
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let second = tokens
            .next()
            .ok_or_else(|| parse_err("expected at least two tokens".into()))?;
        let u = first
            .parse::<u64>()
            .map_err(|_| parse_err(format!("user id {first:?} is not an integer")))?;
        let i = second
            .parse::<u64>()
            .map_err(|_| parse_err(format!("item id {second:?} is not an integer")))?;
        raw.push((u, i));
    }
    Ok(InteractionDataset::from_raw(raw))
}

/// Iteratively drops users with fewer than `min_user` and items with fewer
/// than `min_item` interactions until nothing changes, then re-densifies.
pub fn filter_k_core(
    ds: &InteractionDataset,
    min_user: usize,
    min_item: usize,
) -> Result<InteractionDataset> {
    let mut alive: Vec<(u32, u32)> = ds.interactions.clone();
    loop {
        let mut du = vec![0usize; ds.n_users()];
        let mut di = vec![0usize; ds.n_items()];
        for &(u, i) in &alive {
            du[u as usize] += 1;
            di[i as usize] += 1;
        }
        let before = alive.len();
        alive.retain(|&(u, i)| du[u as usize] >= min_user && di[i as usize] >= min_item);
        if alive.len() == before {
            break;
        }
    }
    if alive.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }
    // re-densify, keeping the relative order of surviving ids
    let mut umap = vec![u32::MAX; ds.n_users()];
    let mut imap = vec![u32::MAX; ds.n_items()];
    for &(u, i) in &alive {
        umap[u as usize] = 0;
        imap[i as usize] = 0;
    }
    let mut user_ids = Vec::new();
    for (u, slot) in umap.iter_mut().enumerate() {
        if *slot == 0 {
            *slot = user_ids.len() as u32;
            user_ids.push(ds.user_ids[u]);
        }
    }
    let mut item_ids = Vec::new();
    for (i, slot) in imap.iter_mut().enumerate() {
        if *slot == 0 {
            *slot = item_ids.len() as u32;
            item_ids.push(ds.item_ids[i]);
        }
    }
    let interactions = alive
        .into_iter()
        .map(|(u, i)| (umap[u as usize], imap[i as usize]))
        .collect();
    Ok(InteractionDataset {
        user_ids,
        item_ids,
        interactions,
    })
}

/// Dataset with per-user train/validation/test item lists (each sorted).
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
    pub train: Vec<Vec<u32>>,
    pub val: Vec<Vec<u32>>,
    pub test: Vec<Vec<u32>>,
}

impl SplitDataset {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn train_pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        pairs_of(&self.train)
    }

    pub fn n_train(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    /// Writes `train.tsv`, `val.tsv`, `test.tsv` (dense ids) and `idmap.tsv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, lists) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let path = dir.join(format!("{name}.tsv"));
            let mut out = String::new();
            for (u, i) in pairs_of(lists) {
                out.push_str(&format!("{u}\t{i}\n"));
            }
            fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("idmap.tsv");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for (k, raw) in self.user_ids.iter().enumerate() {
            writeln!(f, "user\t{k}\t{raw}").map_err(|e| Error::io(&path, e))?;
        }
        for (k, raw) in self.item_ids.iter().enumerate() {
            writeln!(f, "item\t{k}\t{raw}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads a snapshot written by [`SplitDataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("idmap.tsv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut user_ids = BTreeMap::new();
        let mut item_ids = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Parse {
                path: path.clone(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(err("expected kind, dense id, raw id"));
            }
            let dense: u32 = f[1].parse().map_err(|_| err("bad dense id"))?;
            let raw: u64 = f[2].parse().map_err(|_| err("bad raw id"))?;
            match f[0] {
                "user" => user_ids.insert(dense, raw),
                "item" => item_ids.insert(dense, raw),
                _ => return Err(err("kind must be user or item")),
            };
        }
        let user_ids: Vec<u64> = user_ids.into_values().collect();
        let item_ids: Vec<u64> = item_ids.into_values().collect();
        let mut lists = Vec::new();
        for name in ["train", "val", "test"] {
            let path = dir.join(format!("{name}.tsv"));
            let raw = load_dense_pairs(&path)?;
            let mut per_user = vec![Vec::new(); user_ids.len()];
            for (u, i) in raw {
                if u as usize >= user_ids.len() || i as usize >= item_ids.len() {
                    return Err(Error::contract(format!(
                        "{}: pair ({u}, {i}) outside id map",
                        path.display()
                    )));
                }
                per_user[u as usize].push(i);
            }
            for l in &mut per_user {
                l.sort_unstable();
            }
            lists.push(per_user);
        }
        let test = lists.pop().unwrap();
        let val = lists.pop().unwrap();
        let train = lists.pop().unwrap();
        Ok(SplitDataset {
            user_ids,
            item_ids,
            train,
            val,
            test,
        })
    }
}

fn load_dense_pairs(path: &Path) -> Result<Vec<(u32, u32)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut t = line.split_whitespace();
        let (Some(a), Some(b)) = (t.next(), t.next()) else {
            continue;
        };
        let parse = |s: &str| {
            s.parse::<u32>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: format!("{s:?} is not a dense id"),
            })
        };
        out.push((parse(a)?, parse(b)?));
    }
    Ok(out)
}

fn pairs_of(lists: &[Vec<u32>]) -> impl Iterator<Item = (u32, u32)> + '_ {
    lists
        .iter()
        .enumerate()
        .flat_map(|(u, items)| items.iter().map(move |&i| (u as u32, i)))
}

/// Splits each user's interactions at random in proportion `ratios`
/// (train, val, test). Val and test sizes round down, so every user keeps at
/// least one training interaction.
pub fn split_dataset(ds: &InteractionDataset, ratios: [u32; 3], seed_value: u64) -> Result<SplitDataset> {
    if ratios.contains(&0) {
        return Err(Error::contract("split ratios must be positive"));
    }
    let total: usize = ratios.iter().map(|&r| r as usize).sum();
    let mut per_user = vec![Vec::new(); ds.n_users()];
    for &(u, i) in &ds.interactions {
        per_user[u as usize].push(i);
    }
    let mut train = Vec::with_capacity(ds.n_users());
    let mut val = Vec::with_capacity(ds.n_users());
    let mut test = Vec::with_capacity(ds.n_users());
    for (u, items) in per_user.iter_mut().enumerate() {
        items.sort_unstable();
        let mut rng = seed::rng(seed_value, &[seed::SPLIT, u as u64]);
        items.shuffle(&mut rng);
        let n = items.len();
        let mut n_val = n * ratios[1] as usize / total;
        let mut n_test = n * ratios[2] as usize / total;
        while n > 0 && n_val + n_test >= n {
            if n_test >= n_val && n_test > 0 {
                n_test -= 1;
            } else {
                n_val -= 1;
            }
        }
        let mut te = items[..n_test].to_vec();
        let mut va = items[n_test..n_test + n_val].to_vec();
        let mut tr = items[n_test + n_val..].to_vec();
        te.sort_unstable();
        va.sort_unstable();
        tr.sort_unstable();
        train.push(tr);
        val.push(va);
        test.push(te);
    }
    Ok(SplitDataset {
        user_ids: ds.user_ids.clone(),
        item_ids: ds.item_ids.clone(),
        train,
        val,
        test,
    })
}

/// Planted block-structure corpus. User `u` belongs to cluster `u % k` and
/// item `i` to cluster `i % k`; a pair interacts with probability `density`
/// inside a cluster and `density / 10` across clusters.
pub fn synth_dataset(
    n_users: usize,
    n_items: usize,
    n_clusters: usize,
    density: f64,
    seed_value: u64,
) -> Result<InteractionDataset> {
    let mut errors = Vec::new();
    if !(density > 0.0 && density <= 1.0) {
        errors.push(format!("density must lie in (0, 1], got {density}"));
    }
    if n_clusters == 0 {
        errors.push("n_clusters must be at least 1".to_string());
    }
    if n_users == 0 || n_items == 0 {
        errors.push("n_users and n_items must be positive".to_string());
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let mut rng = seed::rng(seed_value, &[seed::SYNTH]);
    let mut raw = Vec::new();
    for u in 0..n_users {
        for i in 0..n_items {
            let p = if u % n_clusters == i % n_clusters {
                density
            } else {
                density / 10.0
            };
            if rng.gen::<f64>() < p {
                raw.push((u as u64, i as u64));
            }
        }
    }
    if raw.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }
    Ok(InteractionDataset::from_raw(raw))
}

/// Privacy tier derived from a share ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tier {
    None,
    Part,
    All,
}

impl Tier {
    pub fn shares(self) -> bool {
        self != Tier::None
    }
}

/// Ratios at or below this are treated as no upload.
pub const NONE_CUTOFF: f64 = 0.05;
/// Ratios at or above this are treated as full upload.
pub const ALL_CUTOFF: f64 = 0.95;

/// Clamps a raw ratio into one of the three tiers.
pub fn categorize(ratio: f64) -> (f64, Tier) {
    if ratio <= NONE_CUTOFF {
        (0.0, Tier::None)
    } else if ratio >= ALL_CUTOFF {
        (1.0, Tier::All)
    } else {
        (ratio, Tier::Part)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShareMode {
    /// Every user shares the same ratio.
    Fixed { ratio: f64 },
    /// Each user draws a ratio uniformly from `[0, 1)`.
    Uniform,
    /// Each user draws a ratio uniformly from `[lo, hi)`.
    Range { lo: f64, hi: f64 },
}

impl ShareMode {
    pub fn label(&self) -> String {
        match self {
            ShareMode::Fixed { ratio } => format!("fixed:{ratio}"),
            ShareMode::Uniform => "uniform".to_string(),
            ShareMode::Range { lo, hi } => format!("range:{lo}-{hi}"),
        }
    }
}

/// Per-user data-contribution decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct SharePolicy {
    /// Clamped share ratio.
    pub ratio: Vec<f64>,
    /// Ratio as drawn, before clamping; used for share-ratio bins.
    pub raw_ratio: Vec<f64>,
    pub tier: Vec<Tier>,
    /// Train items each user uploads, sorted.
    pub contributed: Vec<Vec<u32>>,
}

impl SharePolicy {
    pub fn n_users(&self) -> usize {
        self.tier.len()
    }

    pub fn contributed_pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        pairs_of(&self.contributed)
    }

    pub fn sharers(&self) -> impl Iterator<Item = usize> + '_ {
        self.tier
            .iter()
            .enumerate()
            .filter(|(_, t)| t.shares())
            .map(|(u, _)| u)
    }
}

/// Draws each user's share ratio, assigns tiers and picks the uploaded
/// subset of their training items.
///
/// PART users with `n >= 2` training items upload at most `n - 1` of them.
pub fn assign_share_policy(ds: &SplitDataset, mode: ShareMode, seed_value: u64) -> SharePolicy {
    let mut rng = seed::rng(seed_value, &[seed::SHARE]);
    let n = ds.n_users();
    let mut ratio = Vec::with_capacity(n);
    let mut raw_ratio = Vec::with_capacity(n);
    let mut tier = Vec::with_capacity(n);
    let mut contributed = Vec::with_capacity(n);
    for u in 0..n {
        let raw = match mode {
            ShareMode::Fixed { ratio } => ratio,
            ShareMode::Uniform => rng.gen::<f64>(),
            ShareMode::Range { lo, hi } => {
                if hi > lo {
                    rng.gen_range(lo..hi)
                } else {
                    lo
                }
            }
        };
        let (r, t) = categorize(raw);
        let train = &ds.train[u];
        let mut subset = shared_subset(train, r, seed::derive(seed_value, &[seed::SUBSET, u as u64]));
        if t == Tier::Part && train.len() >= 2 && subset.len() == train.len() {
            subset.pop();
        }
        raw_ratio.push(raw);
        ratio.push(r);
        tier.push(t);
        contributed.push(subset);
    }
    SharePolicy {
        ratio,
        raw_ratio,
        tier,
        contributed,
    }
}

/// Samples `ceil(ratio * n)` of `items` without replacement; result sorted.
pub fn shared_subset(items: &[u32], ratio: f64, seed_value: u64) -> Vec<u32> {
    let n = items.len();
    let k = if ratio <= 0.0 {
        0
    } else if ratio >= 1.0 {
        n
    } else {
        // guard against ratio * n landing a hair above an integer
        ((ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
    };
    let mut rng = seed::rng(seed_value, &[]);
    let mut out: Vec<u32> = rand::seq::index::sample(&mut rng, n, k)
        .into_iter()
        .map(|k| items[k])
        .collect();
    out.sort_unstable();
    out
}
