//! Interaction ingestion, preprocessing, and chronological splits.
//!
//! Input files are line-oriented `user, item, timestamp` records (tab- or
//! comma-separated, timestamp optional). Users and items are reindexed to
//! dense contiguous ids in first-appearance order; the mapping is kept so
//! splits can be persisted and reloaded losslessly.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at line {0}")]
    ParseError(usize),
    #[error("empty input file")]
    EmptyFile,
    #[error("no interactions left after filtering")]
    EmptyAfterFilter,
    #[error("user {0} has too few interactions to split")]
    TooFewInteractions(u32),
    #[error("missing split file {0}")]
    MissingSplit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One observed user-item interaction with a timestamp used for ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub ts: i64,
}

/// A deduplicated set of interactions over dense user/item ids.
///
/// `n_users` and `n_items` describe the full id space, which may be larger
/// than what this particular set touches (e.g. a validation split shares the
/// id space of the whole dataset).
#[derive(Debug, Clone)]
pub struct InteractionSet {
    pub interactions: Vec<Interaction>,
    pub n_users: usize,
    pub n_items: usize,
    /// dense id -> original token
    pub user_ids: Vec<String>,
    /// dense id -> original token
    pub item_ids: Vec<String>,
}

impl InteractionSet {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Interacted items per user, each list sorted ascending.
    pub fn items_by_user(&self) -> Vec<Vec<u32>> {
        let mut by_user = vec![Vec::new(); self.n_users];
        for it in &self.interactions {
            by_user[it.user as usize].push(it.item);
        }
        for items in &mut by_user {
            items.sort_unstable();
            items.dedup();
        }
        by_user
    }

    /// (user, item) pairs in stored order.
    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.interactions.iter().map(|it| (it.user, it.item))
    }
}

/// Parses a line-oriented interaction file into a dense [`InteractionSet`].
///
/// Fields are split on tabs when the line contains one, otherwise on commas.
/// A missing timestamp falls back to the line number, which preserves file
/// order under the chronological split. Duplicate (user, item) pairs keep the
/// earliest timestamp.
pub fn ingest(path: &Path) -> Result<InteractionSet, DataError> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);

    let mut user_map: HashMap<String, u32> = HashMap::new();
    let mut item_map: HashMap<String, u32> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut seen: HashMap<(u32, u32), usize> = HashMap::new();
    let mut interactions: Vec<Interaction> = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = if trimmed.contains('\t') {
            trimmed.split('\t').map(str::trim).collect()
        } else {
            trimmed.split(',').map(str::trim).collect()
        };
        if fields.len() < 2 || fields.len() > 3 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(DataError::ParseError(line_no));
        }
        let ts = if fields.len() == 3 {
            fields[2]
                .parse::<i64>()
                .map_err(|_| DataError::ParseError(line_no))?
        } else {
            line_no as i64
        };
        let user = *user_map.entry(fields[0].to_string()).or_insert_with(|| {
            user_ids.push(fields[0].to_string());
            (user_ids.len() - 1) as u32
        });
        let item = *item_map.entry(fields[1].to_string()).or_insert_with(|| {
            item_ids.push(fields[1].to_string());
            (item_ids.len() - 1) as u32
        });
        match seen.get(&(user, item)) {
            Some(&pos) => {
                if ts < interactions[pos].ts {
                    interactions[pos].ts = ts;
                }
            }
            None => {
                seen.insert((user, item), interactions.len());
                interactions.push(Interaction { user, item, ts });
            }
        }
    }

    if interactions.is_empty() {
        return Err(DataError::EmptyFile);
    }
    Ok(InteractionSet {
        interactions,
        n_users: user_ids.len(),
        n_items: item_ids.len(),
        user_ids,
        item_ids,
    })
}

/// Iteratively removes users and items with fewer than `threshold`
/// interactions until a fixpoint, then reindexes densely.
pub fn filter_min_interactions(
    data: &InteractionSet,
    threshold: usize,
) -> Result<InteractionSet, DataError> {
    assert!(threshold >= 1, "threshold must be >= 1");
    let mut kept: Vec<Interaction> = data.interactions.clone();
    loop {
        let mut user_count = vec![0usize; data.n_users];
        let mut item_count = vec![0usize; data.n_items];
        for it in &kept {
            user_count[it.user as usize] += 1;
            item_count[it.item as usize] += 1;
        }
        let before = kept.len();
        kept.retain(|it| {
            user_count[it.user as usize] >= threshold && item_count[it.item as usize] >= threshold
        });
        if kept.len() == before {
            break;
        }
    }
    if kept.is_empty() {
        return Err(DataError::EmptyAfterFilter);
    }
    Ok(reindex(&kept, data))
}

fn reindex(kept: &[Interaction], orig: &InteractionSet) -> InteractionSet {
    let mut user_remap = vec![u32::MAX; orig.n_users];
    let mut item_remap = vec![u32::MAX; orig.n_items];
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut interactions = Vec::with_capacity(kept.len());
    for it in kept {
        let u = it.user as usize;
        if user_remap[u] == u32::MAX {
            user_remap[u] = user_ids.len() as u32;
            user_ids.push(orig.user_ids[u].clone());
        }
        let i = it.item as usize;
        if item_remap[i] == u32::MAX {
            item_remap[i] = item_ids.len() as u32;
            item_ids.push(orig.item_ids[i].clone());
        }
        interactions.push(Interaction {
            user: user_remap[u],
            item: item_remap[i],
            ts: it.ts,
        });
    }
    InteractionSet {
        interactions,
        n_users: user_ids.len(),
        n_items: item_ids.len(),
        user_ids,
        item_ids,
    }
}

/// Train/validation/test views over one id space.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: InteractionSet,
    pub validation: InteractionSet,
    pub test: InteractionSet,
}

impl SplitDataset {
    pub fn n_users(&self) -> usize {
        self.train.n_users
    }

    pub fn n_items(&self) -> usize {
        self.train.n_items
    }
}

/// Splits per user in chronological order (ties broken by item id).
///
/// With ratios (r0, r1, _): the first `floor(r0*n)` interactions go to train,
/// the next `floor(r1*n)` to validation, and the remainder to test.
pub fn chronological_split(
    data: &InteractionSet,
    ratios: (f64, f64, f64),
) -> Result<SplitDataset, DataError> {
    let mut per_user: Vec<Vec<Interaction>> = vec![Vec::new(); data.n_users];
    for it in &data.interactions {
        per_user[it.user as usize].push(*it);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (u, list) in per_user.iter_mut().enumerate() {
        if list.len() < 3 {
            return Err(DataError::TooFewInteractions(u as u32));
        }
        list.sort_by_key(|it| (it.ts, it.item));
        let n = list.len();
        let n_train = (ratios.0 * n as f64).floor() as usize;
        let n_val = (ratios.1 * n as f64).floor() as usize;
        train.extend_from_slice(&list[..n_train]);
        val.extend_from_slice(&list[n_train..n_train + n_val]);
        test.extend_from_slice(&list[n_train + n_val..]);
    }
    let view = |interactions: Vec<Interaction>| InteractionSet {
        interactions,
        n_users: data.n_users,
        n_items: data.n_items,
        user_ids: data.user_ids.clone(),
        item_ids: data.item_ids.clone(),
    };
    Ok(SplitDataset {
        train: view(train),
        validation: view(val),
        test: view(test),
    })
}

/// Writes `train.tsv`, `val.tsv`, `test.tsv` (dense ids) and `mapping.tsv`.
pub fn persist_split(split: &SplitDataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let write_set = |set: &InteractionSet, name: &str| -> Result<(), DataError> {
        let mut out = String::new();
        for it in &set.interactions {
            out.push_str(&format!("{}\t{}\t{}\n", it.user, it.item, it.ts));
        }
        fs::write(dir.join(name), out)?;
        Ok(())
    };
    write_set(&split.train, "train.tsv")?;
    write_set(&split.validation, "val.tsv")?;
    write_set(&split.test, "test.tsv")?;

    let mut file = fs::File::create(dir.join("mapping.tsv"))?;
    for (dense, orig) in split.train.user_ids.iter().enumerate() {
        writeln!(file, "user\t{orig}\t{dense}")?;
    }
    for (dense, orig) in split.train.item_ids.iter().enumerate() {
        writeln!(file, "item\t{orig}\t{dense}")?;
    }
    Ok(())
}

/// Loads a split directory produced by [`persist_split`].
pub fn load_split(dir: &Path) -> Result<SplitDataset, DataError> {
    let mapping = dir.join("mapping.tsv");
    if !mapping.exists() {
        return Err(DataError::MissingSplit(mapping.display().to_string()));
    }
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    for (idx, line) in fs::read_to_string(&mapping)?.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(DataError::ParseError(idx + 1));
        }
        match fields[0] {
            "user" => user_ids.push(fields[1].to_string()),
            "item" => item_ids.push(fields[1].to_string()),
            _ => return Err(DataError::ParseError(idx + 1)),
        }
    }
    let n_users = user_ids.len();
    let n_items = item_ids.len();
    let read_set = |name: &str| -> Result<InteractionSet, DataError> {
        let path = dir.join(name);
        if !path.exists() {
            return Err(DataError::MissingSplit(path.display().to_string()));
        }
        let mut interactions = Vec::new();
        for (idx, line) in fs::read_to_string(&path)?.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(DataError::ParseError(idx + 1));
            }
            let parse = |s: &str| s.parse::<i64>().map_err(|_| DataError::ParseError(idx + 1));
            interactions.push(Interaction {
                user: parse(fields[0])? as u32,
                item: parse(fields[1])? as u32,
                ts: parse(fields[2])?,
            });
        }
        Ok(InteractionSet {
            interactions,
            n_users,
            n_items,
            user_ids: user_ids.clone(),
            item_ids: item_ids.clone(),
        })
    };
    Ok(SplitDataset {
        train: read_set("train.tsv")?,
        validation: read_set("val.tsv")?,
        test: read_set("test.tsv")?,
    })
}

/// Knobs for [`synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// interactions drawn per user
    pub per_user: usize,
    /// number of latent item clusters
    pub clusters: usize,
    /// softmax temperature on affinities; lower = more concentrated users
    pub temperature: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 120,
            n_items: 240,
            per_user: 30,
            clusters: 12,
            temperature: 0.25,
        }
    }
}

/// Generates a clustered implicit-feedback dataset.
///
/// Items belong to latent clusters; each user prefers a couple of clusters
/// and draws items by softmax affinity without replacement. Timestamps record
/// the draw order, so chronological splits are meaningful.
pub fn synthetic(cfg: &SyntheticConfig, seed: u64) -> InteractionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.clusters.max(1);

    // item -> cluster, round-robin so clusters stay balanced
    let item_cluster: Vec<usize> = (0..cfg.n_items).map(|i| i % c).collect();
    // mild popularity skew inside each cluster
    let item_pop: Vec<f64> = (0..cfg.n_items)
        .map(|_| rng.gen_range(0.0..1.0f64))
        .collect();

    let mut interactions = Vec::with_capacity(cfg.n_users * cfg.per_user);
    for u in 0..cfg.n_users {
        // each user likes 2 clusters with random mixture weights
        let c1 = rng.gen_range(0..c);
        let mut c2 = rng.gen_range(0..c);
        if c2 == c1 {
            c2 = (c2 + 1) % c;
        }
        let w1 = rng.gen_range(0.5..1.0f64);
        let affinity: Vec<f64> = (0..cfg.n_items)
            .map(|i| {
                let base = if item_cluster[i] == c1 {
                    w1
                } else if item_cluster[i] == c2 {
                    1.0 - w1
                } else {
                    0.0
                };
                base + 0.15 * item_pop[i]
            })
            .collect();
        let mut available: Vec<usize> = (0..cfg.n_items).collect();
        let draws = cfg.per_user.min(cfg.n_items);
        for t in 0..draws {
            let weights: Vec<f64> = available
                .iter()
                .map(|&i| (affinity[i] / cfg.temperature).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = available.len() - 1;
            for (pos, w) in weights.iter().enumerate() {
                if target < *w {
                    chosen = pos;
                    break;
                }
                target -= w;
            }
            let item = available.swap_remove(chosen);
            interactions.push(Interaction {
                user: u as u32,
                item: item as u32,
                ts: t as i64,
            });
        }
    }

    InteractionSet {
        interactions,
        n_users: cfg.n_users,
        n_items: cfg.n_items,
        user_ids: (0..cfg.n_users).map(|u| format!("u{u}")).collect(),
        item_ids: (0..cfg.n_items).map(|i| format!("i{i}")).collect(),
    }
}
