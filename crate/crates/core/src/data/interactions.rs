use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexSet;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seeds::{rng_for, Stream};

/// Deduplicated `(user, item)` pairs with dense ids in first-appearance order.
#[derive(Debug, Clone, Default)]
pub struct RawInteractions {
    pub users: IndexSet<String>,
    pub items: IndexSet<String>,
    pub pairs: Vec<(usize, usize)>,
}

impl RawInteractions {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Adds one interaction, ignoring repeats. Returns whether it was new.
    pub fn insert(&mut self, user: &str, item: &str, seen: &mut IndexSet<(usize, usize)>) -> bool {
        let (u, _) = self.users.insert_full(user.to_string());
        let (i, _) = self.items.insert_full(item.to_string());
        if seen.insert((u, i)) {
            self.pairs.push((u, i));
            true
        } else {
            false
        }
    }
}

fn split_line<'a>(line: &'a str, path: &Path, n: usize) -> Result<(&'a str, &'a str)> {
    let parse_err = |detail: &str| Error::Parse {
        path: path.to_path_buf(),
        line: n,
        detail: detail.to_string(),
    };
    let (a, b) = line
        .split_once('\t')
        .ok_or_else(|| parse_err("expected `user<TAB>item`"))?;
    if a.is_empty() || b.is_empty() || b.contains('\t') {
        return Err(parse_err(
            "expected exactly two non-empty tab-separated fields",
        ));
    }
    Ok((a, b))
}

/// Parses `user<TAB>item` lines. Blank lines are skipped; duplicates collapse.
pub fn parse_interactions(text: &str, path: &Path) -> Result<RawInteractions> {
    let mut raw = RawInteractions::default();
    let mut seen = IndexSet::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (u, i) = split_line(line, path, n + 1)?;
        raw.insert(u, i, &mut seen);
    }
    if raw.pairs.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Ok(raw)
}

pub fn load_interactions(path: &Path) -> Result<RawInteractions> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, path)
}

/// Per-user train/validation/test positives over a dense id space.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSet {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Sorted item ids per user.
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = SplitRatios { train, val, test };
        if [train, val, test].iter().any(|v| !(0.0..=1.0).contains(v))
            || (train + val + test - 1.0).abs() > 1e-9
            || train <= 0.0
        {
            return Err(Error::Config(format!(
                "split ratios {train},{val},{test} must be in [0,1], sum to 1, with train > 0"
            )));
        }
        Ok(r)
    }

    /// Held-out counts for a user with `n` interactions: (val, test).
    fn held_out(&self, n: usize) -> (usize, usize) {
        if n < 3 {
            return (0, 0);
        }
        let count = |ratio: f64| {
            if ratio > 0.0 {
                ((n as f64 * ratio).round() as usize).max(1)
            } else {
                0
            }
        };
        let mut test = count(self.test);
        let mut val = count(self.val);
        // Keep at least one training item.
        while val + test > n - 1 {
            if val >= test && val > 0 {
                val -= 1;
            } else {
                test -= 1;
            }
        }
        (val, test)
    }
}

/// Seeded per-user random split. Users with fewer than three interactions keep all in train.
pub fn split_interactions(raw: &RawInteractions, ratios: SplitRatios, seed: u64) -> InteractionSet {
    let m = raw.num_users();
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); m];
    for &(u, i) in &raw.pairs {
        per_user[u].push(i);
    }
    let mut rng = rng_for(seed, Stream::Split);
    let (mut train, mut val, mut test) = (
        Vec::with_capacity(m),
        Vec::with_capacity(m),
        Vec::with_capacity(m),
    );
    for mut items in per_user {
        items.sort_unstable();
        items.dedup();
        let (nv, nt) = ratios.held_out(items.len());
        items.shuffle(&mut rng);
        let mut te = items[..nt].to_vec();
        let mut va = items[nt..nt + nv].to_vec();
        let mut tr = items[nt + nv..].to_vec();
        te.sort_unstable();
        va.sort_unstable();
        tr.sort_unstable();
        train.push(tr);
        val.push(va);
        test.push(te);
    }
    InteractionSet {
        user_ids: raw.users.iter().cloned().collect(),
        item_ids: raw.items.iter().cloned().collect(),
        train,
        val,
        test,
    }
}

fn read_map(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids: Vec<Option<String>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (ext, dense) = split_line(line, path, n + 1)?;
        let dense: usize = dense.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            detail: format!("bad dense id `{dense}`"),
        })?;
        if dense >= ids.len() {
            ids.resize(dense + 1, None);
        }
        if ids[dense].replace(ext.to_string()).is_some() {
            return Err(Error::Consistency(format!(
                "{}: dense id {dense} assigned twice",
                path.display()
            )));
        }
    }
    ids.into_iter()
        .enumerate()
        .map(|(i, v)| {
            v.ok_or_else(|| Error::Consistency(format!("{}: dense id {i} missing", path.display())))
        })
        .collect()
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut buf = Vec::new();
    for l in lines {
        buf.extend_from_slice(l.as_bytes());
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

impl InteractionSet {
    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn split(&self, s: Split) -> &[Vec<usize>] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn num_train(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    pub fn num_interactions(&self) -> usize {
        [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&s| self.split(s).iter().map(Vec::len).sum::<usize>())
            .sum()
    }

    /// Flat `(user, item)` list of training positives, user-major.
    pub fn train_pairs(&self) -> Vec<(usize, usize)> {
        self.train
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
            .collect()
    }

    pub fn is_train_positive(&self, user: usize, item: usize) -> bool {
        self.train[user].binary_search(&item).is_ok()
    }

    /// Checks the structural invariants of the split.
    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.num_users(), self.num_items());
        for s in [Split::Train, Split::Val, Split::Test] {
            if self.split(s).len() != m {
                return Err(Error::Consistency(format!(
                    "{} split covers {} users, expected {m}",
                    s.name(),
                    self.split(s).len()
                )));
            }
        }
        for u in 0..m {
            if self.train[u].is_empty() {
                return Err(Error::Consistency(format!(
                    "user `{}` has no training interactions",
                    self.user_ids[u]
                )));
            }
            let mut all: Vec<usize> = self.train[u]
                .iter()
                .chain(&self.val[u])
                .chain(&self.test[u])
                .copied()
                .collect();
            if all.iter().any(|&i| i >= n) {
                return Err(Error::Consistency(format!(
                    "item id out of range for user {u}"
                )));
            }
            let len = all.len();
            all.sort_unstable();
            all.dedup();
            if all.len() != len {
                return Err(Error::Consistency(format!(
                    "user `{}` has an item in more than one split",
                    self.user_ids[u]
                )));
            }
        }
        Ok(())
    }

    /// Writes `train.tsv`, `val.tsv`, `test.tsv`, `user_map.tsv`, `item_map.tsv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for s in [Split::Train, Split::Val, Split::Test] {
            let path = dir.join(format!("{}.tsv", s.name()));
            let lines = self.split(s).iter().enumerate().flat_map(|(u, items)| {
                items
                    .iter()
                    .map(move |&i| format!("{}\t{}", self.user_ids[u], self.item_ids[i]))
            });
            write_lines(&path, lines)?;
        }
        write_lines(
            &dir.join("user_map.tsv"),
            self.user_ids
                .iter()
                .enumerate()
                .map(|(i, e)| format!("{e}\t{i}")),
        )?;
        write_lines(
            &dir.join("item_map.tsv"),
            self.item_ids
                .iter()
                .enumerate()
                .map(|(i, e)| format!("{e}\t{i}")),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let user_ids = read_map(&dir.join("user_map.tsv"))?;
        let item_ids = read_map(&dir.join("item_map.tsv"))?;
        let user_index: std::collections::HashMap<&str, usize> = user_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let item_index: std::collections::HashMap<&str, usize> = item_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut splits: Vec<Vec<Vec<usize>>> = Vec::new();
        for s in [Split::Train, Split::Val, Split::Test] {
            let path: PathBuf = dir.join(format!("{}.tsv", s.name()));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut per_user = vec![Vec::new(); user_ids.len()];
            for (n, line) in text.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let (u, i) = split_line(line, &path, n + 1)?;
                let unknown = |what: &str, id: &str| Error::Parse {
                    path: path.clone(),
                    line: n + 1,
                    detail: format!("unknown {what} `{id}`"),
                };
                let u = *user_index.get(u).ok_or_else(|| unknown("user", u))?;
                let i = *item_index.get(i).ok_or_else(|| unknown("item", i))?;
                per_user[u].push(i);
            }
            for items in &mut per_user {
                items.sort_unstable();
                items.dedup();
            }
            splits.push(per_user);
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        let set = InteractionSet {
            user_ids,
            item_ids,
            train,
            val,
            test,
        };
        set.validate()?;
        Ok(set)
    }
}
