//! Interaction files, contiguous ID spaces and fixed-window user histories.
//!
//! The on-disk format is one user per line: the first whitespace-separated
//! token is the raw user ID, the remaining tokens are raw item IDs. Lines
//! starting with `#` and blank lines are skipped.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed token {token:?} (expected a non-negative integer ID)")]
    MalformedToken {
        path: PathBuf,
        line: usize,
        token: String,
    },
    #[error("{path}: no interactions")]
    NoInteractions { path: PathBuf },
    #[error("{path}:{line}: user {raw} does not appear in the training file")]
    UnknownUser {
        path: PathBuf,
        line: usize,
        raw: u64,
    },
    #[error("{path}:{line}: item {raw} does not appear in the training file, so it has no embedding")]
    UnknownItem {
        path: PathBuf,
        line: usize,
        raw: u64,
    },
    #[error("history window must be at least 1")]
    ZeroWindow,
}

/// Bidirectional raw-ID to contiguous-index map, assigned in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    raw: Vec<u64>,
    index: HashMap<u64, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Identity vocabulary over `0..n`.
    pub fn identity(n: usize) -> Self {
        let mut v = Vocab::new();
        for i in 0..n as u64 {
            v.intern(i);
        }
        v
    }

    pub fn intern(&mut self, raw: u64) -> u32 {
        if let Some(&idx) = self.index.get(&raw) {
            return idx;
        }
        let idx = self.raw.len() as u32;
        self.raw.push(raw);
        self.index.insert(raw, idx);
        idx
    }

    pub fn get(&self, raw: u64) -> Option<u32> {
        self.index.get(&raw).copied()
    }

    pub fn raw(&self, idx: u32) -> u64 {
        self.raw[idx as usize]
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Remapped interaction data with train and test positives per user.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    /// Train positives per user in file order, duplicates removed.
    pub train_seq: Vec<Vec<u32>>,
    /// Train positives per user, sorted ascending.
    pub train_pos: Vec<Vec<u32>>,
    /// Test positives per user, sorted ascending.
    pub test_pos: Vec<Vec<u32>>,
    pub user_vocab: Vocab,
    pub item_vocab: Vocab,
}

struct RawLine {
    line: usize,
    user: u64,
    items: Vec<u64>,
}

fn read_lines(path: &Path) -> Result<Vec<RawLine>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut ids = trimmed.split_ascii_whitespace().map(|tok| {
            tok.parse::<u64>().map_err(|_| DatasetError::MalformedToken {
                path: path.to_path_buf(),
                line: i + 1,
                token: tok.to_string(),
            })
        });
        // `trimmed` is non-empty so there is at least one token.
        let user = ids.next().unwrap()?;
        let items = ids.collect::<Result<Vec<_>, _>>()?;
        out.push(RawLine {
            line: i + 1,
            user,
            items,
        });
    }
    Ok(out)
}

fn push_unique(seq: &mut Vec<u32>, item: u32) {
    if !seq.contains(&item) {
        seq.push(item);
    }
}

fn sorted(seq: &[u32]) -> Vec<u32> {
    let mut s = seq.to_vec();
    s.sort_unstable();
    s
}

/// Load a train/test split pair.
///
/// Indices are assigned in order of first appearance in the training file.
/// Every test user and test item must already exist in the training
/// vocabulary.
pub fn load_interactions(
    train_path: impl AsRef<Path>,
    test_path: impl AsRef<Path>,
) -> Result<InteractionDataset, DatasetError> {
    let train_path = train_path.as_ref();
    let test_path = test_path.as_ref();
    let train_lines = read_lines(train_path)?;
    if train_lines.iter().all(|l| l.items.is_empty()) {
        return Err(DatasetError::NoInteractions {
            path: train_path.to_path_buf(),
        });
    }

    let mut user_vocab = Vocab::new();
    let mut item_vocab = Vocab::new();
    let mut train_seq: Vec<Vec<u32>> = Vec::new();
    for line in &train_lines {
        let u = user_vocab.intern(line.user) as usize;
        if u == train_seq.len() {
            train_seq.push(Vec::new());
        }
        for &raw in &line.items {
            let i = item_vocab.intern(raw);
            push_unique(&mut train_seq[u], i);
        }
    }

    let mut test_sets: Vec<Vec<u32>> = vec![Vec::new(); user_vocab.len()];
    for line in read_lines(test_path)? {
        let u = user_vocab
            .get(line.user)
            .ok_or_else(|| DatasetError::UnknownUser {
                path: test_path.to_path_buf(),
                line: line.line,
                raw: line.user,
            })? as usize;
        for &raw in &line.items {
            let i = item_vocab.get(raw).ok_or_else(|| DatasetError::UnknownItem {
                path: test_path.to_path_buf(),
                line: line.line,
                raw,
            })?;
            push_unique(&mut test_sets[u], i);
        }
    }

    let train_pos = train_seq.iter().map(|s| sorted(s)).collect();
    let test_pos = test_sets.iter().map(|s| sorted(s)).collect();
    Ok(InteractionDataset {
        num_users: user_vocab.len(),
        num_items: item_vocab.len(),
        train_seq,
        train_pos,
        test_pos,
        user_vocab,
        item_vocab,
    })
}

impl InteractionDataset {
    /// Build from already-contiguous indices with identity vocabularies.
    pub fn from_sequences(num_items: usize, train: Vec<Vec<u32>>, test: Vec<Vec<u32>>) -> Self {
        assert_eq!(train.len(), test.len(), "train/test user counts differ");
        let train_seq: Vec<Vec<u32>> = train
            .into_iter()
            .map(|s| {
                let mut out = Vec::with_capacity(s.len());
                for i in s {
                    assert!((i as usize) < num_items, "item index out of range");
                    push_unique(&mut out, i);
                }
                out
            })
            .collect();
        let test_pos = test
            .into_iter()
            .map(|s| {
                let mut s = s;
                assert!(s.iter().all(|&i| (i as usize) < num_items));
                s.sort_unstable();
                s.dedup();
                s
            })
            .collect();
        let num_users = train_seq.len();
        InteractionDataset {
            num_users,
            num_items,
            train_pos: train_seq.iter().map(|s| sorted(s)).collect(),
            train_seq,
            test_pos,
            user_vocab: Vocab::identity(num_users),
            item_vocab: Vocab::identity(num_items),
        }
    }

    /// Same ID spaces, different splits.
    pub fn with_splits(&self, train_seq: Vec<Vec<u32>>, test_pos: Vec<Vec<u32>>) -> Self {
        let test_pos = test_pos.iter().map(|s| sorted(s)).collect();
        InteractionDataset {
            num_users: self.num_users,
            num_items: self.num_items,
            train_pos: train_seq.iter().map(|s| sorted(s)).collect(),
            train_seq,
            test_pos,
            user_vocab: self.user_vocab.clone(),
            item_vocab: self.item_vocab.clone(),
        }
    }

    pub fn is_train_positive(&self, user: usize, item: u32) -> bool {
        self.train_pos[user].binary_search(&item).is_ok()
    }

    pub fn num_train_pairs(&self) -> usize {
        self.train_seq.iter().map(Vec::len).sum()
    }

    /// All `(user, item)` training pairs, users ascending, items in file order.
    pub fn train_pairs(&self) -> Vec<(u32, u32)> {
        self.train_seq
            .iter()
            .enumerate()
            .flat_map(|(u, s)| s.iter().map(move |&i| (u as u32, i)))
            .collect()
    }

    /// Training pairs mapped back to raw IDs.
    pub fn raw_train_pairs(&self) -> Vec<(u64, u64)> {
        self.train_pairs()
            .into_iter()
            .map(|(u, i)| (self.user_vocab.raw(u), self.item_vocab.raw(i)))
            .collect()
    }

    /// Number of training users per item.
    pub fn item_popularity(&self) -> Vec<usize> {
        let mut pop = vec![0usize; self.num_items];
        for s in &self.train_seq {
            for &i in s {
                pop[i as usize] += 1;
            }
        }
        pop
    }

    /// Write the split back out in the text interaction format using raw IDs.
    pub fn write_split_files(
        &self,
        train_path: impl AsRef<Path>,
        test_path: impl AsRef<Path>,
    ) -> std::io::Result<()> {
        let write = |path: &Path, rows: &[Vec<u32>]| -> std::io::Result<()> {
            let mut f = std::io::BufWriter::new(fs::File::create(path)?);
            for (u, items) in rows.iter().enumerate() {
                if items.is_empty() {
                    continue;
                }
                write!(f, "{}", self.user_vocab.raw(u as u32))?;
                for &i in items {
                    write!(f, " {}", self.item_vocab.raw(i))?;
                }
                writeln!(f)?;
            }
            f.flush()
        };
        // Users without training items still need a line so they get an index.
        let mut f = std::io::BufWriter::new(fs::File::create(train_path.as_ref())?);
        for (u, items) in self.train_seq.iter().enumerate() {
            write!(f, "{}", self.user_vocab.raw(u as u32))?;
            for &i in items {
                write!(f, " {}", self.item_vocab.raw(i))?;
            }
            writeln!(f)?;
        }
        f.flush()?;
        write(test_path.as_ref(), &self.test_pos)
    }
}

/// Users that have no trained embedding, described only by their history.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldoutUsers {
    pub raw_ids: Vec<u64>,
    /// Observed items per user in file order, duplicates removed.
    pub history: Vec<Vec<u32>>,
    /// Items to predict per user, sorted.
    pub test_pos: Vec<Vec<u32>>,
}

impl HeldoutUsers {
    pub fn len(&self) -> usize {
        self.raw_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_ids.is_empty()
    }

    pub fn history_sorted(&self) -> Vec<Vec<u32>> {
        self.history.iter().map(|s| sorted(s)).collect()
    }
}

/// Load history-only users for inductive evaluation. Items are resolved
/// against `item_vocab` and must already be known.
pub fn load_heldout_users(
    history_path: impl AsRef<Path>,
    test_path: impl AsRef<Path>,
    item_vocab: &Vocab,
) -> Result<HeldoutUsers, DatasetError> {
    let history_path = history_path.as_ref();
    let test_path = test_path.as_ref();
    let lines = read_lines(history_path)?;
    let mut users = Vocab::new();
    let mut history: Vec<Vec<u32>> = Vec::new();
    for line in &lines {
        let u = users.intern(line.user) as usize;
        if u == history.len() {
            history.push(Vec::new());
        }
        for &raw in &line.items {
            let i = item_vocab.get(raw).ok_or_else(|| DatasetError::UnknownItem {
                path: history_path.to_path_buf(),
                line: line.line,
                raw,
            })?;
            push_unique(&mut history[u], i);
        }
    }
    let mut test_pos: Vec<Vec<u32>> = vec![Vec::new(); users.len()];
    for line in read_lines(test_path)? {
        let u = users.get(line.user).ok_or_else(|| DatasetError::UnknownUser {
            path: test_path.to_path_buf(),
            line: line.line,
            raw: line.user,
        })? as usize;
        for &raw in &line.items {
            let i = item_vocab.get(raw).ok_or_else(|| DatasetError::UnknownItem {
                path: test_path.to_path_buf(),
                line: line.line,
                raw,
            })?;
            push_unique(&mut test_pos[u], i);
        }
    }
    for s in &mut test_pos {
        s.sort_unstable();
    }
    if history.iter().all(Vec::is_empty) {
        return Err(DatasetError::NoInteractions {
            path: history_path.to_path_buf(),
        });
    }
    Ok(HeldoutUsers {
        raw_ids: (0..users.len() as u32).map(|u| users.raw(u)).collect(),
        history,
        test_pos,
    })
}

/// Fixed-length per-user item windows with a validity mask.
///
/// Padding slots hold `pad`, which equals the catalog size and therefore
/// never names a real item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryTable {
    pub window: usize,
    pub pad: u32,
    items: Vec<u32>,
    mask: Vec<bool>,
}

impl HistoryTable {
    /// Keep the first `window` items of each sequence and right-pad.
    pub fn from_sequences(
        seqs: &[Vec<u32>],
        window: usize,
        num_items: usize,
    ) -> Result<Self, DatasetError> {
        if window == 0 {
            return Err(DatasetError::ZeroWindow);
        }
        let pad = num_items as u32;
        let mut items = vec![pad; seqs.len() * window];
        let mut mask = vec![false; seqs.len() * window];
        for (u, seq) in seqs.iter().enumerate() {
            for (k, &i) in seq.iter().take(window).enumerate() {
                items[u * window + k] = i;
                mask[u * window + k] = true;
            }
        }
        Ok(HistoryTable {
            window,
            pad,
            items,
            mask,
        })
    }

    pub fn num_users(&self) -> usize {
        self.items.len() / self.window
    }

    pub fn items(&self, user: usize) -> &[u32] {
        &self.items[user * self.window..(user + 1) * self.window]
    }

    pub fn mask(&self, user: usize) -> &[bool] {
        &self.mask[user * self.window..(user + 1) * self.window]
    }
}

/// Histories from the training positives of `ds`, in file order.
pub fn build_histories(ds: &InteractionDataset, window: usize) -> Result<HistoryTable, DatasetError> {
    HistoryTable::from_sequences(&ds.train_seq, window, ds.num_items)
}
