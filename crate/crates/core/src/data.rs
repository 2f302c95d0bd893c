//! Interaction ingestion, k-core filtering, sequence building, and the
//! leave-one-out split.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

/// One row of an interactions file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

/// Ordered per-user history: internal item indices with aligned timestamps.
/// Index 0 is the reserved pad item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Keep only the most recent `max_len` interactions.
    pub fn truncated(&self, max_len: usize) -> UserSequence {
        if self.len() <= max_len {
            return self.clone();
        }
        let start = self.len() - max_len;
        UserSequence {
            items: self.items[start..].to_vec(),
            timestamps: self.timestamps[start..].to_vec(),
        }
    }
}

/// Per-modality feature storage plus the id/index maps. Internal indices are
/// 1-based; 0 is the pad item with zero features.
#[derive(Clone, Debug)]
pub struct ItemCatalog {
    pub items: Vec<String>,
    pub id_index: BTreeMap<String, usize>,
    pub dim_v: usize,
    pub dim_t: usize,
    feat_v: Vec<f32>,
    feat_t: Vec<f32>,
    pub has_image: Vec<bool>,
}

impl ItemCatalog {
    pub fn new(
        items: Vec<String>,
        dim_v: usize,
        dim_t: usize,
        feat_v: Vec<f32>,
        feat_t: Vec<f32>,
        has_image: Vec<bool>,
    ) -> Result<Self> {
        let n = items.len();
        if feat_v.len() != n * dim_v || feat_t.len() != n * dim_t || has_image.len() != n {
            return Err(Error::Contract {
                op: "ItemCatalog::new",
                msg: format!(
                    "inconsistent sizes: {n} items, {}x{dim_v} visual, {}x{dim_t} text",
                    feat_v.len() / dim_v.max(1),
                    feat_t.len() / dim_t.max(1)
                ),
            });
        }
        let mut id_index = BTreeMap::new();
        for (i, id) in items.iter().enumerate() {
            if id_index.insert(id.clone(), i + 1).is_some() {
                return Err(Error::Contract {
                    op: "ItemCatalog::new",
                    msg: format!("duplicate item id '{id}'"),
                });
            }
        }
        Ok(ItemCatalog { items, id_index, dim_v, dim_t, feat_v, feat_t, has_image })
    }

    /// Number of real (non-pad) items.
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn index_of(&self, item_id: &str) -> Result<usize> {
        self.id_index
            .get(item_id)
            .copied()
            .ok_or_else(|| Error::UnknownItem(item_id.to_string()))
    }

    fn check_index(&self, idx: usize) -> Result<usize> {
        if idx == 0 || idx > self.len() {
            return Err(Error::ItemIndexRange { index: idx, size: self.len() });
        }
        Ok(idx - 1)
    }

    /// Visual feature row; missing-image items carry zeros.
    pub fn visual_row(&self, idx: usize) -> Result<&[f32]> {
        let row = self.check_index(idx)?;
        Ok(&self.feat_v[row * self.dim_v..(row + 1) * self.dim_v])
    }

    pub fn text_row(&self, idx: usize) -> Result<&[f32]> {
        let row = self.check_index(idx)?;
        Ok(&self.feat_t[row * self.dim_t..(row + 1) * self.dim_t])
    }

    pub fn item_has_image(&self, idx: usize) -> Result<bool> {
        let row = self.check_index(idx)?;
        Ok(self.has_image[row])
    }
}

/// Parse a `user \t item \t timestamp` TSV file, failing fast on malformed
/// rows with their line number.
pub fn parse_interactions(path: &Path) -> Result<Vec<InteractionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display(), e))?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (user, item, ts) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(u), Some(i), Some(t), None) if !u.is_empty() && !i.is_empty() => (u, i, t),
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: "expected user_id<TAB>item_id<TAB>timestamp".into(),
                })
            }
        };
        let timestamp: i64 = ts.parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("bad timestamp '{ts}'"),
        })?;
        if timestamp < 0 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("negative timestamp {timestamp}"),
            });
        }
        records.push(InteractionRecord {
            user_id: user.to_string(),
            item_id: item.to_string(),
            timestamp,
        });
    }
    Ok(records)
}

/// Iteratively drop users and items with fewer than k interactions until the
/// remaining set is the (unique) maximal k-core.
pub fn kcore_filter(records: &[InteractionRecord], k: usize) -> Vec<InteractionRecord> {
    let mut current: Vec<InteractionRecord> = records.to_vec();
    loop {
        let mut user_count: BTreeMap<&str, usize> = BTreeMap::new();
        let mut item_count: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &current {
            *user_count.entry(&r.user_id).or_default() += 1;
            *item_count.entry(&r.item_id).or_default() += 1;
        }
        let keep: Vec<InteractionRecord> = current
            .iter()
            .filter(|r| user_count[r.user_id.as_str()] >= k && item_count[r.item_id.as_str()] >= k)
            .cloned()
            .collect();
        if keep.len() == current.len() {
            return keep;
        }
        current = keep;
    }
}

/// Per-user sequences ordered by (timestamp, item_id) plus the sorted item
/// vocabulary. Internal indices follow the lexical order of item ids, so the
/// output is independent of input row order.
pub fn build_sequences(
    records: &[InteractionRecord],
) -> (BTreeMap<String, UserSequence>, Vec<String>) {
    let mut vocab: Vec<String> = records.iter().map(|r| r.item_id.clone()).collect();
    vocab.sort();
    vocab.dedup();
    let index: BTreeMap<&str, usize> =
        vocab.iter().enumerate().map(|(i, id)| (id.as_str(), i + 1)).collect();

    let mut per_user: BTreeMap<String, Vec<(i64, &str)>> = BTreeMap::new();
    for r in records {
        per_user.entry(r.user_id.clone()).or_default().push((r.timestamp, &r.item_id));
    }
    let mut sequences = BTreeMap::new();
    for (user, mut rows) in per_user {
        rows.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        let seq = UserSequence {
            items: rows.iter().map(|(_, id)| index[id]).collect(),
            timestamps: rows.iter().map(|(ts, _)| *ts).collect(),
        };
        sequences.insert(user, seq);
    }
    (sequences, vocab)
}

/// An evaluation case: the history prefix and the held-out target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCase {
    pub user_id: String,
    pub prefix: UserSequence,
    pub target: usize,
}

/// Leave-one-out split: last interaction is the test target, second-to-last
/// the validation target, the remaining prefix is the training region.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train_regions: BTreeMap<String, UserSequence>,
    pub valid: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
}

impl DatasetSplit {
    /// Next-item training examples: within each train region the last item is
    /// the target and the rest the input. Regions shorter than 2 contribute
    /// nothing.
    pub fn train_examples(&self) -> Vec<EvalCase> {
        let mut out = Vec::new();
        for (user, region) in &self.train_regions {
            let n = region.len();
            if n < 2 {
                continue;
            }
            out.push(EvalCase {
                user_id: user.clone(),
                prefix: UserSequence {
                    items: region.items[..n - 1].to_vec(),
                    timestamps: region.timestamps[..n - 1].to_vec(),
                },
                target: region.items[n - 1],
            });
        }
        out
    }
}

pub fn leave_one_out_split(sequences: &BTreeMap<String, UserSequence>) -> DatasetSplit {
    let mut split = DatasetSplit::default();
    for (user, seq) in sequences {
        let n = seq.len();
        if n < 3 {
            // too short to hold out anything: train-only
            split.train_regions.insert(user.clone(), seq.clone());
            continue;
        }
        let region = UserSequence {
            items: seq.items[..n - 2].to_vec(),
            timestamps: seq.timestamps[..n - 2].to_vec(),
        };
        split.train_regions.insert(user.clone(), region);
        split.valid.push(EvalCase {
            user_id: user.clone(),
            prefix: UserSequence {
                items: seq.items[..n - 2].to_vec(),
                timestamps: seq.timestamps[..n - 2].to_vec(),
            },
            target: seq.items[n - 2],
        });
        split.test.push(EvalCase {
            user_id: user.clone(),
            prefix: UserSequence {
                items: seq.items[..n - 1].to_vec(),
                timestamps: seq.timestamps[..n - 1].to_vec(),
            },
            target: seq.items[n - 1],
        });
    }
    split
}
