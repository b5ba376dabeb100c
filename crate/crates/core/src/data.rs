//! Interaction ingestion, sequence building, leave-one-out split, popularity.
//!
//! Canonical interchange is JSONL (`{"user","item","timestamp"}` /
//! `{"item","text"}`); the MovieLens `::` format is converted by an adapter.
//! Repeated user-item interactions are kept. Catalog indices are assigned by
//! lexicographic external id so ingestion output is independent of
//! interaction file order.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UnitError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// One `items.jsonl` row: external id plus description text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemText {
    pub item: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub index: usize,
    pub id: String,
    pub text: String,
}

/// Dense item-index ↔ external-id ↔ description mapping. `items[i].index == i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemCatalog {
    pub items: Vec<CatalogEntry>,
}

impl ItemCatalog {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// External-id → index map, rebuilt on demand (the catalog itself stays
    /// plain serializable data).
    pub fn id_lookup(&self) -> HashMap<&str, usize> {
        self.items.iter().map(|e| (e.id.as_str(), e.index)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: String,
    /// Catalog indices ordered by nondecreasing timestamp, ties by input order.
    pub items: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitUser {
    pub id: String,
    pub train: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub users: Vec<SplitUser>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityTable {
    pub counts: Vec<u64>,
    /// Mean-1 normalized over items with count > 0, clamped below at the floor.
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub avg_len: f64,
    pub density: f64,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path).map_err(|e| UnitError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        out.push(line.map_err(|e| UnitError::io(path, e))?);
    }
    Ok(out)
}

pub fn load_interactions_jsonl(path: impl AsRef<Path>) -> Result<Vec<Interaction>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (lineno, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Interaction = serde_json::from_str(line).map_err(|e| {
            UnitError::Data(format!("{}: line {}: {}", path.display(), lineno + 1, e))
        })?;
        if rec.user.is_empty() || rec.item.is_empty() {
            return Err(UnitError::Data(format!(
                "{}: line {}: empty user or item id",
                path.display(),
                lineno + 1
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_items_jsonl(path: impl AsRef<Path>) -> Result<Vec<ItemText>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (lineno, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ItemText = serde_json::from_str(line).map_err(|e| {
            UnitError::Data(format!("{}: line {}: {}", path.display(), lineno + 1, e))
        })?;
        if rec.item.is_empty() {
            return Err(UnitError::Data(format!(
                "{}: line {}: empty item id",
                path.display(),
                lineno + 1
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_interactions_jsonl(path: impl AsRef<Path>, rows: &[Interaction]) -> Result<()> {
    write_jsonl(path.as_ref(), rows)
}

pub fn write_items_jsonl(path: impl AsRef<Path>, rows: &[ItemText]) -> Result<()> {
    write_jsonl(path.as_ref(), rows)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| UnitError::io(path, e))?;
    for row in rows {
        let line = serde_json::to_string(row)
            .map_err(|e| UnitError::Data(format!("serialize row: {e}")))?;
        writeln!(file, "{line}").map_err(|e| UnitError::io(path, e))?;
    }
    Ok(())
}

/// MovieLens 1M adapter: `user::item::rating::timestamp` ratings rows and
/// `item::title::genres` movies rows. Rating values are parsed for
/// validation and discarded; description = title + " " + genres.
pub fn load_movielens(
    ratings_path: impl AsRef<Path>,
    movies_path: impl AsRef<Path>,
) -> Result<(Vec<Interaction>, Vec<ItemText>)> {
    let ratings_path = ratings_path.as_ref();
    let movies_path = movies_path.as_ref();

    let mut interactions = Vec::new();
    for (rowno, line) in read_lines(ratings_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 4 {
            return Err(UnitError::Data(format!(
                "{}: row {}: expected 4 ::-delimited fields, got {}",
                ratings_path.display(),
                rowno + 1,
                fields.len()
            )));
        }
        let bad = |what: &str| {
            UnitError::Data(format!(
                "{}: row {}: unparseable {what}",
                ratings_path.display(),
                rowno + 1
            ))
        };
        fields[2].parse::<f64>().map_err(|_| bad("rating"))?;
        let timestamp: i64 = fields[3].parse().map_err(|_| bad("timestamp"))?;
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(bad("empty user or item id"));
        }
        interactions.push(Interaction {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            timestamp,
        });
    }

    let mut items = Vec::new();
    for (rowno, line) in read_lines(movies_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 3 {
            return Err(UnitError::Data(format!(
                "{}: row {}: expected 3 ::-delimited fields, got {}",
                movies_path.display(),
                rowno + 1,
                fields.len()
            )));
        }
        items.push(ItemText {
            item: fields[0].to_string(),
            text: format!("{} {}", fields[1], fields[2]),
        });
    }

    Ok((interactions, items))
}

/// Groups interactions per user (first-appearance user order), sorts each
/// user's events by timestamp (stable, so ties keep input order), drops
/// users shorter than `min_seq_len`, and indexes surviving items
/// lexicographically by external id.
pub fn build_sequences(
    interactions: &[Interaction],
    item_texts: &[ItemText],
    min_seq_len: usize,
) -> Result<(ItemCatalog, Vec<UserSequence>)> {
    if min_seq_len < 2 {
        return Err(UnitError::Usage(format!(
            "min_seq_len must be >= 2, got {min_seq_len}"
        )));
    }

    let mut user_slot: HashMap<&str, usize> = HashMap::new();
    let mut per_user: Vec<(&str, Vec<(i64, &str)>)> = Vec::new();
    for rec in interactions {
        let slot = *user_slot.entry(rec.user.as_str()).or_insert_with(|| {
            per_user.push((rec.user.as_str(), Vec::new()));
            per_user.len() - 1
        });
        per_user[slot].1.push((rec.timestamp, rec.item.as_str()));
    }

    let mut surviving: Vec<(&str, Vec<&str>)> = Vec::new();
    for (user, mut events) in per_user {
        events.sort_by_key(|&(ts, _)| ts);
        if events.len() < min_seq_len {
            continue;
        }
        surviving.push((user, events.into_iter().map(|(_, item)| item).collect()));
    }

    let mut ids: BTreeSet<&str> = BTreeSet::new();
    for (_, items) in &surviving {
        ids.extend(items.iter());
    }

    let texts: HashMap<&str, &str> = item_texts
        .iter()
        .map(|it| (it.item.as_str(), it.text.as_str()))
        .collect();

    let mut entries = Vec::with_capacity(ids.len());
    let mut index_of: HashMap<&str, usize> = HashMap::with_capacity(ids.len());
    for (index, id) in ids.iter().enumerate() {
        let text = texts.get(id).ok_or_else(|| {
            UnitError::Data(format!("item '{id}' has no text entry"))
        })?;
        entries.push(CatalogEntry {
            index,
            id: id.to_string(),
            text: text.to_string(),
        });
        index_of.insert(id, index);
    }

    let sequences = surviving
        .into_iter()
        .map(|(user, items)| UserSequence {
            user: user.to_string(),
            items: items.into_iter().map(|id| index_of[id]).collect(),
        })
        .collect();

    Ok((ItemCatalog { items: entries }, sequences))
}

/// Per user: target = last item, train prefix = everything earlier.
pub fn leave_one_out_split(sequences: &[UserSequence]) -> Result<DatasetSplit> {
    let mut users = Vec::with_capacity(sequences.len());
    for seq in sequences {
        if seq.items.len() < 2 {
            return Err(UnitError::Usage(format!(
                "user '{}' has sequence length {} (< 2), cannot split",
                seq.user,
                seq.items.len()
            )));
        }
        let (target, train) = seq.items.split_last().expect("len >= 2");
        users.push(SplitUser {
            id: seq.user.clone(),
            train: train.to_vec(),
            target: *target,
        });
    }
    Ok(DatasetSplit { users })
}

/// Counts occurrences across training prefixes and normalizes to mean 1 over
/// items with positive count; zero-count items (and anything below) get the
/// floor, keeping every p strictly positive for the popularity-weighted loss.
pub fn compute_popularity<'a, I>(
    train_sequences: I,
    n_items: usize,
    floor: f64,
) -> Result<PopularityTable>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    if floor <= 0.0 {
        return Err(UnitError::Usage(format!("popularity floor must be > 0, got {floor}")));
    }
    let mut counts = vec![0u64; n_items];
    for seq in train_sequences {
        for &item in seq {
            if item >= n_items {
                return Err(UnitError::Usage(format!(
                    "item index {item} out of range for catalog of {n_items}"
                )));
            }
            counts[item] += 1;
        }
    }

    let positive: Vec<u64> = counts.iter().copied().filter(|&c| c > 0).collect();
    if positive.is_empty() {
        return Err(UnitError::Data("empty training data: all popularity counts are zero".into()));
    }
    let mean = positive.iter().sum::<u64>() as f64 / positive.len() as f64;

    let p = counts
        .iter()
        .map(|&c| if c > 0 { (c as f64 / mean).max(floor) } else { floor })
        .collect();

    Ok(PopularityTable { counts, p })
}

pub fn dataset_stats(sequences: &[UserSequence], catalog: &ItemCatalog) -> Result<DatasetStats> {
    if sequences.is_empty() || catalog.is_empty() {
        return Err(UnitError::Usage("dataset_stats requires nonempty sequences and catalog".into()));
    }
    let total: usize = sequences.iter().map(|s| s.items.len()).sum();
    let users = sequences.len();
    let items = catalog.len();
    Ok(DatasetStats {
        users,
        items,
        avg_len: total as f64 / users as f64,
        density: total as f64 / (users as f64 * items as f64),
    })
}
