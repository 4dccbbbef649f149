use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DataError, ItemId};

/// Column layout of a plain-text interaction log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogFormat {
    /// user, item, rating, timestamp (MovieLens `u.data`)
    UserItemRatingTime,
    /// user, item, timestamp
    UserItemTime,
}

impl FromStr for LogFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uirt" | "user-item-rating-time" | "movielens" => Ok(LogFormat::UserItemRatingTime),
            "uit" | "user-item-time" => Ok(LogFormat::UserItemTime),
            other => Err(DataError::UnknownFormat(other.to_string())),
        }
    }
}

impl LogFormat {
    pub fn key(self) -> &'static str {
        match self {
            LogFormat::UserItemRatingTime => "uirt",
            LogFormat::UserItemTime => "uit",
        }
    }
}

/// Minimum interaction counts. Users below `max(min_user, 3)` and items below
/// `min_item` are removed repeatedly until both thresholds hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_user: usize,
    pub min_item: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_user: 10,
            min_item: 10,
        }
    }
}

impl FilterConfig {
    pub fn none() -> Self {
        FilterConfig {
            min_user: 3,
            min_item: 1,
        }
    }
}

/// Counts of the raw file before any filtering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
}

/// Chronologically ordered item sequences, one per user, with dense ids.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionLog {
    sequences: Vec<Vec<ItemId>>,
    user_labels: Vec<String>,
    item_labels: Vec<String>,
    raw: RawStats,
}

impl InteractionLog {
    /// Builds a log from already-dense sequences (items in `1..=item_count`).
    pub fn from_sequences(sequences: Vec<Vec<ItemId>>, item_count: usize) -> Self {
        let interactions = sequences.iter().map(Vec::len).sum();
        InteractionLog {
            user_labels: (0..sequences.len()).map(|u| (u + 1).to_string()).collect(),
            item_labels: (1..=item_count).map(|i| i.to_string()).collect(),
            raw: RawStats {
                users: sequences.len(),
                items: item_count,
                interactions,
            },
            sequences,
        }
    }

    pub fn user_count(&self) -> usize {
        self.sequences.len()
    }

    /// Number of real items `m`; ids run `1..=m`.
    pub fn item_count(&self) -> usize {
        self.item_labels.len()
    }

    pub fn interaction_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn sequence(&self, user: usize) -> &[ItemId] {
        &self.sequences[user]
    }

    pub fn sequences(&self) -> &[Vec<ItemId>] {
        &self.sequences
    }

    pub fn raw_stats(&self) -> RawStats {
        self.raw
    }

    /// Original identifier of a dense user index.
    pub fn user_label(&self, user: usize) -> &str {
        &self.user_labels[user]
    }

    pub fn item_label(&self, item: ItemId) -> &str {
        &self.item_labels[item - 1]
    }

    /// Writes `user<TAB>item<TAB>timestamp` lines with the position as timestamp.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (u, seq) in self.sequences.iter().enumerate() {
            for (pos, item) in seq.iter().enumerate() {
                let _ = writeln!(out, "{}\t{}\t{}", u + 1, item, pos);
            }
        }
        out
    }
}

struct Row {
    user: String,
    item: String,
    time: f64,
}

pub fn load_interactions(
    path: impl AsRef<Path>,
    format: LogFormat,
    filter: FilterConfig,
) -> Result<InteractionLog, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_interactions(&text, format, filter)
}

/// Parses a whitespace-separated log. Blank lines and `#` comments are
/// skipped. Ties in timestamp keep file order.
pub fn parse_interactions(
    text: &str,
    format: LogFormat,
    filter: FilterConfig,
) -> Result<InteractionLog, DataError> {
    let expected = match format {
        LogFormat::UserItemRatingTime => 4,
        LogFormat::UserItemTime => 3,
    };
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != expected {
            return Err(DataError::Malformed {
                line: line_no,
                reason: format!("expected {expected} fields, found {}", fields.len()),
            });
        }
        if format == LogFormat::UserItemRatingTime && fields[2].parse::<f64>().is_err() {
            return Err(DataError::Malformed {
                line: line_no,
                reason: format!("rating `{}` is not a number", fields[2]),
            });
        }
        let ts = fields[expected - 1];
        let time: f64 = ts.parse().map_err(|_| DataError::Malformed {
            line: line_no,
            reason: format!("timestamp `{ts}` is not a number"),
        })?;
        rows.push(Row {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            time,
        });
    }

    let raw = RawStats {
        users: distinct(rows.iter().map(|r| r.user.as_str())),
        items: distinct(rows.iter().map(|r| r.item.as_str())),
        interactions: rows.len(),
    };

    // per-user chronological order; stable sort keeps file order on ties
    let mut by_user: BTreeMap<Key, Vec<(f64, String)>> = BTreeMap::new();
    for r in rows {
        by_user.entry(Key::new(&r.user)).or_default().push((r.time, r.item));
    }
    let mut users: Vec<(Key, Vec<String>)> = by_user
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            (k, v.into_iter().map(|(_, i)| i).collect())
        })
        .collect();

    let min_user = filter.min_user.max(3);
    loop {
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for (_, seq) in &users {
            for i in seq {
                *item_counts.entry(i.as_str()).or_default() += 1;
            }
        }
        let drop_items: std::collections::HashSet<String> = item_counts
            .iter()
            .filter(|(_, &c)| c < filter.min_item)
            .map(|(i, _)| i.to_string())
            .collect();
        let before: usize = users.iter().map(|(_, s)| s.len()).sum::<usize>() + users.len();
        for (_, seq) in users.iter_mut() {
            seq.retain(|i| !drop_items.contains(i));
        }
        users.retain(|(_, s)| s.len() >= min_user);
        let after: usize = users.iter().map(|(_, s)| s.len()).sum::<usize>() + users.len();
        if after == before {
            break;
        }
    }
    if users.is_empty() {
        return Err(DataError::EmptyAfterFilter {
            min_user,
            min_item: filter.min_item,
        });
    }

    let mut items: Vec<Key> = users
        .iter()
        .flat_map(|(_, s)| s.iter().map(|i| Key::new(i)))
        .collect();
    items.sort();
    items.dedup();
    let item_index: HashMap<&str, ItemId> = items
        .iter()
        .enumerate()
        .map(|(i, k)| (k.text.as_str(), i + 1))
        .collect();
    let sequences = users
        .iter()
        .map(|(_, s)| s.iter().map(|i| item_index[i.as_str()]).collect())
        .collect();
    Ok(InteractionLog {
        sequences,
        user_labels: users.iter().map(|(k, _)| k.text.clone()).collect(),
        item_labels: items.iter().map(|k| k.text.clone()).collect(),
        raw,
    })
}

fn distinct<'a>(it: impl Iterator<Item = &'a str>) -> usize {
    it.collect::<std::collections::HashSet<_>>().len()
}

/// Identifier ordered numerically when it parses as an integer; non-numeric
/// ids sort lexicographically after all numeric ones.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    rank: (u8, i128),
    text: String,
}

impl Key {
    fn new(s: &str) -> Self {
        let rank = match s.parse::<i128>() {
            Ok(n) => (0, n),
            Err(_) => (1, 0),
        };
        Key {
            rank,
            text: s.to_string(),
        }
    }
}
