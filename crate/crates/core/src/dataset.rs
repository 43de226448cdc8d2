//! Implicit-feedback interaction sets.
//!
//! Two text formats are accepted, UTF-8 with LF or CRLF line endings:
//!
//! - adjacency: `user item item ...` per line;
//! - pairs: `user item` per line.
//!
//! Blank lines are ignored. Ids are non-negative integers.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Adjacency,
    Pairs,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adjacency" => Ok(Format::Adjacency),
            "pairs" => Ok(Format::Pairs),
            other => Err(Error::invalid(format!("unknown dataset format '{other}'"))),
        }
    }
}

/// Per-user sorted positive items in CSR layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSet {
    num_users: usize,
    num_items: usize,
    offsets: Vec<usize>,
    items: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrainingPair {
    pub user: u32,
    pub pos_item: u32,
}

impl InteractionSet {
    /// Builds from per-user item lists; lists are sorted and deduplicated.
    /// `num_items` is raised to cover every id present.
    pub fn from_lists(mut lists: Vec<Vec<u32>>, num_items: usize) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut items = Vec::new();
        let mut max_item = None;
        offsets.push(0);
        for list in &mut lists {
            list.sort_unstable();
            list.dedup();
            if let Some(&last) = list.last() {
                max_item = max_item.max(Some(last));
            }
            items.extend_from_slice(list);
            offsets.push(items.len());
        }
        let num_items = num_items.max(max_item.map_or(0, |m| m as usize + 1));
        InteractionSet {
            num_users: lists.len(),
            num_items,
            offsets,
            items,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn items(&self) -> &[u32] {
        &self.items
    }

    /// Total number of (user, item) pairs.
    pub fn num_pairs(&self) -> usize {
        self.items.len()
    }

    pub fn user_items(&self, user: usize) -> &[u32] {
        &self.items[self.offsets[user]..self.offsets[user + 1]]
    }

    pub fn contains(&self, user: usize, item: u32) -> bool {
        self.user_items(user).binary_search(&item).is_ok()
    }

    /// Grows the id universes. Shrinking is an error.
    pub fn with_universe(mut self, num_users: usize, num_items: usize) -> Result<Self> {
        if num_users < self.num_users || num_items < self.num_items {
            return Err(Error::invalid(format!(
                "cannot shrink universe {}x{} to {num_users}x{num_items}",
                self.num_users, self.num_items
            )));
        }
        let last = *self.offsets.last().unwrap();
        self.offsets.resize(num_users + 1, last);
        self.num_users = num_users;
        self.num_items = num_items;
        Ok(self)
    }

    pub fn pairs(&self) -> impl Iterator<Item = TrainingPair> + '_ {
        (0..self.num_users).flat_map(move |u| {
            self.user_items(u).iter().map(move |&i| TrainingPair {
                user: u as u32,
                pos_item: i,
            })
        })
    }

    /// Writes the adjacency format; users with no items are written as a bare id.
    pub fn write_adjacency<W: Write>(&self, w: &mut W) -> Result<()> {
        for u in 0..self.num_users {
            write!(w, "{u}")?;
            for i in self.user_items(u) {
                write!(w, " {i}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn parse_id(token: &str, line: usize) -> Result<u32> {
    if token.starts_with('-') {
        return Err(Error::Parse {
            line,
            msg: format!("negative id '{token}'"),
        });
    }
    token.parse::<u32>().map_err(|_| Error::Parse {
        line,
        msg: format!("non-integer token '{token}'"),
    })
}

pub fn parse_reader<R: BufRead>(reader: R, format: Format) -> Result<InteractionSet> {
    let mut lists: Vec<Vec<u32>> = Vec::new();
    let mut seen_any = false;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let mut tokens = line.split_whitespace();
        let Some(first) = tokens.next() else {
            continue;
        };
        seen_any = true;
        let user = parse_id(first, line_no)? as usize;
        if lists.len() <= user {
            lists.resize_with(user + 1, Vec::new);
        }
        match format {
            Format::Adjacency => {
                for t in tokens {
                    let item = parse_id(t, line_no)?;
                    lists[user].push(item);
                }
            }
            Format::Pairs => {
                let (Some(item), None) = (tokens.next(), tokens.next()) else {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "expected exactly two ids".into(),
                    });
                };
                let item = parse_id(item, line_no)?;
                lists[user].push(item);
            }
        }
    }
    if !seen_any {
        return Err(Error::Parse {
            line: 1,
            msg: "empty file".into(),
        });
    }
    Ok(InteractionSet::from_lists(lists, 0))
}

pub fn parse_interactions(path: impl AsRef<Path>, format: Format) -> Result<InteractionSet> {
    parse_reader(BufReader::new(File::open(path)?), format)
}

/// Loads train and test files and aligns both to the union of their id universes.
pub fn load_split(
    train: impl AsRef<Path>,
    test: impl AsRef<Path>,
    format: Format,
) -> Result<(InteractionSet, InteractionSet)> {
    let train = parse_interactions(train, format)?;
    let test = parse_interactions(test, format)?;
    align(train, test)
}

pub fn align(
    train: InteractionSet,
    test: InteractionSet,
) -> Result<(InteractionSet, InteractionSet)> {
    let users = train.num_users.max(test.num_users);
    let items = train.num_items.max(test.num_items);
    Ok((
        train.with_universe(users, items)?,
        test.with_universe(users, items)?,
    ))
}

/// Every (user, positive item) pair of `train` once, in a seed-determined order.
pub fn epoch_pairs(train: &InteractionSet, seed: u64) -> Vec<TrainingPair> {
    let mut pairs: Vec<TrainingPair> = train.pairs().collect();
    let mut rng = rng::stream(seed, 0);
    pairs.shuffle(&mut rng);
    pairs
}

/// The first `max_history` items of the user's train slice.
pub fn history_of(train: &InteractionSet, user: usize, max_history: usize) -> Result<&[u32]> {
    if user >= train.num_users {
        return Err(Error::invalid(format!(
            "user {user} out of range (num_users = {})",
            train.num_users
        )));
    }
    let items = train.user_items(user);
    Ok(&items[..items.len().min(max_history)])
}

/// Parameters of the clustered synthetic generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    /// Interactions per user before the train/test split.
    pub per_user: usize,
    /// Probability an interaction comes from the user's home cluster.
    pub affinity: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Same user and item counts as the public Gowalla split, with a similar
    /// number of interactions per user.
    pub fn gowalla_shaped(seed: u64) -> Self {
        SyntheticSpec {
            users: 29_858,
            items: 40_981,
            clusters: 200,
            per_user: 34,
            affinity: 0.8,
            test_fraction: 0.2,
            seed,
        }
    }
}

/// Generates a train/test split where each user favours one item cluster.
///
/// Items are split into `clusters` contiguous blocks; each interaction comes
/// from the user's home cluster with probability `affinity`, otherwise from a
/// uniformly random item. The held-out test items are a random
/// `test_fraction` of each user's interactions (at least one when the user has
/// two or more).
pub fn synthetic(spec: &SyntheticSpec) -> Result<(InteractionSet, InteractionSet)> {
    if spec.users == 0 || spec.items == 0 || spec.clusters == 0 || spec.clusters > spec.items {
        return Err(Error::invalid("synthetic dataset needs users, items >= clusters >= 1"));
    }
    if spec.per_user > spec.items {
        return Err(Error::invalid("per_user exceeds item count"));
    }
    let mut rng = rng::stream(spec.seed, 0);
    let block = spec.items / spec.clusters;
    let mut train = Vec::with_capacity(spec.users);
    let mut test = Vec::with_capacity(spec.users);
    for _ in 0..spec.users {
        let home = rng.random_range(0..spec.clusters);
        let lo = home * block;
        let hi = if home + 1 == spec.clusters { spec.items } else { lo + block };
        let mut chosen: Vec<u32> = Vec::with_capacity(spec.per_user);
        let mut attempts = 0;
        while chosen.len() < spec.per_user && attempts < spec.per_user * 50 {
            attempts += 1;
            let item = if rng.random_bool(spec.affinity) {
                rng.random_range(lo..hi)
            } else {
                rng.random_range(0..spec.items)
            } as u32;
            if !chosen.contains(&item) {
                chosen.push(item);
            }
        }
        chosen.shuffle(&mut rng);
        let n_test = if chosen.len() >= 2 {
            ((chosen.len() as f64 * spec.test_fraction).round() as usize).clamp(1, chosen.len() - 1)
        } else {
            0
        };
        let tr = chosen.split_off(n_test);
        test.push(chosen);
        train.push(tr);
    }
    align(
        InteractionSet::from_lists(train, spec.items),
        InteractionSet::from_lists(test, spec.items),
    )
}
