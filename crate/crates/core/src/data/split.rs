//! User-disjoint train/validation/test assignment.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub users: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn of(&self, user: &str) -> Option<Split> {
        self.users.get(user).copied()
    }

    pub fn members(&self, s: Split) -> BTreeSet<&str> {
        self.users
            .iter()
            .filter(|(_, &v)| v == s)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn count(&self, s: Split) -> usize {
        self.users.values().filter(|&&v| v == s).count()
    }
}

/// `round(frac * n)` with halves rounded up, at least 1.
pub fn share(frac: f64, n: usize) -> usize {
    ((frac * n as f64 + 0.5).floor() as usize).max(1)
}

/// Seeded shuffle of the distinct users; `round(test_frac * U)` go to test,
/// `round(val_frac * rest)` of the remainder to validation, the rest to train.
pub fn split_by_user(user_ids: &[String], seed: u64, test_frac: f64, val_frac: f64) -> Result<SplitAssignment> {
    let users: BTreeSet<&String> = user_ids.iter().collect();
    if users.len() < 3 {
        return Err(DataError::Invalid(format!(
            "split_by_user needs at least 3 distinct users, got {}",
            users.len()
        )));
    }
    if !(0.0..1.0).contains(&test_frac) || !(0.0..1.0).contains(&val_frac) {
        return Err(DataError::Invalid("split fractions must lie in [0, 1)".into()));
    }
    let mut order: Vec<&String> = users.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let u = order.len();
    let n_test = share(test_frac, u).min(u - 2);
    let rest = u - n_test;
    let n_val = share(val_frac, rest).min(rest - 1);
    let mut map = BTreeMap::new();
    for (i, user) in order.into_iter().enumerate() {
        let s = if i < n_test {
            Split::Test
        } else if i < n_test + n_val {
            Split::Val
        } else {
            Split::Train
        };
        map.insert(user.clone(), s);
    }
    Ok(SplitAssignment { users: map })
}

/// Picks `round(frac * n_u)` trials of every listed user (at least one, and
/// always leaving one) for a trial-level holdout. Returns indices into
/// `users_of_trials`, sorted.
pub fn holdout_trials(users_of_trials: &[&str], users: &BTreeSet<&str>, frac: f64, seed: u64) -> Vec<usize> {
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in users_of_trials.iter().enumerate() {
        if users.contains(u) {
            by_user.entry(u).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (_, mut idx) in by_user {
        if idx.len() < 2 {
            continue;
        }
        idx.shuffle(&mut rng);
        let k = share(frac, idx.len()).min(idx.len() - 1);
        out.extend_from_slice(&idx[..k]);
    }
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn users(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("u{i:02}")).collect()
    }

    #[test]
    fn split_examples() {
        let s = split_by_user(&users(69), 1, 0.15, 0.15).unwrap();
        assert_eq!((s.count(Split::Test), s.count(Split::Val), s.count(Split::Train)), (10, 9, 50));
        let s = split_by_user(&users(3), 1, 0.15, 0.15).unwrap();
        assert_eq!((s.count(Split::Test), s.count(Split::Val), s.count(Split::Train)), (1, 1, 1));
        assert_eq!(split_by_user(&users(12), 9, 0.15, 0.15).unwrap(), split_by_user(&users(12), 9, 0.15, 0.15).unwrap());
        assert!(split_by_user(&users(2), 1, 0.15, 0.15).is_err());
    }

    #[test]
    fn duplicate_ids_count_once() {
        let mut u = users(5);
        u.extend(users(5));
        let s = split_by_user(&u, 0, 0.15, 0.15).unwrap();
        assert_eq!(s.users.len(), 5);
    }

    #[test]
    fn holdout_takes_a_share_per_user() {
        let ids: Vec<String> = (0..30).map(|i| format!("u{}", i % 3)).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let keep: BTreeSet<&str> = ["u0", "u1"].into_iter().collect();
        let h = holdout_trials(&refs, &keep, 0.2, 4);
        assert_eq!(h.len(), 4);
        assert!(h.iter().all(|&i| refs[i] != "u2"));
    }
}
