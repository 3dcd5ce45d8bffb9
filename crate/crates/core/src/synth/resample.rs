//! Frequency-aware re-sampling of class descriptions: classes with fewer
//! visual samples receive more (and more diverse) text variants.

use rand::seq::SliceRandom;

use super::textpool::TextPool;
use crate::error::{Error, Result};
use crate::rng;

/// Text-variant quotas `q_c ∝ 1 / N_c`, rounded by largest remainder so they
/// sum to `budget`. A class left at zero is raised to one, taking the unit
/// from the largest quota (ties: the class with more visual samples).
pub fn quotas(counts: &[usize], budget: usize) -> Result<Vec<usize>> {
    let c = counts.len();
    if c == 0 || budget < c {
        return Err(Error::Config(format!(
            "text budget {budget} must be at least the class count {c}"
        )));
    }
    if counts.iter().any(|&n| n == 0) {
        return Err(Error::Config(
            "every class needs at least one visual sample".into(),
        ));
    }
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let total: f64 = inv.iter().sum();
    let exact: Vec<f64> = inv.iter().map(|w| w / total * budget as f64).collect();
    let mut q: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        // Remainders equal up to rounding count as tied.
        if (ra - rb).abs() <= 1e-9 {
            a.cmp(&b)
        } else {
            rb.total_cmp(&ra)
        }
    });
    let assigned: usize = q.iter().sum();
    for &i in order.iter().take(budget - assigned) {
        q[i] += 1;
    }
    while let Some(zero) = q.iter().position(|&v| v == 0) {
        let donor = (0..c)
            .max_by(|&a, &b| {
                q[a].cmp(&q[b])
                    .then(counts[a].cmp(&counts[b]))
                    .then(b.cmp(&a))
            })
            .expect("nonempty");
        q[donor] -= 1;
        q[zero] = 1;
    }
    Ok(q)
}

/// Draws `quotas[c]` descriptions per class, without replacement until the
/// class pool is exhausted and cycling through a fresh shuffle after that.
pub fn adaptive_resample(
    pool: &TextPool,
    counts: &[usize],
    budget: usize,
    seed: u64,
) -> Result<Vec<(usize, String)>> {
    if pool.classes.len() != counts.len() {
        return Err(Error::Config(format!(
            "text pool has {} classes but {} counts were given",
            pool.classes.len(),
            counts.len()
        )));
    }
    let q = quotas(counts, budget)?;
    let mut out = Vec::with_capacity(budget);
    for (c, class) in pool.classes.iter().enumerate() {
        let phrases: Vec<&str> = class.descriptions().collect();
        if phrases.is_empty() {
            return Err(Error::Config(format!(
                "class {:?} has an empty text pool",
                class.name
            )));
        }
        let mut rng = rng::stream(seed, &format!("resample:{c}"));
        let mut deck: Vec<&str> = Vec::new();
        for _ in 0..q[c] {
            if deck.is_empty() {
                deck = phrases.clone();
                deck.shuffle(&mut rng);
                deck.reverse();
            }
            out.push((c, deck.pop().expect("refilled").to_string()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;

    #[test]
    fn equal_counts_give_equal_quotas() {
        let q = quotas(&[7, 7, 7, 7], 10).unwrap();
        assert_eq!(q.iter().sum::<usize>(), 10);
        assert!(q.iter().max().unwrap() - q.iter().min().unwrap() <= 1);
    }

    #[test]
    fn inverse_frequency_example() {
        assert_eq!(quotas(&[1, 9], 10).unwrap(), vec![9, 1]);
    }

    #[test]
    fn budget_below_class_count_is_rejected() {
        assert!(quotas(&[1, 2, 3], 2).is_err());
    }

    #[test]
    fn rare_classes_get_more_distinct_phrases() {
        let pool = TextPool::for_classes(3);
        let counts = [200, 5, 200];
        let draws = adaptive_resample(&pool, &counts, 30, 4).unwrap();
        let distinct = |c: usize| {
            draws
                .iter()
                .filter(|(k, _)| *k == c)
                .map(|(_, p)| p.as_str())
                .collect::<BTreeSet<_>>()
                .len()
        };
        assert!(distinct(1) > distinct(0));
        assert!(distinct(1) > distinct(2));
    }

    #[test]
    fn empty_pool_is_a_config_error() {
        let mut pool = TextPool::for_classes(2);
        pool.classes[1].lexical_variants.clear();
        pool.classes[1].attribute_phrases.clear();
        assert!(matches!(
            adaptive_resample(&pool, &[3, 3], 4, 0),
            Err(Error::Config(_))
        ));
    }

    /// Independent largest-remainder oracle using exact rational arithmetic
    /// on integers: share_c = B * (L / N_c) / Σ (L / N_c) with L = lcm.
    fn oracle(counts: &[usize], budget: usize) -> Vec<usize> {
        fn gcd(a: u128, b: u128) -> u128 {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        let l = counts
            .iter()
            .fold(1u128, |acc, &n| acc / gcd(acc, n as u128) * n as u128);
        let w: Vec<u128> = counts.iter().map(|&n| l / n as u128).collect();
        let s: u128 = w.iter().sum();
        let b = budget as u128;
        let mut q: Vec<usize> = w.iter().map(|&wi| (b * wi / s) as usize).collect();
        let rem: Vec<u128> = w.iter().map(|&wi| (b * wi) % s).collect();
        let mut idx: Vec<usize> = (0..counts.len()).collect();
        idx.sort_by(|&a, &c| rem[c].cmp(&rem[a]).then(a.cmp(&c)));
        let left = budget - q.iter().sum::<usize>();
        for &i in idx.iter().take(left) {
            q[i] += 1;
        }
        q
    }

    proptest! {
        #[test]
        fn quotas_sum_to_budget_and_are_monotone(
            counts in proptest::collection::vec(1usize..60, 2..8),
            extra in 0usize..50,
        ) {
            let budget = counts.len() + extra;
            let q = quotas(&counts, budget).unwrap();
            prop_assert_eq!(q.iter().sum::<usize>(), budget);
            prop_assert!(q.iter().all(|&v| v >= 1));
            for a in 0..counts.len() {
                for b in 0..counts.len() {
                    if counts[a] < counts[b] {
                        prop_assert!(q[a] >= q[b], "{:?} -> {:?}", counts, q);
                    }
                }
            }
            let o = oracle(&counts, budget);
            if o.iter().all(|&v| v >= 1) {
                prop_assert_eq!(q, o);
            }
        }
    }
}
