use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, Result, NUM_CLASSES};
use crate::seed;

/// Sample indices of a train / validation / test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffled_by_class(dataset: &Dataset, seed: u64) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); NUM_CLASSES];
    for (i, s) in dataset.samples().iter().enumerate() {
        by_class[s.label].push(i);
    }
    for (c, members) in by_class.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[c as u64]));
        members.shuffle(&mut rng);
    }
    by_class
}

/// Stratified train / validation / test split.
///
/// Validation and test take `round(fraction * n)` samples of each class, at
/// least one whenever their fraction is positive; train takes the rest.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Partition> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::Fractions(fractions));
    }
    let mut part = Partition {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (class, members) in shuffled_by_class(dataset, seed).into_iter().enumerate() {
        let n = members.len();
        let count = |f: f64| if f > 0.0 { ((f * n as f64).round() as usize).max(1) } else { 0 };
        let (n_val, n_test) = (count(fractions[1]), count(fractions[2]));
        let min_train = usize::from(fractions[0] > 0.0);
        let needed = n_val + n_test + min_train;
        if needed > n {
            return Err(DatasetError::UndersizedClass {
                class,
                available: n,
                needed,
            });
        }
        let n_train = n - n_val - n_test;
        part.train.extend_from_slice(&members[..n_train]);
        part.validation.extend_from_slice(&members[n_train..n_train + n_val]);
        part.test.extend_from_slice(&members[n_train + n_val..]);
    }
    part.train.sort_unstable();
    part.validation.sort_unstable();
    part.test.sort_unstable();
    Ok(part)
}

/// Stratified k-fold plan. Fold `f` tests on fold `f`, validates on fold
/// `(f + 1) mod k`, and trains on the remaining folds.
pub fn kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<Partition>> {
    if k < 2 {
        return Err(DatasetError::FoldCount(k));
    }
    let mut folds = vec![Vec::new(); k];
    // Each class starts where the previous one stopped so remainders spread evenly.
    let mut offset = 0;
    for (class, members) in shuffled_by_class(dataset, seed).into_iter().enumerate() {
        if members.len() < k {
            return Err(DatasetError::UndersizedClass {
                class,
                available: members.len(),
                needed: k,
            });
        }
        for (pos, idx) in members.iter().enumerate() {
            folds[(offset + pos) % k].push(*idx);
        }
        offset = (offset + members.len()) % k;
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok((0..k)
        .map(|f| {
            let val = (f + 1) % k;
            let mut train: Vec<usize> = (0..k).filter(|&g| g != f && g != val).flat_map(|g| folds[g].iter().copied()).collect();
            train.sort_unstable();
            Partition {
                train,
                validation: if val == f { Vec::new() } else { folds[val].clone() },
                test: folds[f].clone(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{default_class_names, LabeledSample, Provenance, Series};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn toy(per_class: usize) -> Dataset {
        let samples = (0..NUM_CLASSES)
            .flat_map(|l| (0..per_class).map(move |i| (l, i)))
            .map(|(l, i)| LabeledSample {
                series: Series::new(1, 1, vec![i as f64], vec!["x".into()]).unwrap(),
                label: l,
                sample_id: format!("{l}-{i}"),
            })
            .collect();
        Dataset::new(samples, default_class_names(), Provenance::Ingested { path: "toy".into() }).unwrap()
    }

    fn per_class(d: &Dataset, idx: &[usize]) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &i in idx {
            c[d.samples()[i].label] += 1;
        }
        c
    }

    #[test]
    fn fifty_per_class_gives_40_5_5() {
        let d = toy(50);
        let p = split(&d, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!(per_class(&d, &p.train), [40; 9]);
        assert_eq!(per_class(&d, &p.validation), [5; 9]);
        assert_eq!(per_class(&d, &p.test), [5; 9]);
    }

    #[test]
    fn degenerate_split() {
        let d = toy(3);
        let p = split(&d, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(p.train.len(), 27);
        assert!(p.validation.is_empty() && p.test.is_empty());
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split(&toy(5), [0.5, 0.1, 0.1], 0), Err(DatasetError::Fractions(_))));
        assert!(matches!(
            split(&toy(2), [0.8, 0.1, 0.1], 0),
            Err(DatasetError::UndersizedClass { needed: 3, .. })
        ));
    }

    #[test]
    fn kfold_counts() {
        let d = toy(50);
        let folds = kfold(&d, 5, 9).unwrap();
        for f in &folds {
            assert_eq!(per_class(&d, &f.test), [10; 9]);
            assert_eq!(per_class(&d, &f.validation), [10; 9]);
            assert_eq!(per_class(&d, &f.train), [30; 9]);
        }
        let small = toy(4);
        for f in kfold(&small, 2, 0).unwrap() {
            assert_eq!(per_class(&small, &f.test), [2; 9]);
        }
        assert!(kfold(&toy(3), 5, 0).is_err());
        assert!(kfold(&toy(3), 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_exactly(per in 3usize..30, seed in any::<u64>()) {
            let d = toy(per);
            let p = split(&d, [0.8, 0.1, 0.1], seed).unwrap();
            let all: Vec<usize> = p.train.iter().chain(&p.validation).chain(&p.test).copied().collect();
            let set: HashSet<usize> = all.iter().copied().collect();
            prop_assert_eq!(all.len(), d.len());
            prop_assert_eq!(set.len(), d.len());
            for (idx, frac) in [(&p.validation, 0.1), (&p.test, 0.1)] {
                for c in per_class(&d, idx) {
                    prop_assert!((c as f64 - frac * per as f64).abs() <= 1.0);
                }
            }
            prop_assert_eq!(split(&d, [0.8, 0.1, 0.1], seed).unwrap(), p);
        }

        #[test]
        fn every_sample_tested_once(per in 5usize..20, k in 2usize..6, seed in any::<u64>()) {
            let d = toy(per);
            let folds = kfold(&d, k, seed).unwrap();
            let mut hits = vec![0; d.len()];
            for f in &folds {
                for &i in &f.test {
                    hits[i] += 1;
                }
                let t: HashSet<_> = f.train.iter().collect();
                prop_assert!(f.test.iter().all(|i| !t.contains(i)));
                prop_assert!(f.validation.iter().all(|i| !t.contains(i)));
            }
            prop_assert!(hits.iter().all(|&h| h == 1));
        }
    }
}
