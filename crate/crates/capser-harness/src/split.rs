//! Stratified k-fold cross-validation partitions.

use capser_tensor::seeding::child_rng;
use rand::seq::SliceRandom;

use crate::corpus::Corpus;
use crate::error::{HarnessError, Result};

/// Splits `corpus` into `k` disjoint test folds covering every index, with
/// each class dealt round-robin from its own seeded shuffle. Consecutive
/// classes start dealing at consecutive folds, so fold sizes stay within
/// one item of each other globally as well as per class. Classes with
/// fewer than `k` items cannot reach every fold; they are still dealt
/// (some folds simply miss them) and a warning is logged.
///
/// Returns `(train_indices, test_indices)` pairs, both sorted.
pub fn kfold_split(corpus: &Corpus, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(HarnessError::Contract(format!(
            "{k} folds requested; need at least 2"
        )));
    }
    if corpus.len() < k {
        return Err(HarnessError::Contract(format!(
            "{} items cannot fill {k} folds",
            corpus.len()
        )));
    }

    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut start = 0usize;
    for (label, name) in corpus.label_names().iter().enumerate() {
        let mut indices: Vec<usize> = corpus
            .items()
            .iter()
            .enumerate()
            .filter(|(_, item)| item.label == label)
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            continue;
        }
        if indices.len() < k {
            log::warn!(
                "class {name} has {} items, fewer than {k} folds; some folds will not see it",
                indices.len()
            );
        }
        indices.shuffle(&mut child_rng(seed, &format!("class{label}")));
        for (j, idx) in indices.iter().enumerate() {
            folds[(start + j) % k].push(*idx);
        }
        start = (start + indices.len()) % k;
    }

    let mut out = Vec::with_capacity(k);
    for f in 0..k {
        let mut test = folds[f].clone();
        test.sort_unstable();
        let mut train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, fold)| fold.iter().copied())
            .collect();
        train.sort_unstable();
        out.push((train, test));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_corpus, SynthSpec};

    fn corpus(classes: usize, per_class: usize) -> Corpus {
        synth_corpus(
            &SynthSpec {
                classes,
                per_class,
                frames: 2,
                coeffs: 3,
                ..SynthSpec::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn folds_partition_all_indices() {
        let c = corpus(2, 50);
        let folds = kfold_split(&c, 10, 3).unwrap();
        assert_eq!(folds.len(), 10);
        let mut seen = vec![0usize; c.len()];
        for (train, test) in &folds {
            assert_eq!(test.len(), 10);
            assert_eq!(train.len(), 90);
            for &i in test {
                seen[i] += 1;
            }
            // No index appears on both sides of one fold.
            for &i in test {
                assert!(train.binary_search(&i).is_err());
            }
        }
        assert!(seen.iter().all(|&n| n == 1));
    }

    #[test]
    fn folds_are_stratified_on_a_balanced_corpus() {
        let c = corpus(2, 50);
        let folds = kfold_split(&c, 10, 3).unwrap();
        for (_, test) in &folds {
            let per_class = [0, 1].map(|class| {
                test.iter()
                    .filter(|&&i| c.items()[i].label == class)
                    .count() as i64
            });
            // 50 items over 10 folds: exactly five of each class per fold,
            // so the proportion is within one item of the global 50/50.
            assert!((per_class[0] - 5).abs() <= 1, "{per_class:?}");
            assert!((per_class[1] - 5).abs() <= 1, "{per_class:?}");
        }
    }

    #[test]
    fn identical_seeds_give_identical_partitions() {
        let c = corpus(3, 17);
        assert_eq!(kfold_split(&c, 10, 9).unwrap(), kfold_split(&c, 10, 9).unwrap());
        assert_ne!(kfold_split(&c, 10, 9).unwrap(), kfold_split(&c, 10, 10).unwrap());
    }

    #[test]
    fn tiny_class_still_partitions() {
        // 3 items of one class across 4 folds: dealt to 3 of the folds.
        let items: Vec<_> = corpus(1, 3).items().to_vec();
        let big: Vec<_> = corpus(1, 17)
            .items()
            .iter()
            .cloned()
            .map(|mut item| {
                item.id = format!("b_{}", item.id);
                item.label = 1;
                item
            })
            .collect();
        let all = Corpus::new(
            items.into_iter().chain(big).collect(),
            vec!["anger".into(), "happiness".into()],
        )
        .unwrap();
        let folds = kfold_split(&all, 4, 1).unwrap();
        let covered: usize = folds.iter().map(|(_, test)| test.len()).sum();
        assert_eq!(covered, all.len());
    }

    #[test]
    fn rejects_undersized_requests() {
        let c = corpus(1, 3);
        assert!(kfold_split(&c, 4, 0).is_err());
        assert!(kfold_split(&c, 1, 0).is_err());
    }
}
