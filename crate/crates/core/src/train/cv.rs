use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, TrainError};

fn by_class<L: Ord + Copy>(labels: &[L]) -> BTreeMap<L, Vec<usize>> {
    let mut m: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        m.entry(l).or_default().push(i);
    }
    m
}

/// Fold index per sample. Each class is shuffled and dealt round-robin,
/// continuing from where the previous class stopped, so per-class counts
/// and fold sizes both differ by at most one.
pub fn stratified_kfold<L: Ord + Copy>(labels: &[L], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(TrainError::Config(format!("need at least 2 folds, got {folds}")));
    }
    if labels.len() < folds {
        return Err(TrainError::Config(format!(
            "{} samples cannot fill {folds} folds",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign = vec![0; labels.len()];
    let mut next = 0;
    for (_, mut idx) in by_class(labels) {
        idx.shuffle(&mut rng);
        for i in idx {
            assign[i] = next;
            next = (next + 1) % folds;
        }
    }
    Ok(assign)
}

/// Splits `indices` into (train, validation) with about `fraction` of each
/// class held out, never emptying a class from the training side.
pub fn stratified_holdout<L: Ord + Copy>(
    indices: &[usize],
    labels: &[L],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let sub: Vec<L> = indices.iter().map(|&i| labels[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class(&sub) {
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * fraction).round() as usize).min(idx.len() - 1);
        val.extend(idx[..n_val].iter().map(|&j| indices[j]));
        train.extend(idx[n_val..].iter().map(|&j| indices[j]));
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(labels: &[u8], assign: &[usize], folds: usize) -> Vec<[usize; 3]> {
        let mut c = vec![[0; 3]; folds];
        for (&l, &f) in labels.iter().zip(assign) {
            c[f][l as usize] += 1;
        }
        c
    }

    #[test]
    fn clinical_class_counts_stratify() {
        let labels: Vec<u8> = [(0, 29), (1, 45), (2, 65)]
            .iter()
            .flat_map(|&(l, n)| std::iter::repeat(l).take(n))
            .collect();
        let a = stratified_kfold(&labels, 10, 3).unwrap();
        for c in counts(&labels, &a, 10) {
            assert!((2..=3).contains(&c[0]) && (4..=5).contains(&c[1]) && (6..=7).contains(&c[2]), "{c:?}");
        }
    }

    #[test]
    fn leave_one_out_and_errors() {
        let labels = [0u8, 1, 2, 0, 1];
        let mut a = stratified_kfold(&labels, 5, 0).unwrap();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        assert!(stratified_kfold(&labels, 1, 0).is_err());
    }

    #[test]
    fn holdout_keeps_every_class_in_training() {
        let labels = [0u8, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 2];
        let idx: Vec<usize> = (0..labels.len()).collect();
        let (tr, va) = stratified_holdout(&idx, &labels, 0.1, 1);
        assert_eq!(va.len(), 1);
        assert_eq!(tr.len(), 11);
        assert!(tr.contains(&10) && tr.contains(&11));
    }
}
