use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::numerics::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Labeled training subjects drawn per class (ℓ).
    pub labeled_per_class: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { labeled_per_class: 10, val_size: 200, test_size: 500, repetitions: 10, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

const CLASSES: [u8; 2] = [0, 1];

/// Draw the split for one repetition. The result depends only on
/// `(spec.seed, repetition)` and the labels.
///
/// Training takes ℓ subjects per class uniformly without replacement;
/// validation and test are drawn uniformly from the remaining labeled
/// subjects. Unlabeled subjects never enter any split.
pub fn make_splits(labels: &[Option<u8>], spec: &SplitSpec, repetition: usize) -> Result<Split, DataError> {
    if spec.repetitions == 0 {
        return Err(DataError::InvalidArgument("repetitions must be at least 1".into()));
    }
    if spec.labeled_per_class == 0 {
        return Err(DataError::InvalidArgument("labeled_per_class must be at least 1".into()));
    }
    let mut rng = rng_for(spec.seed, "split", repetition as u64);
    let mut train = Vec::with_capacity(spec.labeled_per_class * CLASSES.len());
    let mut taken = vec![false; labels.len()];
    for class in CLASSES {
        let mut members: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| **l == Some(class)).map(|(i, _)| i).collect();
        if members.len() < spec.labeled_per_class {
            return Err(DataError::InsufficientClass { class, needed: spec.labeled_per_class, have: members.len() });
        }
        members.shuffle(&mut rng);
        for &i in &members[..spec.labeled_per_class] {
            taken[i] = true;
            train.push(i);
        }
    }
    let mut rest: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some() && !taken[i]).collect();
    let needed = spec.val_size + spec.test_size;
    if rest.len() < needed {
        return Err(DataError::InsufficientRemainder { needed, have: rest.len() });
    }
    rest.shuffle(&mut rng);
    let mut val = rest[..spec.val_size].to_vec();
    let mut test = rest[spec.val_size..needed].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<Option<u8>> {
        (0..n).map(|i| Some((i % 2) as u8)).collect()
    }

    fn spec(l: usize) -> SplitSpec {
        SplitSpec { labeled_per_class: l, val_size: 10, test_size: 20, repetitions: 3, seed: 11 }
    }

    #[test]
    fn two_per_class() {
        let y = labels(60);
        let s = make_splits(&y, &spec(2), 0).unwrap();
        assert_eq!(s.train.len(), 4);
        assert_eq!(s.train.iter().filter(|&&i| y[i] == Some(0)).count(), 2);
        assert_eq!(s.val.len(), 10);
        assert_eq!(s.test.len(), 20);
    }

    #[test]
    fn deterministic_per_repetition() {
        let y = labels(60);
        assert_eq!(make_splits(&y, &spec(3), 1).unwrap(), make_splits(&y, &spec(3), 1).unwrap());
        assert_ne!(make_splits(&y, &spec(3), 0).unwrap().train, make_splits(&y, &spec(3), 1).unwrap().train);
    }

    #[test]
    fn unlabeled_excluded() {
        let mut y = labels(60);
        y[5] = None;
        for rep in 0..5 {
            let s = make_splits(&y, &spec(2), rep).unwrap();
            assert!(!s.train.contains(&5) && !s.val.contains(&5) && !s.test.contains(&5));
        }
    }

    #[test]
    fn insufficient_class() {
        let y = vec![Some(0), Some(1), Some(1)];
        let err = make_splits(&y, &SplitSpec { labeled_per_class: 2, val_size: 0, test_size: 0, repetitions: 1, seed: 0 }, 0);
        assert!(matches!(err, Err(DataError::InsufficientClass { class: 0, .. })));
    }

    #[test]
    fn insufficient_remainder() {
        let y = labels(20);
        assert!(matches!(make_splits(&y, &spec(2), 0), Err(DataError::InsufficientRemainder { .. })));
    }
}
