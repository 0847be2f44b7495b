use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// Subject-level assignment of records to folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    /// Fold id per record index.
    pub fold_assignment: Vec<usize>,
    pub num_folds: usize,
    pub val_fold: usize,
}

impl FoldSplit {
    pub fn is_val(&self, record: usize) -> bool {
        self.fold_assignment[record] == self.val_fold
    }

    pub fn with_val_fold(mut self, fold: usize) -> Result<Self> {
        if fold >= self.num_folds {
            return Err(Error::Config(format!("val fold {fold} >= {}", self.num_folds)));
        }
        self.val_fold = fold;
        Ok(self)
    }

    pub fn train_records(&self) -> Vec<usize> {
        (0..self.fold_assignment.len()).filter(|&r| !self.is_val(r)).collect()
    }

    pub fn val_records(&self) -> Vec<usize> {
        (0..self.fold_assignment.len()).filter(|&r| self.is_val(r)).collect()
    }
}

/// Shuffles distinct subjects with `seed` and deals them round-robin into
/// `num_folds` folds. The last fold is the validation fold.
pub fn make_folds(manifest: &DatasetManifest, num_folds: usize, seed: u64) -> Result<FoldSplit> {
    if num_folds < 2 {
        return Err(Error::Config(format!("num_folds must be >= 2, got {num_folds}")));
    }
    // BTreeMap keeps subject order independent of record order hashing
    let mut subjects: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        subjects.entry(r.subject_id.as_str()).or_default().push(i);
    }
    if subjects.len() < num_folds {
        return Err(Error::Data(format!(
            "{} distinct subjects cannot fill {num_folds} folds",
            subjects.len()
        )));
    }
    let mut order: Vec<&str> = subjects.keys().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_assignment = vec![0; manifest.len()];
    for (k, subject) in order.iter().enumerate() {
        for &rec in &subjects[subject] {
            fold_assignment[rec] = k % num_folds;
        }
    }
    Ok(FoldSplit {
        fold_assignment,
        num_folds,
        val_fold: num_folds - 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::ManifestRecord;
    use proptest::prelude::*;
    use std::collections::HashMap;
    use std::path::PathBuf;

    fn manifest(subjects: &[&str]) -> DatasetManifest {
        DatasetManifest {
            root: PathBuf::new(),
            records: subjects
                .iter()
                .map(|s| ManifestRecord {
                    signal_path: PathBuf::from("x"),
                    num_channels: 1,
                    num_samples: 1,
                    sampling_rate_hz: 240.0,
                    labels: None,
                    subject_id: s.to_string(),
                })
                .collect(),
        }
    }

    fn subjects_per_fold(m: &DatasetManifest, f: &FoldSplit) -> Vec<usize> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, r) in m.records.iter().enumerate() {
            seen.insert(&r.subject_id, f.fold_assignment[i]);
        }
        let mut counts = vec![0; f.num_folds];
        for fold in seen.values() {
            counts[*fold] += 1;
        }
        counts
    }

    #[test]
    fn ten_subjects_ten_folds() {
        let names: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let m = manifest(&names.iter().map(String::as_str).collect::<Vec<_>>());
        let f = make_folds(&m, 10, 1).unwrap();
        assert_eq!(subjects_per_fold(&m, &f), vec![1; 10]);
    }

    #[test]
    fn too_few_subjects() {
        let m = manifest(&["a", "a", "a"]);
        assert!(matches!(make_folds(&m, 2, 0), Err(Error::Data(_))));
        assert!(matches!(make_folds(&m, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn seeds_change_assignment_not_sizes() {
        let names: Vec<String> = (0..100).map(|i| format!("s{i:03}")).collect();
        let m = manifest(&names.iter().map(String::as_str).collect::<Vec<_>>());
        let a = make_folds(&m, 10, 1).unwrap();
        let b = make_folds(&m, 10, 2).unwrap();
        assert_ne!(a.fold_assignment, b.fold_assignment);
        assert_eq!(subjects_per_fold(&m, &a), vec![10; 10]);
        assert_eq!(subjects_per_fold(&m, &b), vec![10; 10]);
        assert_eq!(a, make_folds(&m, 10, 1).unwrap());
        assert_eq!(a.train_records().len() + a.val_records().len(), 100);
    }

    proptest! {
        #[test]
        fn subjects_never_straddle_folds(
            subj in proptest::collection::vec(0u8..30, 5..120),
            folds in 2usize..6,
            seed in any::<u64>(),
        ) {
            let names: Vec<String> = subj.iter().map(|s| format!("p{s}")).collect();
            let m = manifest(&names.iter().map(String::as_str).collect::<Vec<_>>());
            let distinct = names.iter().collect::<std::collections::HashSet<_>>().len();
            prop_assume!(distinct >= folds);
            let f = make_folds(&m, folds, seed).unwrap();
            let mut by_subject: HashMap<&str, usize> = HashMap::new();
            for (i, n) in names.iter().enumerate() {
                let fold = *by_subject.entry(n).or_insert(f.fold_assignment[i]);
                prop_assert_eq!(fold, f.fold_assignment[i]);
            }
            let counts = subjects_per_fold(&m, &f);
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
            prop_assert_eq!(&f, &make_folds(&m, folds, seed).unwrap());
        }
    }
}
