use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{accuracy, macro_f1, Classifier, LearnError, ModelKind, ModelParams, Task};
use crate::features::{FeatureKind, FeatureVector, TermCounts, Vocabulary};
use crate::obfuscator::Label;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CvConfig {
    pub model: ModelKind,
    pub params: ModelParams,
    pub features: FeatureKind,
    /// Scale each vector to unit length.
    pub l2: bool,
    pub k: usize,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { model: ModelKind::Tree, params: ModelParams::default(), features: FeatureKind::Tf, l2: false, k: 20, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldScore {
    pub accuracy: f64,
    pub f1: f64,
    pub test_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub k: usize,
    pub folds: Vec<FoldScore>,
    pub mean_accuracy: f64,
    pub mean_f1: f64,
    pub wall: Duration,
    /// Held-out prediction per input sample; `None` for samples outside the task.
    pub predictions: Vec<Option<usize>>,
}

impl CvReport {
    /// `fold,size,accuracy,f1` table, one row per fold.
    pub fn folds_csv(&self) -> String {
        let mut s = String::from("fold,size,accuracy,f1\n");
        for (i, f) in self.folds.iter().enumerate() {
            s.push_str(&format!("{i},{},{:.6},{:.6}\n", f.test_size, f.accuracy, f.f1));
        }
        s
    }
}

/// Assigns every item a fold in `0..k` so that each group lands in a single
/// fold and per-class counts stay close to `total / k`. Without groups every
/// item is its own group.
pub fn fold_assignment(y: &[usize], groups: Option<&[String]>, n_classes: usize, k: usize, seed: u64) -> Result<Vec<usize>, LearnError> {
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let names: Vec<String>;
    let keys: &[String] = match groups {
        Some(g) => g,
        None => {
            names = (0..y.len()).map(|i| format!("{i:09}")).collect();
            &names
        }
    };
    for (i, g) in keys.iter().enumerate() {
        by_group.entry(g.as_str()).or_default().push(i);
    }
    let mut totals = vec![0usize; n_classes];
    for &c in y {
        totals[c] += 1;
    }
    let min_class = totals.iter().copied().min().unwrap_or(0);
    if k < 2 || by_group.len() < k || min_class < k {
        return Err(LearnError::TooFewForFolds { k, available: by_group.len().min(min_class) });
    }
    let mut order: Vec<(&str, Vec<usize>)> = by_group.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|g| std::cmp::Reverse(g.1.len()));

    let target: Vec<f64> = totals.iter().map(|&t| t as f64 / k as f64).collect();
    let mut fold_counts = vec![vec![0usize; n_classes]; k];
    let mut fold_size = vec![0usize; k];
    let mut out = vec![0usize; y.len()];
    for (_, members) in &order {
        let mut gc = vec![0usize; n_classes];
        for &m in members {
            gc[y[m]] += 1;
        }
        let cost = |f: usize| -> f64 {
            (0..n_classes)
                .map(|c| {
                    let after = (fold_counts[f][c] + gc[c]) as f64 - target[c];
                    let before = fold_counts[f][c] as f64 - target[c];
                    after * after - before * before
                })
                .sum()
        };
        let mut best = 0;
        for f in 1..k {
            let (a, b) = (cost(f), cost(best));
            if a < b || (a == b && fold_size[f] < fold_size[best]) {
                best = f;
            }
        }
        for c in 0..n_classes {
            fold_counts[best][c] += gc[c];
        }
        fold_size[best] += members.len();
        for &m in members {
            out[m] = best;
        }
    }
    Ok(out)
}

/// k-fold cross-validation; vocabulary and model are fit on the training
/// folds only.
pub fn kfold_cv(
    docs: &[TermCounts],
    labels: &[Label],
    groups: Option<&[String]>,
    task: Task,
    cfg: &CvConfig,
) -> Result<CvReport, LearnError> {
    let start = Instant::now();
    if docs.len() != labels.len() || groups.is_some_and(|g| g.len() != labels.len()) {
        return Err(LearnError::LengthMismatch);
    }
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| task.project(labels[i]).is_some()).collect();
    let y: Vec<usize> = idx.iter().map(|&i| task.project(labels[i]).expect("filtered")).collect();
    for (c, name) in task.classes().iter().enumerate() {
        if !y.contains(&c) {
            return Err(LearnError::ClassAbsent(name));
        }
    }
    let sub_groups: Option<Vec<String>> = groups.map(|g| idx.iter().map(|&i| g[i].clone()).collect());
    let folds = fold_assignment(&y, sub_groups.as_deref(), 2, cfg.k, cfg.seed)?;

    let results: Vec<Result<(FoldScore, Vec<(usize, usize)>), LearnError>> = (0..cfg.k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..idx.len()).filter(|&j| folds[j] != f).collect();
            let test: Vec<usize> = (0..idx.len()).filter(|&j| folds[j] == f).collect();
            let vocab = Vocabulary::fit(train.iter().map(|&j| &docs[idx[j]])).map_err(|_| LearnError::EmptyInput)?;
            let vec_of = |j: usize| -> FeatureVector { vocab.vectorize(&docs[idx[j]], cfg.features, cfg.l2) };
            let xtr: Vec<FeatureVector> = train.iter().map(|&j| vec_of(j)).collect();
            let ytr: Vec<usize> = train.iter().map(|&j| y[j]).collect();
            let clf = Classifier::fit(cfg.model, &xtr, &ytr, 2, vocab.len(), &cfg.params)?;
            let preds: Vec<usize> = test.iter().map(|&j| clf.predict(&vec_of(j))).collect();
            let truth: Vec<usize> = test.iter().map(|&j| y[j]).collect();
            let score = FoldScore { accuracy: accuracy(&truth, &preds), f1: macro_f1(&truth, &preds, 2), test_size: test.len() };
            Ok((score, test.iter().map(|&j| idx[j]).zip(preds).collect()))
        })
        .collect();

    let mut scores = Vec::with_capacity(cfg.k);
    let mut predictions = vec![None; labels.len()];
    for r in results {
        let (s, p) = r?;
        scores.push(s);
        for (i, c) in p {
            predictions[i] = Some(c);
        }
    }
    let n = scores.len() as f64;
    Ok(CvReport {
        k: cfg.k,
        mean_accuracy: scores.iter().map(|s| s.accuracy).sum::<f64>() / n,
        mean_f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
        folds: scores,
        wall: start.elapsed(),
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_and_respect_groups() {
        let y: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let g: Vec<String> = (0..200).map(|i| format!("p{}", i / 5)).collect();
        let f = fold_assignment(&y, Some(&g), 2, 10, 3).unwrap();
        for i in 0..200 {
            for j in 0..200 {
                if g[i] == g[j] {
                    assert_eq!(f[i], f[j]);
                }
            }
        }
        let mut sizes = [0usize; 10];
        for &x in &f {
            sizes[x] += 1;
        }
        assert!(sizes.iter().all(|&s| s >= 15 && s <= 25), "{sizes:?}");
    }

    #[test]
    fn stratified_without_groups() {
        let y: Vec<usize> = (0..100).map(|i| (i < 30) as usize).collect();
        let f = fold_assignment(&y, None, 2, 10, 1).unwrap();
        for fold in 0..10 {
            let ones = (0..100).filter(|&i| f[i] == fold && y[i] == 1).count();
            assert_eq!(ones, 3);
        }
    }

    #[test]
    fn too_many_folds() {
        assert!(matches!(fold_assignment(&[0, 1, 0, 1], None, 2, 3, 0), Err(LearnError::TooFewForFolds { .. })));
    }

    #[test]
    fn separable_corpus_scores_one() {
        let docs: Vec<TermCounts> =
            (0..40).map(|i| TermCounts::from_doc(if i % 2 == 0 { "ExprInt v1" } else { "ExprCond v1" })).collect();
        let labels: Vec<Label> = (0..40).map(|i| if i % 2 == 0 { Label::Normal } else { Label::OpTrue }).collect();
        let r = kfold_cv(&docs, &labels, None, Task::Detection, &CvConfig { k: 4, ..Default::default() }).unwrap();
        assert_eq!(r.mean_accuracy, 1.0);
        assert_eq!(r.mean_f1, 1.0);
        assert_eq!(r.folds.len(), 4);
        assert!(r.predictions.iter().all(Option::is_some));
    }

    #[test]
    fn missing_class_rejected() {
        let docs = vec![TermCounts::from_doc("a"); 4];
        let labels = vec![Label::OpTrue; 4];
        assert_eq!(
            kfold_cv(&docs, &labels, None, Task::Deobfuscation, &CvConfig { k: 2, ..Default::default() }),
            Err(LearnError::ClassAbsent("FALSE"))
        );
    }
}
