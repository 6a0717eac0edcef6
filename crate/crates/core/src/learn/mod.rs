//! Classifiers, metrics and cross-validation for the detection and
//! deobfuscation tasks.

mod baselines;
mod cv;
mod model;
mod tree;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use baselines::{Knn, Mnb};
pub use cv::{fold_assignment, kfold_cv, CvConfig, CvReport, FoldScore};
pub use model::TrainedModel;
pub use tree::{gini, DecisionTree, Node, TreeParams};

use crate::features::FeatureVector;
use crate::obfuscator::Label;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LearnError {
    #[error("no training samples")]
    EmptyInput,
    #[error("feature and label counts differ")]
    LengthMismatch,
    #[error("label index out of range or bad model parameter")]
    BadClass,
    #[error("class {0} is absent from the corpus")]
    ClassAbsent(&'static str),
    #[error("cannot make {k} folds from {available} items")]
    TooFewForFolds { k: usize, available: usize },
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// NORMAL vs OPAQUE.
    Detection,
    /// TRUE vs FALSE over opaque samples only.
    Deobfuscation,
}

impl Task {
    /// Class names; indices follow lexicographic order.
    pub fn classes(self) -> [&'static str; 2] {
        match self {
            Task::Detection => ["NORMAL", "OPAQUE"],
            Task::Deobfuscation => ["FALSE", "TRUE"],
        }
    }

    pub fn project(self, label: Label) -> Option<usize> {
        match (self, label) {
            (Task::Detection, Label::Normal) => Some(0),
            (Task::Detection, _) => Some(1),
            (Task::Deobfuscation, Label::OpFalse) => Some(0),
            (Task::Deobfuscation, Label::OpTrue) => Some(1),
            (Task::Deobfuscation, Label::Normal) => None,
        }
    }

    /// Class chosen when a per-predicate vote is tied: NORMAL, resp. TRUE.
    pub fn tie_class(self) -> usize {
        match self {
            Task::Detection => 0,
            Task::Deobfuscation => 1,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Detection => "detection",
            Task::Deobfuscation => "deobfuscation",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Tree,
    Knn,
    Mnb,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Tree => "tree",
            ModelKind::Knn => "knn",
            ModelKind::Mnb => "mnb",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<ModelKind, String> {
        match s.to_ascii_lowercase().as_str() {
            "tree" | "dt" => Ok(ModelKind::Tree),
            "knn" => Ok(ModelKind::Knn),
            "mnb" | "nb" => Ok(ModelKind::Mnb),
            _ => Err(format!("unknown model `{s}` (expected tree, knn or mnb)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams {
    pub tree: TreeParams,
    pub k: usize,
    pub alpha: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams { tree: TreeParams::default(), k: 5, alpha: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub enum Classifier {
    Tree(DecisionTree),
    Knn(Knn),
    Mnb(Mnb),
}

impl Classifier {
    pub fn fit(
        kind: ModelKind,
        x: &[FeatureVector],
        y: &[usize],
        n_classes: usize,
        n_features: usize,
        params: &ModelParams,
    ) -> Result<Classifier, LearnError> {
        Ok(match kind {
            ModelKind::Tree => Classifier::Tree(DecisionTree::fit(x, y, n_classes, &params.tree)?),
            ModelKind::Knn => Classifier::Knn(Knn::fit(x, y, n_classes, params.k)?),
            ModelKind::Mnb => Classifier::Mnb(Mnb::fit(x, y, n_classes, n_features, params.alpha)?),
        })
    }

    pub fn predict(&self, x: &FeatureVector) -> usize {
        match self {
            Classifier::Tree(t) => t.predict(x),
            Classifier::Knn(m) => m.predict(x),
            Classifier::Mnb(m) => m.predict(x),
        }
    }
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// F1 averaged over classes; a class with no predictions has precision 0.
pub fn macro_f1(truth: &[usize], pred: &[usize], n_classes: usize) -> f64 {
    let mut sum = 0.0;
    for c in 0..n_classes {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let fp = truth.iter().zip(pred).filter(|&(&t, &p)| t != c && p == c).count() as f64;
        let fne = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p != c).count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fne > 0.0 { tp / (tp + fne) } else { 0.0 };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    sum / n_classes as f64
}

/// Most frequent class; ties involving `tie` resolve to it, other ties to the
/// lowest index.
pub fn majority_vote(preds: &[usize], n_classes: usize, tie: usize) -> usize {
    let mut counts = vec![0usize; n_classes];
    for &p in preds {
        counts[p] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    if counts.get(tie) == Some(&max) {
        return tie;
    }
    counts.iter().position(|&c| c == max).unwrap_or(tie)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn votes() {
        assert_eq!(majority_vote(&[1, 1, 0], 2, 0), 1);
        assert_eq!(majority_vote(&[1, 0], 2, 0), 0);
        assert_eq!(majority_vote(&[1, 0], 2, 1), 1);
        assert_eq!(majority_vote(&[], 2, 1), 1);
    }

    #[test]
    fn metrics() {
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]), 0.75);
        assert_eq!(macro_f1(&[0, 1], &[0, 1], 2), 1.0);
        // class 0: p=2/3 r=1 f=0.8; class 1: p=1 r=1/2 f=2/3
        let f = macro_f1(&[0, 0, 1, 1], &[0, 0, 1, 0], 2);
        assert!((f - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn projections() {
        assert_eq!(Task::Detection.project(Label::OpFalse), Some(1));
        assert_eq!(Task::Deobfuscation.project(Label::Normal), None);
        assert_eq!(Task::Deobfuscation.classes()[Task::Deobfuscation.tie_class()], "TRUE");
    }
}
