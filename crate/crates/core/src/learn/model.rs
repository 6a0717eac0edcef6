use super::{Classifier, DecisionTree, LearnError, ModelKind, ModelParams, Task};
use crate::features::{FeatureKind, TermCounts, Vocabulary};
use crate::obfuscator::Label;

/// A classifier bundled with the vocabulary and weighting it was trained on.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub task: Task,
    pub features: FeatureKind,
    pub l2: bool,
    pub vocab: Vocabulary,
    pub classifier: Classifier,
}

impl TrainedModel {
    /// Fits vocabulary and classifier on the samples inside `task`.
    pub fn train(
        docs: &[TermCounts],
        labels: &[Label],
        task: Task,
        model: ModelKind,
        params: &ModelParams,
        features: FeatureKind,
        l2: bool,
    ) -> Result<TrainedModel, LearnError> {
        if docs.len() != labels.len() {
            return Err(LearnError::LengthMismatch);
        }
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| task.project(labels[i]).is_some()).collect();
        let y: Vec<usize> = idx.iter().map(|&i| task.project(labels[i]).expect("filtered")).collect();
        for (c, name) in task.classes().iter().enumerate() {
            if !y.contains(&c) {
                return Err(LearnError::ClassAbsent(name));
            }
        }
        let vocab = Vocabulary::fit(idx.iter().map(|&i| &docs[i])).map_err(|_| LearnError::EmptyInput)?;
        let x: Vec<_> = idx.iter().map(|&i| vocab.vectorize(&docs[i], features, l2)).collect();
        let classifier = Classifier::fit(model, &x, &y, 2, vocab.len(), params)?;
        Ok(TrainedModel { task, features, l2, vocab, classifier })
    }

    /// Class index in `task.classes()`.
    pub fn predict(&self, doc: &TermCounts) -> usize {
        self.classifier.predict(&self.vocab.vectorize(doc, self.features, self.l2))
    }

    /// Header line, vocabulary block, tree block. Only trees are persisted.
    pub fn to_text(&self) -> Result<String, LearnError> {
        let Classifier::Tree(tree) = &self.classifier else {
            return Err(LearnError::Format { line: 0, msg: "only decision trees can be saved".into() });
        };
        Ok(format!(
            "opdeob-model v1 task={} features={} l2={}\n{}{}",
            self.task,
            self.features,
            self.l2 as u8,
            self.vocab.to_text(),
            tree.dump()
        ))
    }

    pub fn from_text(text: &str) -> Result<TrainedModel, LearnError> {
        let bad = |line: usize, msg: &str| LearnError::Format { line, msg: msg.to_string() };
        let lines: Vec<&str> = text.lines().collect();
        let header = lines.first().and_then(|h| h.strip_prefix("opdeob-model v1 ")).ok_or_else(|| bad(1, "bad header"))?;
        let (mut task, mut features, mut l2) = (None, None, None);
        for kv in header.split_whitespace() {
            match kv.split_once('=') {
                Some(("task", "detection")) => task = Some(Task::Detection),
                Some(("task", "deobfuscation")) => task = Some(Task::Deobfuscation),
                Some(("features", v)) => features = v.parse::<FeatureKind>().ok(),
                Some(("l2", "0")) => l2 = Some(false),
                Some(("l2", "1")) => l2 = Some(true),
                _ => return Err(bad(1, "bad header field")),
            }
        }
        let (Some(task), Some(features), Some(l2)) = (task, features, l2) else {
            return Err(bad(1, "header needs task, features and l2"));
        };
        let split = lines.iter().position(|l| l.starts_with("opdeob-tree ")).ok_or_else(|| bad(lines.len(), "missing tree"))?;
        let vocab = Vocabulary::from_text(&lines[1..split].join("\n"))
            .map_err(|e| bad(2, &format!("vocabulary: {e}")))?;
        let tree = DecisionTree::load(&lines[split..].join("\n"))?;
        Ok(TrainedModel { task, features, l2, vocab, classifier: Classifier::Tree(tree) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> (Vec<TermCounts>, Vec<Label>) {
        let mut docs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..30 {
            let (d, l) = match i % 3 {
                0 => ("ExprInt v1 cmp", Label::Normal),
                1 => ("ExprOp mul v1 v2 cmp", Label::OpTrue),
                _ => ("ExprOp xor v3 cmp", Label::OpFalse),
            };
            docs.push(TermCounts::from_doc(d));
            labels.push(l);
        }
        (docs, labels)
    }

    #[test]
    fn round_trip_predicts_the_same() {
        let (docs, labels) = corpus();
        for task in [Task::Detection, Task::Deobfuscation] {
            let m = TrainedModel::train(&docs, &labels, task, ModelKind::Tree, &ModelParams::default(), FeatureKind::TfIdf, true)
                .unwrap();
            let text = m.to_text().unwrap();
            let back = TrainedModel::from_text(&text).unwrap();
            assert_eq!(back.to_text().unwrap(), text);
            for (d, l) in docs.iter().zip(&labels) {
                assert_eq!(back.predict(d), m.predict(d));
                if let Some(c) = task.project(*l) {
                    assert_eq!(m.predict(d), c);
                }
            }
        }
    }

    #[test]
    fn baselines_are_not_persisted() {
        let (docs, labels) = corpus();
        let m = TrainedModel::train(&docs, &labels, Task::Detection, ModelKind::Mnb, &ModelParams::default(), FeatureKind::Tf, false)
            .unwrap();
        assert!(m.to_text().is_err());
        assert!(TrainedModel::from_text("nonsense").is_err());
    }
}
