use std::cmp::Ordering;
use std::fmt::Write as _;

use super::LearnError;
use crate::features::FeatureVector;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeParams {
    /// `None` grows until purity.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_impurity_decrease: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams { max_depth: None, min_samples_split: 2, min_impurity_decrease: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    /// Samples with `x[feature] <= threshold` go left.
    Split { feature: u32, threshold: f64, left: usize, right: usize },
    Leaf { class: usize, counts: Vec<u64> },
}

/// CART classifier with Gini impurity; nodes stored in preorder.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTree {
    pub n_classes: usize,
    pub nodes: Vec<Node>,
}

pub fn gini(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

fn argmax(counts: &[u64]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Split score `sum_c l_c^2 / n_l + sum_c r_c^2 / n_r` as an exact fraction;
/// larger means lower weighted Gini of the children.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Score {
    num: u128,
    den: u128,
}

impl Score {
    pub(crate) fn of(left: &[u64], right: &[u64]) -> Score {
        let sq = |v: &[u64]| v.iter().map(|&c| (c as u128) * (c as u128)).sum::<u128>();
        let nl: u128 = left.iter().map(|&c| c as u128).sum();
        let nr: u128 = right.iter().map(|&c| c as u128).sum();
        Score { num: sq(left) * nr + sq(right) * nl, den: nl * nr }
    }

    pub(crate) fn cmp(&self, other: &Score) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

struct Best {
    feature: u32,
    threshold: f64,
    score: Score,
}

impl DecisionTree {
    /// Greedy CART growth. Ties between equally good splits go to the lowest
    /// feature index, then the lowest threshold.
    pub fn fit(x: &[FeatureVector], y: &[usize], n_classes: usize, params: &TreeParams) -> Result<DecisionTree, LearnError> {
        if x.is_empty() {
            return Err(LearnError::EmptyInput);
        }
        if x.len() != y.len() {
            return Err(LearnError::LengthMismatch);
        }
        if y.iter().any(|&c| c >= n_classes) {
            return Err(LearnError::BadClass);
        }
        let mut nodes: Vec<Node> = Vec::new();
        // (parent slot to patch, is_left, samples, depth)
        let mut work: Vec<(Option<(usize, bool)>, Vec<u32>, usize)> = vec![(None, (0..x.len() as u32).collect(), 0)];
        while let Some((parent, samples, depth)) = work.pop() {
            let id = nodes.len();
            if let Some((p, is_left)) = parent {
                if let Node::Split { left, right, .. } = &mut nodes[p] {
                    *if is_left { left } else { right } = id;
                }
            }
            let mut counts = vec![0u64; n_classes];
            for &s in &samples {
                counts[y[s as usize]] += 1;
            }
            let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
            let stop = pure
                || samples.len() < params.min_samples_split.max(2)
                || params.max_depth.is_some_and(|d| depth >= d);
            let best = if stop { None } else { best_split(x, y, &samples, &counts) };
            let accept = best.as_ref().is_some_and(|b| {
                if params.min_impurity_decrease <= 0.0 {
                    return true;
                }
                let n = samples.len() as f64;
                let child = (n - b.score.num as f64 / b.score.den as f64) / n;
                gini(&counts) - child >= params.min_impurity_decrease
            });
            match best.filter(|_| accept) {
                None => nodes.push(Node::Leaf { class: argmax(&counts), counts }),
                Some(b) => {
                    let (l, r): (Vec<u32>, Vec<u32>) =
                        samples.iter().partition(|&&s| x[s as usize].get(b.feature) <= b.threshold);
                    nodes.push(Node::Split { feature: b.feature, threshold: b.threshold, left: 0, right: 0 });
                    work.push((Some((id, false)), r, depth + 1));
                    work.push((Some((id, true)), l, depth + 1));
                }
            }
        }
        Ok(DecisionTree { n_classes, nodes })
    }

    pub fn predict(&self, x: &FeatureVector) -> usize {
        self.leaf(x).0
    }

    fn leaf(&self, x: &FeatureVector) -> (usize, usize) {
        let mut i = 0;
        let mut depth = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { class, .. } => return (*class, depth),
                Node::Split { feature, threshold, left, right } => {
                    i = if x.get(*feature) <= *threshold { *left } else { *right };
                    depth += 1;
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }

    /// Versioned preorder dump: `split <feature> <threshold>` or `leaf <class> <counts...>`.
    pub fn dump(&self) -> String {
        let mut s = format!("opdeob-tree v1 classes={} nodes={}\n", self.n_classes, self.nodes.len());
        for n in &self.nodes {
            match n {
                Node::Split { feature, threshold, .. } => {
                    let _ = writeln!(s, "split {feature} {threshold:?}");
                }
                Node::Leaf { class, counts } => {
                    let _ = write!(s, "leaf {class}");
                    for c in counts {
                        let _ = write!(s, " {c}");
                    }
                    s.push('\n');
                }
            }
        }
        s
    }

    pub fn load(text: &str) -> Result<DecisionTree, LearnError> {
        let bad = |line: usize, msg: &str| LearnError::Format { line, msg: msg.to_string() };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
        let rest = header.strip_prefix("opdeob-tree v1 ").ok_or_else(|| bad(1, "bad header"))?;
        let mut n_classes = None;
        let mut n_nodes = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("classes", v)) => n_classes = v.parse::<usize>().ok(),
                Some(("nodes", v)) => n_nodes = v.parse::<usize>().ok(),
                _ => return Err(bad(1, "bad header field")),
            }
        }
        let (Some(n_classes), Some(n_nodes)) = (n_classes, n_nodes) else {
            return Err(bad(1, "header needs classes and nodes"));
        };
        let body: Vec<&str> = lines.collect();
        if body.len() != n_nodes || n_nodes == 0 {
            return Err(bad(1, "node count mismatch"));
        }
        // Rebuild child links from preorder: each split's left child follows it,
        // its right child follows the left subtree.
        let mut nodes = Vec::with_capacity(n_nodes);
        for (k, line) in body.iter().enumerate() {
            let no = k + 2;
            let mut it = line.split_whitespace();
            match it.next() {
                Some("split") => {
                    let feature = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(no, "bad feature"))?;
                    let threshold = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(no, "bad threshold"))?;
                    nodes.push(Node::Split { feature, threshold, left: 0, right: 0 });
                }
                Some("leaf") => {
                    let class: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(no, "bad class"))?;
                    let counts: Vec<u64> = it.map(|v| v.parse().map_err(|_| bad(no, "bad count"))).collect::<Result<_, _>>()?;
                    if class >= n_classes || counts.len() != n_classes {
                        return Err(bad(no, "class out of range"));
                    }
                    nodes.push(Node::Leaf { class, counts });
                }
                _ => return Err(bad(no, "expected split or leaf")),
            }
        }
        fn link(nodes: &mut [Node], i: usize) -> Option<usize> {
            if i >= nodes.len() {
                return None;
            }
            match nodes[i] {
                Node::Leaf { .. } => Some(i + 1),
                Node::Split { .. } => {
                    let l = i + 1;
                    let r = link(nodes, l)?;
                    let end = link(nodes, r)?;
                    if let Node::Split { left, right, .. } = &mut nodes[i] {
                        *left = l;
                        *right = r;
                    }
                    Some(end)
                }
            }
        }
        if link(&mut nodes, 0) != Some(n_nodes) {
            return Err(bad(1, "malformed preorder"));
        }
        Ok(DecisionTree { n_classes, nodes })
    }
}

fn best_split(x: &[FeatureVector], y: &[usize], samples: &[u32], counts: &[u64]) -> Option<Best> {
    let k = counts.len();
    let mut entries: Vec<(u32, f64, usize)> = Vec::new();
    for &s in samples {
        let c = y[s as usize];
        for &(f, v) in &x[s as usize].entries {
            if v != 0.0 {
                entries.push((f, v, c));
            }
        }
    }
    entries.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut best: Option<Best> = None;
    let mut i = 0;
    let mut groups: Vec<(f64, Vec<u64>)> = Vec::new();
    while i < entries.len() {
        let f = entries[i].0;
        let mut j = i;
        while j < entries.len() && entries[j].0 == f {
            j += 1;
        }
        // Distinct values of feature f in ascending order, implicit zeros included.
        groups.clear();
        let mut zeros = counts.to_vec();
        for e in &entries[i..j] {
            zeros[e.2] -= 1;
        }
        let mut zero_pushed = false;
        for e in &entries[i..j] {
            if !zero_pushed && e.1 > 0.0 {
                if zeros.iter().any(|&c| c > 0) {
                    groups.push((0.0, zeros.clone()));
                }
                zero_pushed = true;
            }
            match groups.last_mut() {
                Some((v, cs)) if *v == e.1 => cs[e.2] += 1,
                _ => {
                    let mut cs = vec![0u64; k];
                    cs[e.2] = 1;
                    groups.push((e.1, cs));
                }
            }
        }
        if !zero_pushed && zeros.iter().any(|&c| c > 0) {
            groups.push((0.0, zeros.clone()));
        }
        let mut left = vec![0u64; k];
        for g in 0..groups.len().saturating_sub(1) {
            for (l, c) in left.iter_mut().zip(&groups[g].1) {
                *l += c;
            }
            let right: Vec<u64> = counts.iter().zip(&left).map(|(t, l)| t - l).collect();
            let score = Score::of(&left, &right);
            let better = match &best {
                None => true,
                Some(b) => score.cmp(&b.score) == Ordering::Greater,
            };
            if better {
                let threshold = groups[g].0 + (groups[g + 1].0 - groups[g].0) / 2.0;
                best = Some(Best { feature: f, threshold, score });
            }
        }
        i = j;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(pairs: &[(u32, f64)]) -> FeatureVector {
        FeatureVector { entries: pairs.to_vec() }
    }

    #[test]
    fn gini_values() {
        assert_eq!(gini(&[5, 5]), 0.5);
        assert_eq!(gini(&[7, 0]), 0.0);
    }

    #[test]
    fn single_class_is_one_leaf() {
        let x = vec![fv(&[(0, 1.0)]), fv(&[(0, 2.0)])];
        let t = DecisionTree::fit(&x, &[1, 1], 2, &TreeParams::default()).unwrap();
        assert_eq!(t.nodes, vec![Node::Leaf { class: 1, counts: vec![0, 2] }]);
    }

    #[test]
    fn one_dimensional_split() {
        let x = vec![fv(&[]), fv(&[(0, 1.0)]), fv(&[(0, 10.0)]), fv(&[(0, 11.0)])];
        let t = DecisionTree::fit(&x, &[0, 0, 1, 1], 2, &TreeParams::default()).unwrap();
        let Node::Split { threshold, .. } = t.nodes[0] else { panic!("expected split") };
        assert!(threshold > 1.0 && threshold < 10.0);
        assert_eq!(threshold, 5.5);
        for (xi, yi) in x.iter().zip([0, 0, 1, 1]) {
            assert_eq!(t.predict(xi), yi);
        }
    }

    #[test]
    fn depth_limit_respected() {
        let x: Vec<FeatureVector> = (1..=8).map(|v| fv(&[(0, v as f64)])).collect();
        let y = [0, 1, 0, 1, 0, 1, 0, 1];
        let t = DecisionTree::fit(&x, &y, 2, &TreeParams { max_depth: Some(2), ..Default::default() }).unwrap();
        assert!(t.depth() <= 2);
        let full = DecisionTree::fit(&x, &y, 2, &TreeParams::default()).unwrap();
        assert!(x.iter().zip(y).all(|(a, b)| full.predict(a) == b));
    }

    #[test]
    fn dump_round_trips() {
        let x: Vec<FeatureVector> = (0..12).map(|v| fv(&[(v % 3, (v / 3) as f64 + 0.5), (7, v as f64)])).collect();
        let y: Vec<usize> = (0..12).map(|v| (v * 7 % 5 % 2) as usize).collect();
        let t = DecisionTree::fit(&x, &y, 2, &TreeParams::default()).unwrap();
        assert_eq!(DecisionTree::load(&t.dump()).unwrap(), t);
        assert!(DecisionTree::load("opdeob-tree v1 classes=2 nodes=1\nsplit 0 1.0\n").is_err());
    }

    #[test]
    fn empty_rejected() {
        assert_eq!(DecisionTree::fit(&[], &[], 2, &TreeParams::default()), Err(LearnError::EmptyInput));
    }
}
