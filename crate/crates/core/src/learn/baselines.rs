use super::LearnError;
use crate::features::FeatureVector;

/// k-nearest neighbours under Euclidean distance.
#[derive(Clone, Debug)]
pub struct Knn {
    pub k: usize,
    n_classes: usize,
    points: Vec<FeatureVector>,
    norms: Vec<f64>,
    labels: Vec<usize>,
}

impl Knn {
    pub fn fit(x: &[FeatureVector], y: &[usize], n_classes: usize, k: usize) -> Result<Knn, LearnError> {
        if x.is_empty() {
            return Err(LearnError::EmptyInput);
        }
        if x.len() != y.len() {
            return Err(LearnError::LengthMismatch);
        }
        if k == 0 || y.iter().any(|&c| c >= n_classes) {
            return Err(LearnError::BadClass);
        }
        Ok(Knn {
            k,
            n_classes,
            norms: x.iter().map(FeatureVector::norm_sq).collect(),
            points: x.to_vec(),
            labels: y.to_vec(),
        })
    }

    /// Majority label of the `k` nearest points; distance ties keep training
    /// order, vote ties go to the lowest class index.
    pub fn predict(&self, q: &FeatureVector) -> usize {
        let qn = q.norm_sq();
        let mut d: Vec<(f64, usize)> = self
            .points
            .iter()
            .zip(&self.norms)
            .enumerate()
            .map(|(i, (p, n))| ((qn + n - 2.0 * q.dot(p)).max(0.0), i))
            .collect();
        let k = self.k.min(d.len());
        d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; self.n_classes];
        for &(_, i) in &d[..k] {
            votes[self.labels[i]] += 1;
        }
        let mut best = 0;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = c;
            }
        }
        best
    }
}

/// Multinomial naive Bayes with additive smoothing.
#[derive(Clone, Debug)]
pub struct Mnb {
    pub alpha: f64,
    log_prior: Vec<f64>,
    /// Per class, sparse log-likelihoods of seen features.
    log_like: Vec<Vec<f64>>,
    /// Per class, log-likelihood of a feature never seen in that class.
    log_unseen: Vec<f64>,
}

impl Mnb {
    pub fn fit(x: &[FeatureVector], y: &[usize], n_classes: usize, n_features: usize, alpha: f64) -> Result<Mnb, LearnError> {
        if x.is_empty() {
            return Err(LearnError::EmptyInput);
        }
        if x.len() != y.len() {
            return Err(LearnError::LengthMismatch);
        }
        if y.iter().any(|&c| c >= n_classes) {
            return Err(LearnError::BadClass);
        }
        let mut class_n = vec![0usize; n_classes];
        let mut fc = vec![vec![0.0f64; n_features]; n_classes];
        for (v, &c) in x.iter().zip(y) {
            class_n[c] += 1;
            for &(f, w) in &v.entries {
                if (f as usize) < n_features {
                    fc[c][f as usize] += w;
                }
            }
        }
        let n = x.len() as f64;
        let mut log_like = Vec::with_capacity(n_classes);
        let mut log_unseen = Vec::with_capacity(n_classes);
        for counts in &fc {
            let total: f64 = counts.iter().sum::<f64>() + alpha * n_features as f64;
            log_like.push(counts.iter().map(|&c| ((c + alpha) / total).ln()).collect());
            log_unseen.push((alpha / total).ln());
        }
        Ok(Mnb {
            alpha,
            log_prior: class_n.iter().map(|&c| if c == 0 { f64::NEG_INFINITY } else { (c as f64 / n).ln() }).collect(),
            log_like,
            log_unseen,
        })
    }

    pub fn log_posterior(&self, q: &FeatureVector) -> Vec<f64> {
        (0..self.log_prior.len())
            .map(|c| {
                self.log_prior[c]
                    + q.entries
                        .iter()
                        .map(|&(f, w)| w * self.log_like[c].get(f as usize).copied().unwrap_or(self.log_unseen[c]))
                        .sum::<f64>()
            })
            .collect()
    }

    /// Highest posterior; exact ties go to the lowest class index.
    pub fn predict(&self, q: &FeatureVector) -> usize {
        let lp = self.log_posterior(q);
        let mut best = 0;
        for (c, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = c;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(pairs: &[(u32, f64)]) -> FeatureVector {
        FeatureVector { entries: pairs.to_vec() }
    }

    #[test]
    fn knn_one_recovers_training_point() {
        let x = vec![fv(&[(0, 1.0)]), fv(&[(1, 3.0)]), fv(&[(0, 2.0), (1, 2.0)])];
        let m = Knn::fit(&x, &[0, 1, 1], 2, 1).unwrap();
        for (p, y) in x.iter().zip([0, 1, 1]) {
            assert_eq!(m.predict(p), y);
        }
    }

    #[test]
    fn knn_majority() {
        let x = vec![fv(&[(0, 1.0)]), fv(&[(0, 1.1)]), fv(&[(0, 0.9)]), fv(&[(0, 9.0)])];
        let m = Knn::fit(&x, &[1, 1, 0, 0], 2, 3).unwrap();
        assert_eq!(m.predict(&fv(&[(0, 1.0)])), 1);
    }

    #[test]
    fn mnb_tie_goes_to_first_class() {
        let x = vec![fv(&[(0, 1.0)]), fv(&[(0, 1.0)])];
        let m = Mnb::fit(&x, &[0, 1], 2, 1, 1.0).unwrap();
        assert_eq!(m.predict(&fv(&[(0, 3.0)])), 0);
        let m = Mnb::fit(&x, &[1, 0], 2, 1, 1.0).unwrap();
        assert_eq!(m.predict(&fv(&[(0, 3.0)])), 0);
    }

    #[test]
    fn mnb_matches_hand_computation() {
        // class 0 counts (3,1), class 1 counts (0,2); alpha = 1, V = 2
        let x = vec![fv(&[(0, 3.0), (1, 1.0)]), fv(&[(1, 2.0)])];
        let m = Mnb::fit(&x, &[0, 1], 2, 2, 1.0).unwrap();
        let lp = m.log_posterior(&fv(&[(0, 1.0)]));
        assert!((lp[0] - (0.5f64.ln() + (4.0f64 / 6.0).ln())).abs() < 1e-12);
        assert!((lp[1] - (0.5f64.ln() + (1.0f64 / 4.0).ln())).abs() < 1e-12);
        assert_eq!(m.predict(&fv(&[(0, 1.0)])), 0);
        assert_eq!(m.predict(&fv(&[(1, 5.0)])), 1);
    }
}
