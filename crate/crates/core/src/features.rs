//! Bag-of-words tokenization and sparse tf / tf-idf vectors.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("cannot fit a vocabulary on an empty corpus")]
    EmptyCorpus,
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
}

/// Splits on whitespace, parentheses, commas and equals, keeping alphanumeric tokens.
pub fn tokenize(doc: &str) -> Vec<&str> {
    doc.split(|c: char| c.is_whitespace() || matches!(c, '(' | ')' | ',' | '='))
        .filter(|t| !t.is_empty() && t.chars().all(|c| c.is_ascii_alphanumeric()))
        .collect()
}

/// Token multiset of one document, sorted by token.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TermCounts(pub Vec<(String, u32)>);

impl TermCounts {
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> TermCounts {
        let mut m: HashMap<&str, u32> = HashMap::new();
        for t in tokens {
            *m.entry(t.as_ref()).or_insert(0) += 1;
        }
        let mut v: Vec<(String, u32)> = m.into_iter().map(|(k, c)| (k.to_string(), c)).collect();
        v.sort_unstable();
        TermCounts(v)
    }

    pub fn from_doc(doc: &str) -> TermCounts {
        TermCounts::from_tokens(&tokenize(doc))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    Tf,
    TfIdf,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Tf => "tf",
            FeatureKind::TfIdf => "tfidf",
        })
    }
}

impl FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<FeatureKind, String> {
        match s.to_ascii_lowercase().as_str() {
            "tf" => Ok(FeatureKind::Tf),
            "tfidf" | "tf-idf" => Ok(FeatureKind::TfIdf),
            _ => Err(format!("unknown feature kind `{s}` (expected tf or tfidf)")),
        }
    }
}

/// Sparse vector; entries sorted by index, weights non-negative.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureVector {
    pub entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    pub fn get(&self, index: u32) -> f64 {
        match self.entries.binary_search_by_key(&index, |e| e.0) {
            Ok(i) => self.entries[i].1,
            Err(_) => 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        let (mut i, mut j, mut s) = (0, 0, 0.0);
        let (a, b) = (&self.entries, &other.entries);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    s += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        s
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|e| e.1 * e.1).sum()
    }

    /// Scales to unit Euclidean length; the zero vector is left as is.
    pub fn l2_normalized(mut self) -> FeatureVector {
        let n = self.norm_sq().sqrt();
        if n > 0.0 {
            for e in &mut self.entries {
                e.1 /= n;
            }
        }
        self
    }

    pub fn to_line(&self) -> String {
        let mut s = String::new();
        for (k, (i, w)) in self.entries.iter().enumerate() {
            if k > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{i}:{w:?}");
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<FeatureVector, String> {
        let mut entries = Vec::new();
        for pair in line.split_whitespace() {
            let (i, w) = pair.split_once(':').ok_or_else(|| format!("bad pair `{pair}`"))?;
            let i: u32 = i.parse().map_err(|_| format!("bad index `{i}`"))?;
            let w: f64 = w.parse().map_err(|_| format!("bad weight `{w}`"))?;
            entries.push((i, w));
        }
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err("indices not strictly increasing".into());
        }
        Ok(FeatureVector { entries })
    }
}

/// Token to dense index map with document frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    df: Vec<u32>,
    n_docs: u32,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds the vocabulary of `docs`; indices follow lexicographic token order.
    pub fn fit<'a, I>(docs: I) -> Result<Vocabulary, FeatureError>
    where
        I: IntoIterator<Item = &'a TermCounts>,
    {
        let mut df: HashMap<&str, u32> = HashMap::new();
        let mut n = 0u32;
        for d in docs {
            n += 1;
            for (t, _) in &d.0 {
                *df.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        if n == 0 {
            return Err(FeatureError::EmptyCorpus);
        }
        let mut pairs: Vec<(&str, u32)> = df.into_iter().collect();
        pairs.sort_unstable();
        Ok(Vocabulary::from_parts(
            pairs.iter().map(|p| p.0.to_string()).collect(),
            pairs.iter().map(|p| p.1).collect(),
            n,
        ))
    }

    fn from_parts(tokens: Vec<String>, df: Vec<u32>, n_docs: u32) -> Vocabulary {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { tokens, df, n_docs, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_docs(&self) -> u32 {
        self.n_docs
    }

    pub fn index_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: u32) -> &str {
        &self.tokens[index as usize]
    }

    pub fn df(&self, index: u32) -> u32 {
        self.df[index as usize]
    }

    /// Smoothed inverse document frequency `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, index: u32) -> f64 {
        ((1.0 + self.n_docs as f64) / (1.0 + self.df(index) as f64)).ln() + 1.0
    }

    pub fn vectorize(&self, doc: &TermCounts, kind: FeatureKind, l2: bool) -> FeatureVector {
        let mut entries: Vec<(u32, f64)> = doc
            .0
            .iter()
            .filter_map(|(t, c)| {
                let i = self.index_of(t)?;
                let w = match kind {
                    FeatureKind::Tf => *c as f64,
                    FeatureKind::TfIdf => *c as f64 * self.idf(i),
                };
                Some((i, w))
            })
            .collect();
        entries.sort_unstable_by_key(|e| e.0);
        let v = FeatureVector { entries };
        if l2 {
            v.l2_normalized()
        } else {
            v
        }
    }

    /// `opdeob-vocab v1 <N>` header, then `index<TAB>token<TAB>df` per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("opdeob-vocab v1 {}\n", self.n_docs);
        for (i, (t, d)) in self.tokens.iter().zip(&self.df).enumerate() {
            let _ = writeln!(s, "{i}\t{t}\t{d}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Vocabulary, FeatureError> {
        let err = |line: usize, msg: &str| FeatureError::Format { line, msg: msg.to_string() };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "missing header"))?;
        let n_docs = header
            .strip_prefix("opdeob-vocab v1 ")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| err(1, "bad header"))?;
        let (mut tokens, mut df) = (Vec::new(), Vec::new());
        for (k, line) in lines.enumerate() {
            let no = k + 2;
            let mut parts = line.split('\t');
            let (Some(i), Some(t), Some(d), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(err(no, "expected index, token, df"));
            };
            if i.parse::<usize>().ok() != Some(tokens.len()) {
                return Err(err(no, "indices must be dense and ascending"));
            }
            tokens.push(t.to_string());
            df.push(d.parse().map_err(|_| err(no, "bad df"))?);
        }
        Ok(Vocabulary::from_parts(tokens, df, n_docs))
    }
}

/// Raw-count vector of `tokens` over `vocab`.
pub fn tf_vector<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> FeatureVector {
    vocab.vectorize(&TermCounts::from_tokens(tokens), FeatureKind::Tf, false)
}

pub fn tfidf_vector<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> FeatureVector {
    vocab.vectorize(&TermCounts::from_tokens(tokens), FeatureKind::TfIdf, false)
}

/// One vector per line in `index:weight` form.
pub fn vectors_to_text(vs: &[FeatureVector]) -> String {
    let mut s = String::new();
    for v in vs {
        s.push_str(&v.to_line());
        s.push('\n');
    }
    s
}

pub fn vectors_from_text(text: &str) -> Result<Vec<FeatureVector>, FeatureError> {
    text.lines()
        .enumerate()
        .map(|(i, l)| FeatureVector::parse_line(l).map_err(|msg| FeatureError::Format { line: i + 1, msg }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(docs: &[&str]) -> Vocabulary {
        let c: Vec<TermCounts> = docs.iter().map(|d| TermCounts::from_doc(d)).collect();
        Vocabulary::fit(&c).unwrap()
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("ExprId(id1, size=64)"), ["ExprId", "id1", "size", "64"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("a b\tc"), ["a", "b", "c"]);
    }

    #[test]
    fn tf_counts() {
        let v = vocab(&["a b"]);
        assert_eq!(tf_vector(&["a", "a", "b"], &v).entries, vec![(0, 2.0), (1, 1.0)]);
        assert!(tf_vector(&["z"], &v).is_empty());
        assert_eq!(tf_vector(&["a", "b", "a", "a", "b", "a"], &v).entries, vec![(0, 4.0), (1, 2.0)]);
    }

    #[test]
    fn idf_values() {
        let v = vocab(&["a b", "a", "a", "a"]);
        let a = v.index_of("a").unwrap();
        let b = v.index_of("b").unwrap();
        assert_eq!(v.idf(a), 1.0);
        assert!((v.idf(b) - (2.5f64.ln() + 1.0)).abs() < 1e-12);
        assert!(((2.5f64.ln() + 1.0) - 1.9163).abs() < 1e-4);
        assert_eq!(tfidf_vector(&["c"], &v).entries, vec![]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert_eq!(Vocabulary::fit(&[]), Err(FeatureError::EmptyCorpus));
    }

    #[test]
    fn text_round_trips() {
        let v = vocab(&["x y z", "y"]);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        let vs = vec![tfidf_vector(&["x", "y", "y"], &v), FeatureVector::default()];
        assert_eq!(vectors_from_text(&vectors_to_text(&vs)).unwrap(), vs);
        assert!(Vocabulary::from_text("nope").is_err());
    }

    #[test]
    fn l2_unit_length() {
        let v = vocab(&["a b"]);
        let x = v.vectorize(&TermCounts::from_tokens(&["a", "a", "b"]), FeatureKind::Tf, true);
        assert!((x.norm_sq() - 1.0).abs() < 1e-12);
    }
}
