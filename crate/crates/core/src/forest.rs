//! Random-forest classifier: bootstrap-aggregated CART trees grown greedily on
//! Gini impurity with a random feature subset per split.
//!
//! Every tree draws from its own RNG stream keyed by `(seed, tree index)`, so
//! parallel and serial training produce bitwise-identical forests.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::volume::write_atomic;

pub const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRule {
    Sqrt,
    All,
}

/// Number of candidate features drawn at each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeaturesPerSplit {
    Count(usize),
    Rule(SplitRule),
}

impl FeaturesPerSplit {
    pub fn resolve(self, n_features: usize) -> usize {
        match self {
            FeaturesPerSplit::Count(c) => c,
            FeaturesPerSplit::Rule(SplitRule::All) => n_features,
            FeaturesPerSplit::Rule(SplitRule::Sqrt) => {
                ((n_features as f64).sqrt().floor() as usize).max(1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Split levels below the root; a tree of depth 4 has leaves at depth <= 4.
    pub max_depth: usize,
    pub features_per_split: FeaturesPerSplit,
    pub min_samples_leaf: usize,
    /// Draw a same-size bootstrap sample per tree.
    #[serde(default = "default_true")]
    pub bootstrap: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 8,
            features_per_split: FeaturesPerSplit::Rule(SplitRule::Sqrt),
            min_samples_leaf: 1,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.n_trees == 0 || self.max_depth == 0 || self.min_samples_leaf == 0 {
            return Err(Error::invalid(
                "n_trees, max_depth and min_samples_leaf must be positive",
            ));
        }
        let m = self.features_per_split.resolve(n_features);
        if m == 0 || m > n_features {
            return Err(Error::invalid(format!(
                "features_per_split {m} not in 1..={n_features}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        counts: Vec<u32>,
    },
}

impl Node {
    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn leaves(&self) -> Vec<&[u32]> {
        match self {
            Node::Leaf { counts } => vec![counts.as_slice()],
            Node::Split { left, right, .. } => {
                let mut v = left.leaves();
                v.extend(right.leaves());
                v
            }
        }
    }

    #[inline]
    fn leaf_for(&self, x: &[f64]) -> &[u32] {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { counts } => return counts,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub version: u32,
    pub params: ForestParams,
    pub n_classes: usize,
    pub n_features: usize,
    pub trees: Vec<Node>,
}

/// Argmax with ties resolved to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate().skip(1) {
        if p > v[best] {
            best = i;
        }
    }
    best
}

pub fn train_forest(x: &[Vec<f64>], y: &[usize], params: &ForestParams) -> Result<Forest> {
    let n_classes = y.iter().copied().max().map_or(0, |m| m + 1);
    train_forest_with_classes(x, y, n_classes, params)
}

/// Trains with an explicit class count, so that absent classes still get a
/// (zero) probability slot.
pub fn train_forest_with_classes(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    params: &ForestParams,
) -> Result<Forest> {
    if x.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 samples, got {}",
            x.len()
        )));
    }
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let n_features = x[0].len();
    if n_features == 0 {
        return Err(Error::invalid("samples have no features"));
    }
    if let Some(row) = x.iter().find(|r| r.len() != n_features) {
        return Err(Error::invalid(format!(
            "ragged features: expected {n_features}, found a row of {}",
            row.len()
        )));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite feature value"));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::invalid(format!(
            "label {bad} outside 0..{n_classes}"
        )));
    }
    params.validate(n_features)?;
    let mtry = params.features_per_split.resolve(n_features);
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(params.seed, &[t as u64]);
            let n = x.len();
            let idx: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let builder = TreeBuilder {
                x,
                y,
                n_classes,
                n_features,
                mtry,
                params,
            };
            builder.grow(idx, 0, &mut rng)
        })
        .collect();
    Ok(Forest {
        version: FOREST_FORMAT_VERSION,
        params: params.clone(),
        n_classes,
        n_features,
        trees,
    })
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    n_classes: usize,
    n_features: usize,
    mtry: usize,
    params: &'a ForestParams,
}

struct Candidate {
    score: f64,
    feature: usize,
    threshold: f64,
}

impl Candidate {
    fn better_than(&self, other: &Option<Candidate>) -> bool {
        match other {
            None => true,
            Some(o) => {
                self.score < o.score
                    || (self.score == o.score
                        && (self.feature < o.feature
                            || (self.feature == o.feature && self.threshold < o.threshold)))
            }
        }
    }
}

/// `n * gini` for a class histogram with total `n`.
#[inline]
fn scaled_gini(counts: &[u32], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let sq: f64 = counts.iter().map(|&c| (c as f64) * (c as f64)).sum();
    n as f64 - sq / n as f64
}

impl TreeBuilder<'_> {
    fn histogram(&self, idx: &[usize]) -> Vec<u32> {
        let mut h = vec![0u32; self.n_classes];
        for &i in idx {
            h[self.y[i]] += 1;
        }
        h
    }

    fn grow(&self, idx: Vec<usize>, depth: usize, rng: &mut impl Rng) -> Node {
        let counts = self.histogram(&idx);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.params.max_depth || idx.len() < 2 * self.params.min_samples_leaf
        {
            return Node::Leaf { counts };
        }
        let Some(best) = self.best_split(&idx, rng) else {
            return Node::Leaf { counts };
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx
            .into_iter()
            .partition(|&i| self.x[i][best.feature] <= best.threshold);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    /// Evaluates `mtry` randomly drawn features, continuing past the budget
    /// until at least one feature admits a valid split.
    fn best_split(&self, idx: &[usize], rng: &mut impl Rng) -> Option<Candidate> {
        let mut features: Vec<usize> = (0..self.n_features).collect();
        features.shuffle(rng);
        let min_leaf = self.params.min_samples_leaf;
        let n = idx.len();
        let mut best: Option<Candidate> = None;
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
        for (visited, &f) in features.iter().enumerate() {
            if visited >= self.mtry && best.is_some() {
                break;
            }
            order.clear();
            order.extend(idx.iter().map(|&i| (self.x[i][f], self.y[i])));
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = vec![0u32; self.n_classes];
            let mut right = self.histogram(idx);
            for s in 0..n - 1 {
                let c = order[s].1;
                left[c] += 1;
                right[c] -= 1;
                let n_left = s + 1;
                if n_left < min_leaf || n - n_left < min_leaf {
                    continue;
                }
                let (a, b) = (order[s].0, order[s + 1].0);
                if a >= b {
                    continue;
                }
                let score = scaled_gini(&left, n_left as u32)
                    + scaled_gini(&right, (n - n_left) as u32);
                let mut threshold = 0.5 * (a + b);
                if threshold >= b {
                    threshold = a;
                }
                let cand = Candidate {
                    score,
                    feature: f,
                    threshold,
                };
                if cand.better_than(&best) {
                    best = Some(cand);
                }
            }
        }
        best
    }
}

impl Forest {
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(self.predict_proba_unchecked(x))
    }

    pub(crate) fn predict_proba_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.n_classes];
        for tree in &self.trees {
            let counts = tree.leaf_for(x);
            let total: u32 = counts.iter().sum();
            let inv = 1.0 / total as f64;
            for (acc, &c) in p.iter_mut().zip(counts) {
                *acc += c as f64 * inv;
            }
        }
        let inv = 1.0 / self.trees.len() as f64;
        p.iter_mut().for_each(|v| *v *= inv);
        p
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_proba(x)?))
    }

    /// Majority class by summed leaf probabilities; ties to the lowest class.
    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> usize {
        argmax(&self.predict_proba_unchecked(x))
    }

    pub fn max_tree_depth(&self) -> usize {
        self.trees.iter().map(Node::depth).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("forest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: Forest =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("forest JSON: {e}")))?;
        if f.version != FOREST_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported forest format version {}",
                f.version
            )));
        }
        if f.trees.is_empty() {
            return Err(Error::Config("forest has no trees".into()));
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Forest::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n_trees: usize, max_depth: usize) -> ForestParams {
        ForestParams {
            n_trees,
            max_depth,
            seed: 7,
            ..ForestParams::default()
        }
    }

    #[test]
    fn single_class_is_constant() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * 3 % 7) as f64]).collect();
        let y = vec![2usize; 20];
        let f = train_forest_with_classes(&x, &y, 3, &params(10, 4)).unwrap();
        for row in &x {
            assert_eq!(f.predict_proba(row).unwrap(), vec![0.0, 0.0, 1.0]);
        }
        for t in &f.trees {
            assert!(matches!(t, Node::Leaf { .. }));
        }
    }

    #[test]
    fn input_errors() {
        let p = params(2, 2);
        assert!(train_forest(&[], &[], &p).is_err());
        assert!(train_forest(&[vec![1.0]], &[0], &p).is_err());
        assert!(train_forest(&[vec![1.0], vec![1.0, 2.0]], &[0, 1], &p).is_err());
        assert!(train_forest(&[vec![1.0], vec![2.0]], &[0], &p).is_err());
        let bad = ForestParams {
            features_per_split: FeaturesPerSplit::Count(3),
            ..p.clone()
        };
        assert!(train_forest(&[vec![1.0], vec![2.0]], &[0, 1], &bad).is_err());
        let f = train_forest(&[vec![1.0], vec![2.0]], &[0, 1], &p).unwrap();
        assert!(f.predict_proba(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn pure_leaf_probability() {
        let f = Forest {
            version: FOREST_FORMAT_VERSION,
            params: params(1, 1),
            n_classes: 3,
            n_features: 1,
            trees: vec![Node::Leaf {
                counts: vec![0, 5, 0],
            }],
        };
        assert_eq!(f.predict_proba(&[0.3]).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn depth_limit_respected() {
        let x: Vec<Vec<f64>> = (0..200)
            .map(|i| vec![(i * 37 % 101) as f64, (i * 53 % 97) as f64])
            .collect();
        let y: Vec<usize> = (0..200).map(|i| (i * 7 % 3) as usize).collect();
        for d in [1, 2, 4] {
            let f = train_forest(&x, &y, &params(5, d)).unwrap();
            assert!(f.max_tree_depth() <= d);
            for t in &f.trees {
                for leaf in t.leaves() {
                    assert!(leaf.iter().sum::<u32>() > 0);
                }
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 * 0.1]).collect();
        let y: Vec<usize> = (0..30).map(|i| (i >= 15) as usize).collect();
        let f = train_forest(&x, &y, &params(3, 3)).unwrap();
        let back = Forest::from_json(&f.to_json()).unwrap();
        assert_eq!(back, f);
        let mut v: serde_json::Value = serde_json::from_str(&f.to_json()).unwrap();
        v["version"] = serde_json::json!(99);
        assert!(Forest::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn split_rule_serialization() {
        let s = serde_json::to_string(&FeaturesPerSplit::Rule(SplitRule::Sqrt)).unwrap();
        assert_eq!(s, "\"sqrt\"");
        let c: FeaturesPerSplit = serde_json::from_str("3").unwrap();
        assert_eq!(c, FeaturesPerSplit::Count(3));
        assert_eq!(FeaturesPerSplit::Rule(SplitRule::Sqrt).resolve(10), 3);
        assert_eq!(FeaturesPerSplit::Rule(SplitRule::Sqrt).resolve(1), 1);
    }
}
