//! Slice-to-case aggregation: the rule criterion, run-length features, case
//! forests, ensembles, threshold tuning, two-step classification and
//! embedding matrices.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{argmax, train_forest_with_classes, FeaturesPerSplit, Forest, ForestParams, SplitRule};
use crate::grader::augment::apply_affine;
use crate::grader::{AugmentParams, SliceCnn};
use crate::image::Image;
use crate::rng;
use crate::volume::write_atomic;

pub const ENSEMBLE_SIZE: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseGrade {
    Healthy = 0,
    Suspicious = 1,
    Sick = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TwoClassGrade {
    Healthy = 0,
    Unhealthy = 1,
}

impl CaseGrade {
    pub const ALL: [CaseGrade; 3] = [CaseGrade::Healthy, CaseGrade::Suspicious, CaseGrade::Sick];

    pub fn from_index(i: usize) -> Result<Self> {
        CaseGrade::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("case class {i} outside 0..3")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn two_class(self) -> TwoClassGrade {
        match self {
            CaseGrade::Healthy => TwoClassGrade::Healthy,
            _ => TwoClassGrade::Unhealthy,
        }
    }
}

impl TwoClassGrade {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleParams {
    /// Sick when at least this many slices have grade 4.
    pub grade4_count: usize,
    /// Sick when a run of grade-3 slices reaches this length.
    pub grade3_run: usize,
    /// Suspicious when grade-2 slices make up at least this fraction of k.
    pub grade2_fraction: f64,
}

impl Default for RuleParams {
    fn default() -> Self {
        RuleParams {
            grade4_count: 2,
            grade3_run: 3,
            grade2_fraction: 0.30,
        }
    }
}

pub fn rule_case_grade(sgv: &[u8]) -> Result<CaseGrade> {
    rule_case_grade_with(sgv, &RuleParams::default())
}

pub fn rule_case_grade_with(sgv: &[u8], p: &RuleParams) -> Result<CaseGrade> {
    if sgv.is_empty() {
        return Err(Error::invalid("empty slice-grade vector"));
    }
    if let Some(g) = sgv.iter().find(|&&g| g > 4) {
        return Err(Error::invalid(format!("slice grade {g} outside 0..=4")));
    }
    let count = |g: u8| sgv.iter().filter(|&&v| v == g).count();
    let longest3 = runs(sgv).filter(|r| r.0 == 3).map(|r| r.1).max().unwrap_or(0);
    if count(4) >= p.grade4_count || longest3 >= p.grade3_run {
        return Ok(CaseGrade::Sick);
    }
    if count(2) as f64 >= p.grade2_fraction * sgv.len() as f64 {
        return Ok(CaseGrade::Suspicious);
    }
    Ok(CaseGrade::Healthy)
}

/// Maximal runs as (value, length), in order.
fn runs<T: PartialEq + Copy>(v: &[T]) -> impl Iterator<Item = (T, usize)> + '_ {
    v.chunk_by(|a, b| a == b).map(|c| (c[0], c.len()))
}

/// Per class: (longest run, second-longest run), zero when absent.
pub fn runlength_features(sgv: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    if sgv.is_empty() {
        return Err(Error::invalid("empty slice-grade vector"));
    }
    let mut top = vec![[0usize; 2]; n_classes];
    for (g, len) in runs(sgv) {
        let t = top
            .get_mut(g)
            .ok_or_else(|| Error::invalid(format!("slice class {g} outside 0..{n_classes}")))?;
        if len > t[0] {
            t[1] = t[0];
            t[0] = len;
        } else if len > t[1] {
            t[1] = len;
        }
    }
    Ok(top.iter().flat_map(|t| [t[0] as f64, t[1] as f64]).collect())
}

/// One joint's ordered rectangles with its case label.
#[derive(Debug, Clone)]
pub struct CaseRects {
    pub id: String,
    pub rects: Vec<Image>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub case: String,
    /// 0 is the unaugmented vector; 1..=n_aug are augmentation rounds.
    pub round: usize,
    pub k: usize,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn features(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.features.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn to_csv(&self) -> String {
        let width = self.rows.first().map_or(0, |r| r.features.len());
        let mut s = String::from("case,round,k");
        for i in 0..width {
            let _ = write!(s, ",f{i}");
        }
        s.push_str(",label\n");
        for r in &self.rows {
            let _ = write!(s, "{},{},{}", r.case, r.round, r.k);
            for f in &r.features {
                let _ = write!(s, ",{f}");
            }
            let _ = writeln!(s, ",{}", r.label);
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Slice classes (argmax) for an ordered set of rectangles.
pub fn slice_classes(grader: &SliceCnn, rects: &[&Image]) -> Result<Vec<usize>> {
    if !grader.trained {
        return Err(Error::Untrained("slice grader"));
    }
    Ok(grader.classify_batch(rects))
}

pub fn case_features(grader: &SliceCnn, rects: &[&Image]) -> Result<Vec<f64>> {
    let classes = slice_classes(grader, rects)?;
    runlength_features(&classes, grader.num_classes())
}

/// Feature rows for every case: the unaugmented vector plus `n_aug` rounds
/// in which every slice of the case shares one augmentation draw.
pub fn build_case_training_set(
    cases: &[CaseRects],
    grader: &SliceCnn,
    n_aug: usize,
    aug: &AugmentParams,
    seed: u64,
) -> Result<FeatureTable> {
    if !grader.trained {
        return Err(Error::Untrained("slice grader"));
    }
    let m = grader.num_classes();
    let per_case: Vec<Vec<FeatureRow>> = cases
        .par_iter()
        .map(|case| {
            if case.rects.is_empty() {
                return Err(Error::invalid(format!("case {} has no rectangles", case.id)));
            }
            (0..=n_aug)
                .map(|round| {
                    let imgs: Vec<Image> = if round == 0 || aug.is_identity() {
                        case.rects.clone()
                    } else {
                        let mut r = rng::stream(seed, &[rng::key_of(&case.id), round as u64]);
                        let d = aug.draw(&mut r);
                        case.rects.iter().map(|img| apply_affine(img, &d, aug.fill)).collect()
                    };
                    let refs: Vec<&Image> = imgs.iter().collect();
                    let classes = grader.classify_batch(&refs);
                    Ok(FeatureRow {
                        case: case.id.clone(),
                        round,
                        k: classes.len(),
                        features: runlength_features(&classes, m)?,
                        label: case.label,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(FeatureTable {
        rows: per_case.into_iter().flatten().collect(),
    })
}

pub fn case_forest_params(seed: u64) -> ForestParams {
    ForestParams {
        n_trees: 500,
        max_depth: 4,
        features_per_split: FeaturesPerSplit::Rule(SplitRule::Sqrt),
        min_samples_leaf: 1,
        bootstrap: true,
        seed,
    }
}

pub fn train_case_rf(features: &[Vec<f64>], labels: &[usize], n_classes: usize, params: &ForestParams) -> Result<Forest> {
    train_forest_with_classes(features, labels, n_classes, params)
}

/// Sum of the six forests' probability vectors and its argmax (ties → lower
/// class).
pub fn ensemble_predict(forests: &[Forest], x: &[f64]) -> Result<(usize, Vec<f64>)> {
    if forests.len() != ENSEMBLE_SIZE {
        return Err(Error::invalid(format!(
            "ensemble needs exactly {ENSEMBLE_SIZE} forests, got {}",
            forests.len()
        )));
    }
    let n = forests[0].n_classes;
    if forests.iter().any(|f| f.n_classes != n) {
        return Err(Error::invalid("ensemble forests disagree on the number of classes"));
    }
    let mut sum = vec![0.0; n];
    for f in forests {
        for (s, p) in sum.iter_mut().zip(f.predict_proba(x)?) {
            *s += p;
        }
    }
    Ok((argmax(&sum), sum))
}

fn check_probs(p: &[f64], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: p.len() });
    }
    if p.iter().any(|v| !(0.0..=1.0 + 1e-9).contains(v)) {
        return Err(Error::invalid("probabilities must lie in [0, 1]"));
    }
    Ok(())
}

/// Unhealthy iff P(unhealthy) > τ.
pub fn threshold_two_class(probs: &[f64], tau: f64) -> Result<TwoClassGrade> {
    check_probs(probs, 2)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("τ = {tau} outside [0, 1]")));
    }
    Ok(if probs[1] > tau {
        TwoClassGrade::Unhealthy
    } else {
        TwoClassGrade::Healthy
    })
}

/// Suspicious iff P(suspicious) > α; else sick iff P(sick) − P(healthy) > β.
pub fn threshold_three_class(probs: &[f64], alpha: f64, beta: f64) -> Result<CaseGrade> {
    check_probs(probs, 3)?;
    if !(0.0..=1.0).contains(&alpha) || !(-1.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("(α, β) = ({alpha}, {beta}) outside [0,1]×[-1,1]")));
    }
    Ok(if probs[1] > alpha {
        CaseGrade::Suspicious
    } else if probs[2] - probs[0] > beta {
        CaseGrade::Sick
    } else {
        CaseGrade::Healthy
    })
}

/// Healthy vs unhealthy first; unhealthy cases go to a {suspicious, sick}
/// forest (class 0 = suspicious, 1 = sick).
pub fn two_step_predict(binary: &Forest, stage_two: &Forest, x: &[f64]) -> Result<CaseGrade> {
    if binary.n_classes != 2 || stage_two.n_classes != 2 {
        return Err(Error::invalid("two-step prediction needs two 2-class forests"));
    }
    if argmax(&binary.predict_proba(x)?) == 0 {
        return Ok(CaseGrade::Healthy);
    }
    Ok(if argmax(&stage_two.predict_proba(x)?) == 0 {
        CaseGrade::Suspicious
    } else {
        CaseGrade::Sick
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepModel {
    pub binary: Forest,
    pub stage_two: Forest,
}

/// Trains the binary forest on all cases and the stage-two forest on the
/// unhealthy ones.
pub fn train_two_step(features: &[Vec<f64>], labels3: &[usize], params: &ForestParams) -> Result<TwoStepModel> {
    let binary_labels: Vec<usize> = labels3.iter().map(|&l| usize::from(l > 0)).collect();
    let binary = train_forest_with_classes(features, &binary_labels, 2, params)?;
    let (x2, y2): (Vec<Vec<f64>>, Vec<usize>) = features
        .iter()
        .zip(labels3)
        .filter(|(_, &l)| l > 0)
        .map(|(f, &l)| (f.clone(), l - 1))
        .unzip();
    if x2.len() < 2 {
        return Err(Error::invalid("stage two needs at least two unhealthy cases"));
    }
    let stage_two = train_forest_with_classes(&x2, &y2, 2, &ForestParams {
        seed: rng::derive_seed(params.seed, &[rng::key_of("stage-two")]),
        ..params.clone()
    })?;
    Ok(TwoStepModel { binary, stage_two })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    /// K rows of m values; rows at and beyond `k` are zero.
    pub rows: Vec<Vec<f64>>,
    pub k: usize,
}

impl EmbeddingMatrix {
    pub fn flatten(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

pub const DEFAULT_SLICE_BUDGET: usize = 40;

pub fn embedding_matrix(grader: &SliceCnn, rects: &[&Image], budget: usize) -> Result<EmbeddingMatrix> {
    if rects.len() > budget {
        return Err(Error::invalid(format!("{} slices exceed the budget of {budget}", rects.len())));
    }
    if !grader.trained {
        return Err(Error::Untrained("slice grader"));
    }
    let mut rows = grader.embed_batch(rects);
    rows.resize(budget, vec![0.0; grader.num_classes()]);
    Ok(EmbeddingMatrix { rows, k: rects.len() })
}

pub fn one_hot_binarize(m: &EmbeddingMatrix) -> EmbeddingMatrix {
    let rows = m
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut out = vec![0.0; r.len()];
            if i < m.k && !r.is_empty() {
                out[argmax(r)] = 1.0;
            }
            out
        })
        .collect();
    EmbeddingMatrix { rows, k: m.k }
}

/// Recipe for the case forest trained inside [`alternate_train`].
#[derive(Debug, Clone)]
pub struct CaseRecipe {
    pub forest: ForestParams,
    pub n_classes: usize,
    pub n_aug: usize,
    pub aug: AugmentParams,
    pub seed: u64,
}

pub struct AlternateOutcome {
    pub grader: SliceCnn,
    pub forest: Forest,
    pub val_accuracies: Vec<f64>,
    pub train_losses: Vec<f64>,
    pub best_epoch: usize,
}

pub fn case_accuracy(forest: &Forest, grader: &SliceCnn, cases: &[CaseRects]) -> Result<f64> {
    let correct = cases
        .iter()
        .map(|c| {
            let refs: Vec<&Image> = c.rects.iter().collect();
            Ok(usize::from(forest.predict(&case_features(grader, &refs)?)? == c.label))
        })
        .sum::<Result<usize>>()?;
    Ok(correct as f64 / cases.len() as f64)
}

/// Alternates one slice-grader epoch with case-forest retraining and keeps the
/// pair with the best validation case accuracy (ties → earliest epoch).
#[allow(clippy::too_many_arguments)]
pub fn alternate_train(
    mut grader: SliceCnn,
    slice_images: &[&Image],
    slice_labels: &[usize],
    slice_aug: &AugmentParams,
    recipe: &CaseRecipe,
    train: &[CaseRects],
    val: &[CaseRects],
    max_epochs: usize,
) -> Result<AlternateOutcome> {
    if train.is_empty() || val.is_empty() || slice_images.is_empty() {
        return Err(Error::invalid("alternating training needs non-empty train and validation sets"));
    }
    if max_epochs == 0 {
        return Err(Error::invalid("max_epochs must be positive"));
    }
    if train.iter().any(|t| val.iter().any(|v| v.id == t.id)) {
        return Err(Error::invalid("train and validation cases overlap"));
    }
    let mut opt = crate::nn::Sgd::new(grader.config.learning_rate, grader.config.momentum);
    let mut best: Option<(f64, usize, SliceCnn, Forest)> = None;
    let mut val_accuracies = Vec::with_capacity(max_epochs);
    let mut train_losses = Vec::with_capacity(max_epochs);
    for epoch in 0..max_epochs {
        train_losses.push(grader.train_epoch(slice_images, slice_labels, slice_aug, &mut opt, epoch)?);
        let table = build_case_training_set(train, &grader, recipe.n_aug, &recipe.aug, rng::derive_seed(recipe.seed, &[epoch as u64]))?;
        let forest = train_case_rf(&table.features(), &table.labels(), recipe.n_classes, &recipe.forest)?;
        let acc = case_accuracy(&forest, &grader, val)?;
        val_accuracies.push(acc);
        if best.as_ref().is_none_or(|b| acc > b.0) {
            best = Some((acc, epoch, grader.clone(), forest));
        }
    }
    let (_, best_epoch, grader, forest) = best.expect("at least one epoch");
    Ok(AlternateOutcome {
        grader,
        forest,
        val_accuracies,
        train_losses,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digits(s: &str) -> Vec<u8> {
        s.bytes().map(|b| b - b'0').collect()
    }

    #[test]
    fn worked_example_runs() {
        let v: Vec<usize> = digits("01123333322310").iter().map(|&g| g as usize).collect();
        assert_eq!(
            runlength_features(&v, 5).unwrap(),
            vec![1.0, 1.0, 2.0, 1.0, 2.0, 1.0, 5.0, 1.0, 0.0, 0.0]
        );
        assert_eq!(runlength_features(&[0, 0, 0], 5).unwrap()[..2], [3.0, 0.0]);
        assert!(runlength_features(&[], 5).is_err());
        assert!(runlength_features(&[5], 5).is_err());
    }

    #[test]
    fn rule_examples() {
        assert_eq!(rule_case_grade(&[0; 10]).unwrap(), CaseGrade::Healthy);
        assert_eq!(rule_case_grade(&digits("01123333322310")).unwrap(), CaseGrade::Sick);
        assert_eq!(rule_case_grade(&digits("2220000000")).unwrap(), CaseGrade::Suspicious);
        assert_eq!(rule_case_grade(&digits("0004000000")).unwrap(), CaseGrade::Healthy);
        assert_eq!(rule_case_grade(&digits("0004000400")).unwrap(), CaseGrade::Sick);
        assert_eq!(rule_case_grade(&digits("0333000000")).unwrap(), CaseGrade::Sick);
        assert_eq!(rule_case_grade(&digits("0330300000")).unwrap(), CaseGrade::Healthy);
        assert!(rule_case_grade(&[]).is_err());
    }

    #[test]
    fn two_class_view() {
        assert_eq!(CaseGrade::Healthy.two_class(), TwoClassGrade::Healthy);
        assert_eq!(CaseGrade::Suspicious.two_class(), TwoClassGrade::Unhealthy);
        assert_eq!(CaseGrade::Sick.two_class(), TwoClassGrade::Unhealthy);
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold_two_class(&[0.5, 0.5], 0.42).unwrap(), TwoClassGrade::Unhealthy);
        assert_eq!(threshold_two_class(&[0.0, 1.0], 1.0).unwrap(), TwoClassGrade::Healthy);
        assert!(threshold_two_class(&[0.5, 0.5], 1.5).is_err());
        assert_eq!(threshold_three_class(&[0.2, 0.5, 0.3], 0.14, 0.0).unwrap(), CaseGrade::Suspicious);
        assert_eq!(threshold_three_class(&[0.9, 0.1, 0.0], 1.0, -1.0).unwrap(), CaseGrade::Sick);
        assert_eq!(threshold_three_class(&[0.0, 0.0, 1.0], 1.0, 1.0).unwrap(), CaseGrade::Healthy);
        assert!(threshold_three_class(&[0.2, 0.5, 0.3], 0.1, 1.5).is_err());
    }

    #[test]
    fn one_hot_rows() {
        let m = EmbeddingMatrix {
            rows: vec![vec![0.2, 0.9, 0.1], vec![0.5, 0.5, 0.0], vec![0.0; 3]],
            k: 2,
        };
        let b = one_hot_binarize(&m);
        assert_eq!(b.rows, vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0; 3]]);
        assert_eq!(one_hot_binarize(&b), b);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let t = FeatureTable {
            rows: vec![FeatureRow { case: "a".into(), round: 0, k: 3, features: vec![3.0, 0.0], label: 1 }],
        };
        assert_eq!(t.to_csv(), "case,round,k,f0,f1,label\na,0,3,3,0,1\n");
    }
}
