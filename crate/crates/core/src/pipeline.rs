//! End-to-end orchestration: configuration, cohort manifests, model
//! persistence, training, grading of single volumes and cohort evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case::{
    alternate_train, build_case_training_set, case_forest_params, ensemble_predict, rule_case_grade_with,
    runlength_features, threshold_three_class, threshold_two_class, train_case_rf, train_two_step, two_step_predict,
    CaseGrade, CaseRecipe, CaseRects, RuleParams, TwoClassGrade, TwoStepModel, ENSEMBLE_SIZE,
};
use crate::error::{Error, Result, Stage, StageExt};
use crate::eval::{classification_report, kfold_split, rect_overlap, roc_auc, ClassificationReport, Rect, RocCurve};
use crate::forest::{argmax, train_forest_with_classes, FeaturesPerSplit, Forest, ForestParams, SplitRule};
use crate::grader::augment::AugmentParams;
use crate::grader::{build_slice_cnn, load_slice_cnn, map_grade, save_slice_cnn, CnnConfig, GroupingScheme, SliceCnn};
use crate::image::Image;
use crate::morphology::{adaptive_skeleton_segment_with, SkeletonParams};
use crate::nn::Adam;
use crate::phantom::{PhantomCase, PhantomDiagnostics};
use crate::rng;
use crate::roi::unet::{load_unet, save_unet, UNet, UNetClassifier, UNetConfig, UNetPatch};
use crate::roi::{
    compute_pelvis_roi, extract_half_slice_rects, feature_rows, initial_sij_mask_in_window, locate_coccyx,
    normalize_hu, posterior_centroid, rect_pixels, refine_sij_mask, side_centroids, skeleton_window, CoccyxSource,
    PelvisRoi, RectSample, RoiParams, Side, Window,
};
use crate::volume::{self, load_mask, load_volume, save_mask, save_volume, BinaryMask, CtVolume};

pub const MODELS_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoxelTrainingParams {
    /// Fraction of patches centered near a labeled joint voxel.
    pub positive_fraction: f64,
    /// Uniform jitter of positive patch centers (mm).
    pub jitter_mm: f64,
}

impl Default for VoxelTrainingParams {
    fn default() -> Self {
        VoxelTrainingParams {
            positive_fraction: 0.5,
            jitter_mm: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementParams {
    pub forest: ForestParams,
    /// Training voxels drawn per case from initial ∪ ground truth.
    pub samples_per_case: usize,
}

impl Default for RefinementParams {
    fn default() -> Self {
        RefinementParams {
            forest: ForestParams {
                n_trees: 4,
                max_depth: 12,
                features_per_split: FeaturesPerSplit::Rule(SplitRule::Sqrt),
                min_samples_leaf: 1,
                bootstrap: true,
                seed: 0,
            },
            samples_per_case: 6000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseParams {
    pub forest: ForestParams,
    pub n_aug: usize,
    pub rule: RuleParams,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Grade with the six-forest ensemble instead of the single forest.
    pub ensemble: bool,
}

impl Default for CaseParams {
    fn default() -> Self {
        CaseParams {
            forest: case_forest_params(0),
            n_aug: 20,
            rule: RuleParams::default(),
            tau: 0.42,
            alpha: 0.14,
            beta: 0.0,
            ensemble: true,
        }
    }
}

/// Case-level partition. Explicit index lists take precedence over fractions;
/// with explicit lists, unlisted cases go to `test`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitParams {
    pub fractions: [f64; 3],
    pub train: Option<Vec<usize>>,
    pub val: Option<Vec<usize>>,
    pub test: Option<Vec<usize>>,
}

impl Default for SplitParams {
    fn default() -> Self {
        SplitParams {
            fractions: [0.75, 0.12, 0.13],
            train: None,
            val: None,
            test: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    /// τ sweep runs over `0, 1/steps, …, 1`.
    pub tau_steps: usize,
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            tau_steps: 100,
            alpha_grid: vec![0.0, 0.1, 0.14, 0.2, 0.3, 0.4, 0.5],
            beta_grid: vec![-0.2, -0.1, 0.0, 0.1, 0.2],
        }
    }
}

/// Every tunable constant of the pipeline. Component seeds are derived from
/// `seed`; the `seed` fields inside sections are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub skeleton: SkeletonParams,
    pub roi: RoiParams,
    pub unet: UNetConfig,
    pub unet_augment: AugmentParams,
    pub voxel_training: VoxelTrainingParams,
    pub refinement: RefinementParams,
    pub grader: CnnConfig,
    pub grader_augment: AugmentParams,
    pub case: CaseParams,
    pub split: SplitParams,
    pub eval: EvalParams,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            skeleton: SkeletonParams::default(),
            roi: RoiParams::default(),
            unet: UNetConfig::default(),
            unet_augment: AugmentParams::roi_classifier(),
            voxel_training: VoxelTrainingParams::default(),
            refinement: RefinementParams::default(),
            grader: CnnConfig::default(),
            grader_augment: AugmentParams::slice_grading(),
            case: CaseParams::default(),
            split: SplitParams::default(),
            eval: EvalParams::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        volume::write_atomic(path, self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.grader.validate().map_err(|e| Error::Config(format!("[grader] {e}")))?;
        if (self.grader.input_rows, self.grader.input_cols) != (self.roi.rect_rows, self.roi.rect_cols) {
            return bad("[grader] input size must equal the ROI rectangle size".into());
        }
        if self.grader.epochs == 0 || self.unet.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.roi.posterior_fraction) || self.roi.posterior_fraction == 0.0 {
            return bad("[roi] posterior_fraction must be in (0, 1]".into());
        }
        Thresholds {
            tau: self.case.tau,
            alpha: self.case.alpha,
            beta: self.case.beta,
        }
        .validate()
        .map_err(|e| Error::Config(format!("[case] {e}")))?;
        let f = self.split.fractions;
        if f.iter().any(|&p| p < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad("[split] fractions must be non-negative and sum to 1".into());
        }
        if self.eval.tau_steps == 0 {
            return bad("[eval] tau_steps must be positive".into());
        }
        Ok(())
    }

    /// Replaces the master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn sub_seed(&self, key: &str) -> u64 {
        rng::derive_seed(self.seed, &[rng::key_of(key)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid(format!("τ = {} outside [0, 1]", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(-1.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("(α, β) = ({}, {}) outside [0,1]×[-1,1]", self.alpha, self.beta)));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Cohorts
// ---------------------------------------------------------------------------

/// A volume with ground-truth joint labels and slice grades.
#[derive(Debug, Clone)]
pub struct LabeledCase {
    pub id: String,
    pub volume: CtVolume,
    pub labels: BinaryMask,
    pub left_grades: Vec<u8>,
    pub right_grades: Vec<u8>,
    /// Slice index of the first entry of the grade vectors.
    pub first_joint_slice: usize,
}

impl LabeledCase {
    pub fn grades(&self, side: Side) -> &[u8] {
        match side {
            Side::Left => &self.left_grades,
            Side::Right => &self.right_grades,
        }
    }

    pub fn slice_grade(&self, side: Side, z: usize) -> Option<u8> {
        z.checked_sub(self.first_joint_slice)
            .and_then(|i| self.grades(side).get(i).copied())
    }

    pub fn case_grade(&self, side: Side, rule: &RuleParams) -> Result<CaseGrade> {
        rule_case_grade_with(self.grades(side), rule)
    }
}

impl From<PhantomCase> for LabeledCase {
    fn from(c: PhantomCase) -> Self {
        LabeledCase {
            first_joint_slice: c.spec.joint_start,
            id: c.id,
            volume: c.volume,
            labels: c.labels,
            left_grades: c.left_grades,
            right_grades: c.right_grades,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub volume: PathBuf,
    pub labels: PathBuf,
    pub first_joint_slice: usize,
    pub left_grades: Vec<u8>,
    pub right_grades: Vec<u8>,
    pub left_case: CaseGrade,
    pub right_case: CaseGrade,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<PhantomDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub version: u32,
    pub cases: Vec<ManifestEntry>,
}

impl CohortManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: CohortManifest = serde_json::from_slice(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.cases {
            if e.volume.is_relative() {
                e.volume = base.join(&e.volume);
            }
            if e.labels.is_relative() {
                e.labels = base.join(&e.labels);
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        volume::write_atomic(path, &serde_json::to_vec_pretty(self).expect("manifest serializes"))
    }

    /// A manifest with the selected cases, paths made absolute.
    pub fn subset(&self, indices: &[usize]) -> CohortManifest {
        let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        CohortManifest {
            version: self.version,
            cases: indices
                .iter()
                .map(|&i| {
                    let mut e = self.cases[i].clone();
                    e.volume = abs(&e.volume);
                    e.labels = abs(&e.labels);
                    e
                })
                .collect(),
        }
    }
}

pub fn load_case(e: &ManifestEntry) -> Result<LabeledCase> {
    let volume = load_volume(&e.volume)?;
    let labels = load_mask(&e.labels)?;
    volume.grid().check_compatible(labels.grid())?;
    Ok(LabeledCase {
        id: e.id.clone(),
        volume,
        labels,
        left_grades: e.left_grades.clone(),
        right_grades: e.right_grades.clone(),
        first_joint_slice: e.first_joint_slice,
    })
}

pub fn load_cohort(m: &CohortManifest) -> Result<Vec<LabeledCase>> {
    m.cases.iter().map(load_case).collect()
}

/// Writes every case as `<id>.json/.raw` plus `<id>_labels.json/.raw` and a
/// `cohort.json` manifest in `dir`.
pub fn save_cohort(cases: &[PhantomCase], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(cases.len());
    for c in cases {
        let vol = PathBuf::from(format!("{}.json", c.id));
        let lab = PathBuf::from(format!("{}_labels.json", c.id));
        save_volume(&c.volume, &dir.join(&vol))?;
        save_mask(&c.labels, &dir.join(&lab))?;
        entries.push(ManifestEntry {
            id: c.id.clone(),
            volume: vol,
            labels: lab,
            first_joint_slice: c.spec.joint_start,
            left_grades: c.left_grades.clone(),
            right_grades: c.right_grades.clone(),
            left_case: c.left_case,
            right_case: c.right_case,
            diagnostics: Some(c.diagnostics.clone()),
        });
    }
    let path = dir.join("cohort.json");
    CohortManifest {
        version: 1,
        cases: entries,
    }
    .save(&path)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn resolve_split(n: usize, p: &SplitParams, seed: u64) -> Result<Split> {
    if let (Some(train), Some(val)) = (&p.train, &p.val) {
        let mut seen = vec![None::<&str>; n];
        let test: Vec<usize> = match &p.test {
            Some(t) => t.clone(),
            None => (0..n).filter(|i| !train.contains(i) && !val.contains(i)).collect(),
        };
        for (name, list) in [("train", train), ("val", val), ("test", &test)] {
            for &i in list {
                if i >= n {
                    return Err(Error::Config(format!("split index {i} outside 0..{n}")));
                }
                if let Some(prev) = seen[i] {
                    return Err(Error::Config(format!("case {i} appears in both {prev} and {name}")));
                }
                seen[i] = Some(name);
            }
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("train and val splits must be non-empty".into()));
        }
        return Ok(Split {
            train: train.clone(),
            val: val.clone(),
            test,
        });
    }
    if p.train.is_some() || p.val.is_some() || p.test.is_some() {
        return Err(Error::Config("explicit splits need both train and val lists".into()));
    }
    let n_val = (p.fractions[1] * n as f64).round() as usize;
    let n_test = (p.fractions[2] * n as f64).round() as usize;
    if n_val == 0 || n_val + n_test >= n {
        return Err(Error::Config(format!("cannot split {n} cases with fractions {:?}", p.fractions)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::key_of("split")]));
    let mut test = idx[..n_test].to_vec();
    let mut val = idx[n_test..n_test + n_val].to_vec();
    let mut train = idx[n_test + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

pub struct PipelineModels {
    pub config: Config,
    pub unet: UNetClassifier,
    pub refinement: Forest,
    pub grader: SliceCnn,
    /// Three-class case forest selected by alternating training.
    pub case3: Forest,
    /// Healthy (0) vs unhealthy (1).
    pub case2: Forest,
    pub two_step: TwoStepModel,
    /// Empty when the ensemble is disabled.
    pub ensemble: Vec<Forest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelsIndex {
    version: u32,
    scheme: GroupingScheme,
    ensemble_size: usize,
}

impl PipelineModels {
    pub fn scheme(&self) -> GroupingScheme {
        GroupingScheme::from_classes(self.grader.num_classes()).expect("grader class count validated")
    }

    pub fn check(&self) -> Result<()> {
        let m = self.grader.num_classes();
        GroupingScheme::from_classes(m)?;
        let width = 2 * m;
        let bad = |what: &str| Err(Error::invalid(format!("model set inconsistent: {what}")));
        if !self.unet.trained || !self.grader.trained {
            return Err(Error::Untrained("pipeline models"));
        }
        if self.case3.n_classes != 3 || self.case3.n_features != width {
            return bad("three-class case forest");
        }
        if self.case2.n_classes != 2 || self.case2.n_features != width {
            return bad("two-class case forest");
        }
        if self.two_step.binary.n_features != width || self.two_step.stage_two.n_features != width {
            return bad("two-step forests");
        }
        if !self.ensemble.is_empty()
            && (self.ensemble.len() != ENSEMBLE_SIZE
                || self.ensemble.iter().any(|f| f.n_classes != 3 || f.n_features != width))
        {
            return bad("ensemble members");
        }
        if self.config.case.ensemble && self.ensemble.is_empty() {
            return bad("ensemble enabled but absent");
        }
        Ok(())
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        self.check()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.config.save(&dir.join("config.toml"))?;
        save_unet(&mut self.unet, &dir.join("unet.bin"))?;
        save_slice_cnn(&mut self.grader, &dir.join("grader.bin"))?;
        self.refinement.save(&dir.join("refinement.json"))?;
        self.case3.save(&dir.join("case3.json"))?;
        self.case2.save(&dir.join("case2.json"))?;
        self.two_step.binary.save(&dir.join("two_step_binary.json"))?;
        self.two_step.stage_two.save(&dir.join("two_step_stage_two.json"))?;
        for (i, f) in self.ensemble.iter().enumerate() {
            f.save(&dir.join(format!("ensemble_{i}.json")))?;
        }
        let index = ModelsIndex {
            version: MODELS_VERSION,
            scheme: self.scheme(),
            ensemble_size: self.ensemble.len(),
        };
        volume::write_atomic(&dir.join("models.json"), &serde_json::to_vec_pretty(&index).expect("index serializes"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ip = dir.join("models.json");
        let text = std::fs::read(&ip).map_err(|e| Error::io(&ip, e))?;
        let index: ModelsIndex = serde_json::from_slice(&text).map_err(|e| Error::format(&ip, e.to_string()))?;
        if index.version != MODELS_VERSION {
            return Err(Error::format(&ip, format!("unsupported models version {}", index.version)));
        }
        let models = PipelineModels {
            config: Config::load(&dir.join("config.toml"))?,
            unet: load_unet(&dir.join("unet.bin"))?,
            grader: load_slice_cnn(&dir.join("grader.bin"))?,
            refinement: Forest::load(&dir.join("refinement.json"))?,
            case3: Forest::load(&dir.join("case3.json"))?,
            case2: Forest::load(&dir.join("case2.json"))?,
            two_step: TwoStepModel {
                binary: Forest::load(&dir.join("two_step_binary.json"))?,
                stage_two: Forest::load(&dir.join("two_step_stage_two.json"))?,
            },
            ensemble: (0..index.ensemble_size)
                .map(|i| Forest::load(&dir.join(format!("ensemble_{i}.json"))))
                .collect::<Result<_>>()?,
        };
        if models.scheme() != index.scheme {
            return Err(Error::format(&ip, "grader scheme differs from the models index"));
        }
        models.check()?;
        Ok(models)
    }

    pub fn default_thresholds(&self) -> Thresholds {
        Thresholds {
            tau: self.config.case.tau,
            alpha: self.config.case.alpha,
            beta: self.config.case.beta,
        }
    }
}

// ---------------------------------------------------------------------------
// ROI stages
// ---------------------------------------------------------------------------

/// Skeleton, pelvis slab and the in-plane inference window.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub skeleton: BinaryMask,
    pub lower_hu: f64,
    pub roi: PelvisRoi,
    pub window: Window,
}

pub fn prepare(vol: &CtVolume, cfg: &Config) -> Result<Prepared> {
    let seg = adaptive_skeleton_segment_with(vol, &cfg.skeleton).stage(Stage::Skeleton)?;
    let roi = compute_pelvis_roi(&seg.mask, &cfg.roi).stage(Stage::PelvisRoi)?;
    let window = skeleton_window(&seg.mask, &roi, cfg.roi.window_margin_mm);
    Ok(Prepared {
        skeleton: seg.mask,
        lower_hu: seg.lower_hu,
        roi,
        window,
    })
}

#[derive(Debug, Clone)]
pub struct JointLocalization {
    pub prepared: Prepared,
    pub initial: BinaryMask,
    pub coccyx: crate::roi::CoccyxLocation,
    pub refined: BinaryMask,
    pub rects: Vec<RectSample>,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

pub fn localize_joints(
    vol: &CtVolume,
    unet: &UNetClassifier,
    refinement: &Forest,
    cfg: &Config,
    id: &str,
    timings: &mut BTreeMap<String, f64>,
) -> Result<JointLocalization> {
    let t = Instant::now();
    let prepared = prepare(vol, cfg)?;
    timings.insert("pelvis_roi".into(), ms(t));
    let t = Instant::now();
    let initial = initial_sij_mask_in_window(vol, &prepared.roi, unet, &prepared.window, &cfg.roi).stage(Stage::InitialRoi)?;
    timings.insert("initial_roi".into(), ms(t));
    let t = Instant::now();
    let coccyx = locate_coccyx(vol, &prepared.skeleton, &prepared.roi, &initial, refinement, &cfg.roi)
        .stage(Stage::Refinement)?;
    let refined = refine_sij_mask(vol, &initial, coccyx.point, refinement, &cfg.roi).stage(Stage::Refinement)?;
    let rects = extract_half_slice_rects(vol, &refined, id, &cfg.roi).stage(Stage::Refinement)?;
    timings.insert("refinement".into(), ms(t));
    Ok(JointLocalization {
        prepared,
        initial,
        coccyx,
        refined,
        rects,
    })
}

/// Rectangles centered at the label centroid of every labeled (slice, side),
/// carrying the ground-truth slice grade.
pub fn ground_truth_rects(case: &LabeledCase, params: &RoiParams) -> Vec<RectSample> {
    side_centroids(&case.labels)
        .into_par_iter()
        .map(|(z, side, center)| RectSample {
            case: case.id.clone(),
            side,
            z,
            center,
            pixels: rect_pixels(&case.volume, z, center, side, params),
            grade: case.slice_grade(side, z),
        })
        .collect()
}

fn side_rects(rects: &[RectSample], side: Side) -> Vec<&RectSample> {
    let mut v: Vec<&RectSample> = rects.iter().filter(|r| r.side == side).collect();
    v.sort_by_key(|r| r.z);
    v
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub seed: u64,
    pub case_ids: Vec<String>,
    pub split: Split,
    pub unet_losses: Vec<f64>,
    pub refinement_rows: usize,
    pub slice_samples: usize,
    pub grader_losses: Vec<f64>,
    pub val_accuracies: Vec<f64>,
    pub best_epoch: usize,
    /// Joints whose case features came from ground-truth rectangles because
    /// localization failed.
    pub fallback_joints: Vec<String>,
    pub feature_rows: usize,
    pub ensemble_folds: Vec<Vec<String>>,
    pub seconds: BTreeMap<String, f64>,
}

fn unet_patch(case: &LabeledCase, z: usize, cx: usize, cy: usize, size: usize) -> UNetPatch {
    let g = case.volume.grid();
    let [nx, ny, nz] = g.dims;
    let x0 = cx.saturating_sub(size / 2).min(nx.saturating_sub(size));
    let y0 = cy.saturating_sub(size / 2).min(ny.saturating_sub(size));
    let read = |zz: usize| {
        let s = case.volume.slice(zz);
        let mut data = Vec::with_capacity(size * size);
        for j in 0..size {
            for i in 0..size {
                let (xi, yj) = ((x0 + i).min(nx - 1), (y0 + j).min(ny - 1));
                data.push(normalize_hu(s[yj * nx + xi]));
            }
        }
        Image::new(size, size, data)
    };
    let lab = case.labels.slice(z);
    let mut target = Vec::with_capacity(size * size);
    for j in 0..size {
        for i in 0..size {
            let (xi, yj) = ((x0 + i).min(nx - 1), (y0 + j).min(ny - 1));
            target.push(if lab[yj * nx + xi] { 1.0 } else { 0.0 });
        }
    }
    UNetPatch {
        channels: [read(z.saturating_sub(1)), read(z), read((z + 1).min(nz - 1))],
        target: Image::new(size, size, target),
    }
}

struct PatchSource<'a> {
    case: &'a LabeledCase,
    prepared: &'a Prepared,
    positives: Vec<usize>,
}

fn sample_patches(sources: &[PatchSource], cfg: &Config, seed: u64, epoch: usize) -> Vec<UNetPatch> {
    let size = cfg.unet.patch_size;
    (0..cfg.unet.patches_per_epoch)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, &[rng::key_of("unet-patch"), epoch as u64, i as u64]);
            let src = &sources[r.random_range(0..sources.len())];
            let g = src.case.volume.grid();
            let roi = &src.prepared.roi;
            let w = &src.prepared.window;
            if !src.positives.is_empty() && r.random_bool(cfg.voxel_training.positive_fraction) {
                let (x, y, z) = g.coords(src.positives[r.random_range(0..src.positives.len())]);
                let jx = (cfg.voxel_training.jitter_mm / g.spacing[0]) as i64;
                let jy = (cfg.voxel_training.jitter_mm / g.spacing[1]) as i64;
                let cx = (x as i64 + r.random_range(-jx..=jx)).clamp(0, g.dims[0] as i64 - 1) as usize;
                let cy = (y as i64 + r.random_range(-jy..=jy)).clamp(0, g.dims[1] as i64 - 1) as usize;
                unet_patch(src.case, z, cx, cy, size)
            } else {
                let z = r.random_range(roi.z_bottom..=roi.z_top);
                let cx = r.random_range(w.x0..=w.x1);
                let cy = r.random_range(w.y0..=w.y1);
                unet_patch(src.case, z, cx, cy, size)
            }
        })
        .collect()
}

fn train_unet(sources: &[PatchSource], cfg: &Config) -> Result<(UNetClassifier, Vec<f64>)> {
    let ucfg = UNetConfig {
        seed: cfg.sub_seed("unet"),
        ..cfg.unet.clone()
    };
    let mut net: UNetClassifier = UNet::new(&ucfg)?;
    let mut opt = Adam::new(ucfg.learning_rate);
    let mut losses = Vec::with_capacity(ucfg.epochs);
    for epoch in 0..ucfg.epochs {
        let patches = sample_patches(sources, cfg, ucfg.seed, epoch);
        losses.push(net.train_epoch(&patches, &cfg.unet_augment, &mut opt, epoch));
    }
    Ok((net, losses))
}

/// Refinement rows from initial ∪ ground-truth voxels, relative to the slab
/// coccyx candidate.
fn refinement_rows(
    case: &LabeledCase,
    prepared: &Prepared,
    initial: &BinaryMask,
    cfg: &Config,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let roi = &prepared.roi;
    let Some(coccyx) = posterior_centroid(&prepared.skeleton, (roi.z_bottom, roi.z_top), cfg.roi.posterior_fraction)
    else {
        return (Vec::new(), Vec::new());
    };
    let mut offsets: Vec<usize> = initial
        .bits()
        .iter()
        .zip(case.labels.bits())
        .enumerate()
        .filter(|(_, (&a, &b))| a || b)
        .map(|(o, _)| o)
        .collect();
    offsets.shuffle(&mut rng::stream(seed, &[rng::key_of("refine-rows"), rng::key_of(&case.id)]));
    offsets.truncate(cfg.refinement.samples_per_case);
    offsets.sort_unstable();
    let x = feature_rows(&case.volume, &offsets, coccyx, cfg.roi.use_hu_feature);
    let y = offsets.iter().map(|&o| usize::from(case.labels.bits()[o])).collect();
    (x, y)
}

fn joint_id(case: &str, side: Side) -> String {
    let s = match side {
        Side::Left => "left",
        Side::Right => "right",
    };
    format!("{case}:{s}")
}

pub fn train_models(cases: &[LabeledCase], cfg: &Config) -> Result<(PipelineModels, TrainingLog)> {
    cfg.validate()?;
    let split = resolve_split(cases.len(), &cfg.split, cfg.seed)?;
    let mut seconds = BTreeMap::new();
    let scheme = GroupingScheme::from_classes(cfg.grader.num_classes)?;

    // Class coverage first, so bad cohorts fail before any training.
    let mut seen = [false; 3];
    for &i in &split.train {
        for side in Side::BOTH {
            seen[cases[i].case_grade(side, &cfg.case.rule)?.index()] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::invalid("training split lacks a case grade class").in_stage(Stage::Training));
    }

    let fit: Vec<usize> = split.train.iter().chain(&split.val).copied().collect();
    let t = Instant::now();
    let prepared: Vec<Prepared> = fit
        .par_iter()
        .map(|&i| prepare(&cases[i].volume, cfg).map_err(|e| Error::Config(format!("case {}: {e}", cases[i].id))))
        .collect::<Result<_>>()
        .stage(Stage::Training)?;
    seconds.insert("prepare".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let n_train = split.train.len();
    let sources: Vec<PatchSource> = (0..n_train)
        .map(|k| {
            let case = &cases[fit[k]];
            let roi = &prepared[k].roi;
            let plane = case.volume.grid().slice_len();
            let positives = case
                .labels
                .bits()
                .iter()
                .enumerate()
                .filter(|(o, &b)| b && roi.contains_slice(o / plane))
                .map(|(o, _)| o)
                .collect();
            PatchSource {
                case,
                prepared: &prepared[k],
                positives,
            }
        })
        .collect();
    let (unet, unet_losses) = train_unet(&sources, cfg).stage(Stage::Training)?;
    seconds.insert("unet".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let initial: Vec<BinaryMask> = fit
        .iter()
        .zip(&prepared)
        .map(|(&i, p)| initial_sij_mask_in_window(&cases[i].volume, &p.roi, &unet, &p.window, &cfg.roi))
        .collect::<Result<_>>()
        .stage(Stage::InitialRoi)?;
    seconds.insert("initial_masks".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let rseed = cfg.sub_seed("refinement");
    let (mut rx, mut ry) = (Vec::new(), Vec::new());
    for k in 0..n_train {
        let (x, y) = refinement_rows(&cases[fit[k]], &prepared[k], &initial[k], cfg, rseed);
        rx.extend(x);
        ry.extend(y);
    }
    let refinement = train_forest_with_classes(&rx, &ry, 2, &ForestParams {
        seed: rseed,
        ..cfg.refinement.forest.clone()
    })
    .stage(Stage::Training)?;
    seconds.insert("refinement".into(), t.elapsed().as_secs_f64());

    // Case rectangles from the trained localization; ground truth where it fails.
    let t = Instant::now();
    let located: Vec<Option<Vec<RectSample>>> = fit
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let c = &cases[i];
            let p = &prepared[k];
            let coccyx = locate_coccyx(&c.volume, &p.skeleton, &p.roi, &initial[k], &refinement, &cfg.roi).ok()?;
            let refined = refine_sij_mask(&c.volume, &initial[k], coccyx.point, &refinement, &cfg.roi).ok()?;
            extract_half_slice_rects(&c.volume, &refined, &c.id, &cfg.roi).ok()
        })
        .collect();
    let gt: Vec<Vec<RectSample>> = fit.iter().map(|&i| ground_truth_rects(&cases[i], &cfg.roi)).collect();
    let mut fallback_joints = Vec::new();
    let mut joints: Vec<(usize, CaseRects)> = Vec::new();
    for (k, &i) in fit.iter().enumerate() {
        let c = &cases[i];
        for side in Side::BOTH {
            let pred = located[k].as_deref().map(|r| side_rects(r, side)).unwrap_or_default();
            let rects: Vec<Image> = if pred.is_empty() {
                fallback_joints.push(joint_id(&c.id, side));
                side_rects(&gt[k], side).iter().map(|r| r.pixels.clone()).collect()
            } else {
                pred.iter().map(|r| r.pixels.clone()).collect()
            };
            joints.push((
                k,
                CaseRects {
                    id: joint_id(&c.id, side),
                    rects,
                    label: c.case_grade(side, &cfg.case.rule)?.index(),
                },
            ));
        }
    }
    seconds.insert("case_rects".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let (mut slice_imgs, mut slice_labels) = (Vec::new(), Vec::new());
    for rects in &gt[..n_train] {
        for r in rects {
            if let Some(g) = r.grade {
                slice_imgs.push(&r.pixels);
                slice_labels.push(map_grade(g, scheme)?);
            }
        }
    }
    let train_joints: Vec<CaseRects> = joints.iter().filter(|(k, _)| *k < n_train).map(|(_, j)| j.clone()).collect();
    let val_joints: Vec<CaseRects> = joints.iter().filter(|(k, _)| *k >= n_train).map(|(_, j)| j.clone()).collect();
    let grader = build_slice_cnn(&CnnConfig {
        seed: cfg.sub_seed("grader"),
        ..cfg.grader.clone()
    })?;
    let case_forest = ForestParams {
        seed: cfg.sub_seed("case3"),
        ..cfg.case.forest.clone()
    };
    let recipe = CaseRecipe {
        forest: case_forest.clone(),
        n_classes: 3,
        n_aug: cfg.case.n_aug,
        aug: cfg.grader_augment.clone(),
        seed: cfg.sub_seed("case-aug"),
    };
    let outcome = alternate_train(
        grader,
        &slice_imgs,
        &slice_labels,
        &cfg.grader_augment,
        &recipe,
        &train_joints,
        &val_joints,
        cfg.grader.epochs,
    )
    .stage(Stage::Training)?;
    seconds.insert("alternate".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let all_joints: Vec<CaseRects> = joints.iter().map(|(_, j)| j.clone()).collect();
    let table = build_case_training_set(&all_joints, &outcome.grader, cfg.case.n_aug, &cfg.grader_augment, recipe.seed)?;
    let x = table.features();
    let y3 = table.labels();
    let y2: Vec<usize> = y3.iter().map(|&l| usize::from(l > 0)).collect();
    let case2 = train_case_rf(&x, &y2, 2, &ForestParams {
        seed: cfg.sub_seed("case2"),
        ..cfg.case.forest.clone()
    })?;
    let two_step = train_two_step(&x, &y3, &ForestParams {
        seed: cfg.sub_seed("two-step"),
        ..cfg.case.forest.clone()
    })?;
    let mut ensemble = Vec::new();
    let mut ensemble_folds = Vec::new();
    if cfg.case.ensemble {
        let folds = kfold_split(fit.len(), ENSEMBLE_SIZE, cfg.sub_seed("ensemble-folds")).stage(Stage::Training)?;
        for (f, fold) in folds.iter().enumerate() {
            let held: Vec<&str> = fold.iter().map(|&k| cases[fit[k]].id.as_str()).collect();
            let keep: Vec<usize> = table
                .rows
                .iter()
                .enumerate()
                .filter(|(_, r)| !held.contains(&r.case.split(':').next().unwrap_or("")))
                .map(|(i, _)| i)
                .collect();
            let fx: Vec<Vec<f64>> = keep.iter().map(|&i| x[i].clone()).collect();
            let fy: Vec<usize> = keep.iter().map(|&i| y3[i]).collect();
            ensemble.push(train_case_rf(&fx, &fy, 3, &ForestParams {
                seed: rng::derive_seed(cfg.sub_seed("ensemble"), &[f as u64]),
                ..cfg.case.forest.clone()
            })?);
            ensemble_folds.push(held.iter().map(|s| s.to_string()).collect());
        }
    }
    seconds.insert("case_forests".into(), t.elapsed().as_secs_f64());

    let log = TrainingLog {
        seed: cfg.seed,
        case_ids: cases.iter().map(|c| c.id.clone()).collect(),
        split,
        unet_losses,
        refinement_rows: rx.len(),
        slice_samples: slice_labels.len(),
        grader_losses: outcome.train_losses,
        val_accuracies: outcome.val_accuracies,
        best_epoch: outcome.best_epoch,
        fallback_joints,
        feature_rows: table.rows.len(),
        ensemble_folds,
        seconds,
    };
    let models = PipelineModels {
        config: cfg.clone(),
        unet,
        refinement,
        grader: outcome.grader,
        case3: outcome.forest,
        case2,
        two_step,
        ensemble,
    };
    Ok((models, log))
}

// ---------------------------------------------------------------------------
// Grading
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectRecord {
    pub z: usize,
    pub center: [f64; 2],
    pub width_mm: f64,
    pub height_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointGrading {
    pub slice_classes: Vec<usize>,
    pub features: Vec<f64>,
    /// Three-class probabilities (ensemble mean when the ensemble is used).
    pub probabilities: Vec<f64>,
    pub grade: CaseGrade,
    /// Two-class view of `grade`.
    pub two_class: TwoClassGrade,
    /// P(unhealthy) from the two-class forest.
    pub unhealthy_probability: f64,
    pub tau_grade: TwoClassGrade,
    pub alpha_beta_grade: CaseGrade,
    pub two_step_grade: CaseGrade,
    /// Summed member probabilities, when graded by the ensemble.
    pub ensemble_sum: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub side: Side,
    pub rects: Vec<RectRecord>,
    /// Absent when no joint voxels were found on this side.
    pub grading: Option<JointGrading>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub version: u32,
    pub case: String,
    pub skeleton_lower_hu: f64,
    pub z_top: usize,
    pub z_bottom: usize,
    pub coccyx_mm: [f64; 3],
    pub coccyx_source: CoccyxSource,
    pub joints: Vec<JointReport>,
    pub thresholds: Thresholds,
    pub timings_ms: BTreeMap<String, f64>,
}

impl CaseReport {
    pub fn joint(&self, side: Side) -> &JointReport {
        self.joints.iter().find(|j| j.side == side).expect("report holds both joints")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON with timings cleared, for reproducibility comparisons.
    pub fn to_json_without_timings(&self) -> String {
        CaseReport {
            timings_ms: BTreeMap::new(),
            ..self.clone()
        }
        .to_json()
    }
}

pub fn grade_joint(models: &PipelineModels, rects: &[&Image], th: &Thresholds) -> Result<JointGrading> {
    let m = models.grader.num_classes();
    let t_classes = models.grader.classify_batch(rects);
    let features = runlength_features(&t_classes, m).stage(Stage::SliceGrading)?;
    let (probabilities, ensemble_sum) = if models.config.case.ensemble {
        let (_, sum) = ensemble_predict(&models.ensemble, &features).stage(Stage::CaseGrading)?;
        let n = models.ensemble.len() as f64;
        (sum.iter().map(|v| v / n).collect::<Vec<f64>>(), Some(sum))
    } else {
        (models.case3.predict_proba(&features).stage(Stage::CaseGrading)?, None)
    };
    let grade_idx = match &ensemble_sum {
        Some(sum) => argmax(sum),
        None => argmax(&probabilities),
    };
    let grade = CaseGrade::from_index(grade_idx)?;
    let p2 = models.case2.predict_proba(&features).stage(Stage::CaseGrading)?;
    Ok(JointGrading {
        tau_grade: threshold_two_class(&p2, th.tau).stage(Stage::CaseGrading)?,
        alpha_beta_grade: threshold_three_class(&probabilities, th.alpha, th.beta).stage(Stage::CaseGrading)?,
        two_step_grade: two_step_predict(&models.two_step.binary, &models.two_step.stage_two, &features)
            .stage(Stage::CaseGrading)?,
        unhealthy_probability: p2[1],
        slice_classes: t_classes,
        features,
        probabilities,
        grade,
        two_class: grade.two_class(),
        ensemble_sum,
    })
}

pub fn grade_volume(vol: &CtVolume, models: &PipelineModels, th: &Thresholds, id: &str) -> Result<CaseReport> {
    th.validate()?;
    if !models.grader.trained {
        return Err(Error::Untrained("slice grader").in_stage(Stage::SliceGrading));
    }
    let cfg = &models.config;
    let mut timings = BTreeMap::new();
    let start = Instant::now();
    let loc = localize_joints(vol, &models.unet, &models.refinement, cfg, id, &mut timings)?;
    let t = Instant::now();
    let mut joints = Vec::with_capacity(2);
    for side in Side::BOTH {
        let rs = side_rects(&loc.rects, side);
        let rects = rs
            .iter()
            .map(|r| RectRecord {
                z: r.z,
                center: r.center,
                width_mm: cfg.roi.rect_width_mm,
                height_mm: cfg.roi.rect_height_mm,
            })
            .collect();
        let grading = if rs.is_empty() {
            None
        } else {
            let imgs: Vec<&Image> = rs.iter().map(|r| &r.pixels).collect();
            Some(grade_joint(models, &imgs, th)?)
        };
        joints.push(JointReport { side, rects, grading });
    }
    timings.insert("grading".into(), ms(t));
    timings.insert("total".into(), ms(start));
    let c = loc.coccyx.point;
    Ok(CaseReport {
        version: REPORT_VERSION,
        case: id.to_string(),
        skeleton_lower_hu: loc.prepared.lower_hu,
        z_top: loc.prepared.roi.z_top,
        z_bottom: loc.prepared.roi.z_bottom,
        coccyx_mm: [c.x, c.y, c.z],
        coccyx_source: loc.coccyx.source,
        joints,
        thresholds: *th,
        timings_ms: timings,
    })
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_report(path: &Path, bytes: &[u8]) -> Result<()> {
    volume::write_atomic(path, bytes)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointOutcome {
    pub case: String,
    pub side: Side,
    pub truth: CaseGrade,
    /// None when the pipeline produced no grading for this joint; such joints
    /// count as predicted healthy.
    pub grading: Option<JointGrading>,
    pub gt_rects: usize,
    pub matched_rects: usize,
    pub dice_sum: f64,
    pub distance_sum: f64,
}

impl JointOutcome {
    fn predicted(&self) -> CaseGrade {
        self.grading.as_ref().map_or(CaseGrade::Healthy, |g| g.grade)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub case: String,
    pub stage: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    pub predicted_unhealthy: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaBetaRow {
    pub alpha: f64,
    pub beta: f64,
    pub accuracy: f64,
    pub confusion_normalized: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub accuracy: f64,
    pub member_accuracies: Vec<f64>,
    /// Every ensemble grade equals the argmax of the recomputed member sum.
    pub argmax_consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSummary {
    pub gt_rects: usize,
    pub matched_rects: usize,
    /// Over ground-truth rectangles; unmatched ones count as 0.
    pub mean_dice: f64,
    /// Over matched rectangles.
    pub mean_center_distance_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_cases: usize,
    pub n_joints: usize,
    pub failures: Vec<Failure>,
    pub three_class: ClassificationReport,
    pub two_class: ClassificationReport,
    pub thresholds: Thresholds,
    /// Two-class forest thresholded at τ.
    pub tau_report: ClassificationReport,
    pub roc: Option<RocCurve>,
    pub roc_error: Option<String>,
    pub tau_sweep: Vec<TauRow>,
    /// Three-class probabilities thresholded at (α, β).
    pub alpha_beta_report: ClassificationReport,
    pub alpha_beta_grid: Vec<AlphaBetaRow>,
    pub two_step: ClassificationReport,
    pub ensemble: Option<EnsembleSummary>,
    pub roi: RoiSummary,
    pub joints: Vec<JointOutcome>,
}

fn roi_match(gt: &[RectSample], pred: &[RectRecord], side: Side, params: &RoiParams) -> Result<(usize, usize, f64, f64)> {
    let (mut n, mut matched, mut dice, mut dist) = (0, 0, 0.0, 0.0);
    for g in gt.iter().filter(|r| r.side == side) {
        n += 1;
        if let Some(p) = pred.iter().find(|p| p.z == g.z) {
            let a = Rect {
                center: g.center,
                width: params.rect_width_mm,
                height: params.rect_height_mm,
            };
            let b = Rect {
                center: p.center,
                width: p.width_mm,
                height: p.height_mm,
            };
            let (d, c) = rect_overlap(&a, &b)?;
            matched += 1;
            dice += d;
            dist += c;
        }
    }
    Ok((n, matched, dice, dist))
}

pub fn evaluate(models: &PipelineModels, cases: &[LabeledCase]) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::invalid("empty test set").in_stage(Stage::Evaluation));
    }
    let th = models.default_thresholds();
    let cfg = &models.config;
    let graded: Vec<std::result::Result<CaseReport, Error>> =
        cases.iter().map(|c| grade_volume(&c.volume, models, &th, &c.id)).collect();
    let mut failures = Vec::new();
    let mut joints = Vec::new();
    for (c, rep) in cases.iter().zip(&graded) {
        let gt = ground_truth_rects(c, &cfg.roi);
        if let Err(e) = rep {
            failures.push(Failure {
                case: c.id.clone(),
                stage: e.stage().map(|s| s.to_string()),
                error: e.root().to_string(),
            });
        }
        for side in Side::BOTH {
            let (grading, (n, matched, dice, dist)) = match rep {
                Ok(r) => {
                    let j = r.joint(side);
                    (j.grading.clone(), roi_match(&gt, &j.rects, side, &cfg.roi)?)
                }
                Err(_) => (None, roi_match(&gt, &[], side, &cfg.roi)?),
            };
            joints.push(JointOutcome {
                case: c.id.clone(),
                side,
                truth: c.case_grade(side, &cfg.case.rule)?,
                grading,
                gt_rects: n,
                matched_rects: matched,
                dice_sum: dice,
                distance_sum: dist,
            });
        }
    }

    let truth3: Vec<usize> = joints.iter().map(|j| j.truth.index()).collect();
    let pred3: Vec<usize> = joints.iter().map(|j| j.predicted().index()).collect();
    let truth2: Vec<usize> = joints.iter().map(|j| j.truth.two_class().index()).collect();
    let pred2: Vec<usize> = joints.iter().map(|j| j.predicted().two_class().index()).collect();
    let p_unhealthy: Vec<f64> = joints
        .iter()
        .map(|j| j.grading.as_ref().map_or(0.0, |g| g.unhealthy_probability))
        .collect();
    let probs3: Vec<Vec<f64>> = joints
        .iter()
        .map(|j| j.grading.as_ref().map_or(vec![1.0, 0.0, 0.0], |g| g.probabilities.clone()))
        .collect();

    let tau_pred: Vec<usize> = p_unhealthy
        .iter()
        .map(|&p| threshold_two_class(&[1.0 - p, p], th.tau).map(|g| g.index()))
        .collect::<Result<_>>()?;
    let positives: Vec<bool> = truth2.iter().map(|&t| t == 1).collect();
    let (roc, roc_error) = match roc_auc(&positives, &p_unhealthy) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let steps = cfg.eval.tau_steps;
    let tau_sweep = (0..=steps)
        .map(|s| {
            let tau = s as f64 / steps as f64;
            let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
            for (&p, &pos) in p_unhealthy.iter().zip(&positives) {
                match (p > tau, pos) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, false) => tn += 1,
                    (false, true) => fneg += 1,
                }
            }
            let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
            TauRow {
                tau,
                predicted_unhealthy: tp + fp,
                tp,
                fp,
                tn,
                fn_: fneg,
                sensitivity: ratio(tp, fneg),
                specificity: ratio(tn, fp),
            }
        })
        .collect();

    let ab = |alpha: f64, beta: f64| -> Result<Vec<usize>> {
        probs3
            .iter()
            .map(|p| threshold_three_class(p, alpha, beta).map(|g| g.index()))
            .collect()
    };
    let mut alpha_beta_grid = Vec::new();
    for &alpha in &cfg.eval.alpha_grid {
        for &beta in &cfg.eval.beta_grid {
            let r = classification_report(&truth3, &ab(alpha, beta)?, 3)?;
            alpha_beta_grid.push(AlphaBetaRow {
                alpha,
                beta,
                accuracy: r.accuracy,
                confusion_normalized: r.confusion_normalized,
            });
        }
    }
    let two_step_pred: Vec<usize> = joints
        .iter()
        .map(|j| j.grading.as_ref().map_or(0, |g| g.two_step_grade.index()))
        .collect();

    let ensemble = if models.config.case.ensemble {
        let mut consistent = true;
        let mut member_correct = vec![0usize; models.ensemble.len()];
        let mut correct = 0;
        for j in &joints {
            let Some(g) = &j.grading else { continue };
            let mut sum = [0.0f64; 3];
            for (m, f) in models.ensemble.iter().enumerate() {
                let p = f.predict_proba(&g.features)?;
                for (s, v) in sum.iter_mut().zip(&p) {
                    *s += v;
                }
                member_correct[m] += usize::from(argmax(&p) == j.truth.index());
            }
            consistent &= argmax(&sum) == g.grade.index();
            correct += usize::from(g.grade == j.truth);
        }
        let n = joints.len() as f64;
        Some(EnsembleSummary {
            accuracy: correct as f64 / n,
            member_accuracies: member_correct.iter().map(|&c| c as f64 / n).collect(),
            argmax_consistent: consistent,
        })
    } else {
        None
    };

    let gt_rects: usize = joints.iter().map(|j| j.gt_rects).sum();
    let matched: usize = joints.iter().map(|j| j.matched_rects).sum();
    let roi = RoiSummary {
        gt_rects,
        matched_rects: matched,
        mean_dice: if gt_rects == 0 { 0.0 } else { joints.iter().map(|j| j.dice_sum).sum::<f64>() / gt_rects as f64 },
        mean_center_distance_mm: (matched > 0).then(|| joints.iter().map(|j| j.distance_sum).sum::<f64>() / matched as f64),
    };

    Ok(EvalReport {
        n_cases: cases.len(),
        n_joints: joints.len(),
        failures,
        three_class: classification_report(&truth3, &pred3, 3)?,
        two_class: classification_report(&truth2, &pred2, 2)?,
        thresholds: th,
        tau_report: classification_report(&truth2, &tau_pred, 2)?,
        roc,
        roc_error,
        tau_sweep,
        alpha_beta_report: classification_report(&truth3, &ab(th.alpha, th.beta)?, 3)?,
        alpha_beta_grid,
        two_step: classification_report(&truth3, &two_step_pred, 3)?,
        ensemble,
        roi,
        joints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = Config::default();
        let text = cfg.to_toml();
        assert_eq!(Config::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("closing_diameter = 7"));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = Config::from_toml("seed = 5\n[case]\nn_aug = 3\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.case.n_aug, 3);
        assert_eq!(cfg.case.tau, 0.42);
        assert!(Config::from_toml("bogus = 1\n").is_err());
        assert!(Config::from_toml("[case]\ntau = 2.0\n").is_err());
    }

    #[test]
    fn fractional_split_matches_proportions() {
        let s = resolve_split(60, &SplitParams::default(), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (45, 7, 8));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
    }

    #[test]
    fn overlapping_split_rejected() {
        let p = SplitParams {
            train: Some(vec![0, 1, 2]),
            val: Some(vec![2, 3]),
            ..SplitParams::default()
        };
        assert!(matches!(resolve_split(6, &p, 0), Err(Error::Config(_))));
        let p = SplitParams {
            train: Some(vec![0, 1, 2]),
            val: Some(vec![3]),
            ..SplitParams::default()
        };
        assert_eq!(resolve_split(6, &p, 0).unwrap().test, vec![4, 5]);
    }
}
