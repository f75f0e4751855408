//! `sijgrade` command line: phantom generation, training, grading and
//! evaluation.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage or configuration error,
//! 3 I/O or malformed file, 4 pelvis not found, 5 SIJ not found,
//! 6 coccyx ambiguous, 7 model error.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use sijgrade::case::CaseGrade;
use sijgrade::phantom::{generate_cohort, CohortSpec};
use sijgrade::pipeline::{
    evaluate, grade_volume, load_cohort, save_cohort, train_models, write_report, CaseReport, CohortManifest, Config,
    EvalReport, PipelineModels, Thresholds,
};
use sijgrade::roi::Side;
use sijgrade::volume::load_volume;
use sijgrade::Error;

#[derive(Parser)]
#[command(name = "sijgrade", version, about = "Sacroiliac joint localization and grading for pelvic CT")]
struct Cli {
    /// Overrides every configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SIJGRADE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom cohort with ground truth.
    PhantomGen {
        /// Cohort spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all models on a labeled cohort.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        /// Pipeline config (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grade both joints of one volume.
    Grade {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, requires = "beta")]
        alpha: Option<f64>,
        #[arg(long, requires = "alpha", allow_hyphen_values = true)]
        beta: Option<f64>,
        /// Report path; defaults to `<volume>.report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate models on a labeled manifest.
    Eval {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Report path; defaults to `<models>/eval_report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Marks failures while loading a model directory.
#[derive(Debug)]
struct ModelLoad(PathBuf);

impl fmt::Display for ModelLoad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cannot load models from {}", self.0.display())
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ModelLoad>().is_some() {
        return 7;
    }
    match e.downcast_ref::<Error>().map(Error::root) {
        Some(Error::Io { .. } | Error::Format { .. }) => 3,
        Some(Error::PelvisNotFound) => 4,
        Some(Error::SijNotFound) => 5,
        Some(Error::CoccyxAmbiguous) => 6,
        Some(Error::Untrained(_)) => 7,
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 2,
        _ => 1,
    }
}

/// Error chain without repeating causes already embedded in their parent.
fn message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn load_models(dir: &Path) -> Result<PipelineModels> {
    PipelineModels::load(dir).context(ModelLoad(dir.to_path_buf()))
}

fn phantom_gen(spec: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(spec).map_err(|e| Error::Io {
        path: spec.to_path_buf(),
        source: e,
    })?;
    let mut cohort: CohortSpec = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
    if let Some(s) = seed {
        cohort.seed = s;
    }
    let cases = generate_cohort(&cohort)?;
    let manifest = save_cohort(&cases, out)?;
    let mut counts = [[0usize; 3]; 2];
    for c in &cases {
        counts[0][c.left_case.index()] += 1;
        counts[1][c.right_case.index()] += 1;
    }
    println!("wrote {} phantoms to {}", cases.len(), manifest.display());
    for (name, c) in ["left", "right"].iter().zip(counts) {
        println!("  {name:5} healthy {} / suspicious {} / sick {}", c[0], c[1], c[2]);
    }
    Ok(())
}

fn train(cohort: &Path, config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let manifest = CohortManifest::load(cohort)?;
    let cases = load_cohort(&manifest)?;
    let (mut models, log) = train_models(&cases, &cfg)?;
    models.save(out)?;
    write_report(&out.join("training_log.json"), &serde_json::to_vec_pretty(&log)?)?;
    for (name, idx) in [("train", &log.split.train), ("val", &log.split.val), ("test", &log.split.test)] {
        manifest.subset(idx).save(&out.join(format!("{name}_manifest.json")))?;
    }
    println!(
        "trained on {} cases ({} train / {} val / {} test held out)",
        cases.len(),
        log.split.train.len(),
        log.split.val.len(),
        log.split.test.len()
    );
    for (e, acc) in log.val_accuracies.iter().enumerate() {
        println!("  epoch {e:2}  slice loss {:.4}  val case accuracy {acc:.3}", log.grader_losses[e]);
    }
    println!("  selected epoch {}", log.best_epoch);
    if !log.fallback_joints.is_empty() {
        println!("  {} joints used ground-truth rectangles for case features", log.fallback_joints.len());
    }
    println!("models written to {}", out.display());
    Ok(())
}

fn grade_name(g: CaseGrade) -> &'static str {
    match g {
        CaseGrade::Healthy => "healthy",
        CaseGrade::Suspicious => "suspicious",
        CaseGrade::Sick => "sick",
    }
}

fn print_grade(r: &CaseReport) {
    println!("{}: pelvis slices {}..={}", r.case, r.z_bottom, r.z_top);
    for side in Side::BOTH {
        let j = r.joint(side);
        let name = if side == Side::Left { "left" } else { "right" };
        match &j.grading {
            Some(g) => println!(
                "  {name:5} {:10} P = ({:.2}, {:.2}, {:.2})  {} slices  τ-decision {:?}  (α,β)-decision {}",
                grade_name(g.grade),
                g.probabilities[0],
                g.probabilities[1],
                g.probabilities[2],
                g.slice_classes.len(),
                g.tau_grade,
                grade_name(g.alpha_beta_grade),
            ),
            None => println!("  {name:5} not found"),
        }
    }
}

fn grade(
    volume: &Path,
    models: &Path,
    tau: Option<f64>,
    ab: Option<(f64, f64)>,
    out: Option<&Path>,
) -> Result<()> {
    let models = load_models(models)?;
    let mut th: Thresholds = models.default_thresholds();
    if let Some(t) = tau {
        th.tau = t;
    }
    if let Some((a, b)) = ab {
        th.alpha = a;
        th.beta = b;
    }
    let vol = load_volume(volume)?;
    let id = volume.file_stem().map_or("volume".into(), |s| s.to_string_lossy().into_owned());
    let report = grade_volume(&vol, &models, &th, &id)?;
    let path = out.map_or_else(|| volume.with_extension("report.json"), Path::to_path_buf);
    write_report(&path, report.to_json().as_bytes())?;
    print_grade(&report);
    println!("report written to {}", path.display());
    Ok(())
}

fn print_eval(r: &EvalReport) {
    println!("{} cases, {} joints, {} failures", r.n_cases, r.n_joints, r.failures.len());
    println!("  three-class accuracy {:.3}", r.three_class.accuracy);
    println!("  two-class accuracy   {:.3}", r.two_class.accuracy);
    match (r.two_class.sensitivity, r.two_class.specificity) {
        (Some(s), Some(p)) => println!("  sensitivity {s:.3}  specificity {p:.3}"),
        _ => println!("  sensitivity/specificity: {}", r.two_class.sensitivity_error.as_deref().unwrap_or("n/a")),
    }
    match &r.roc {
        Some(roc) => println!("  AUC {:.3}", roc.auc),
        None => println!("  ROC: {}", r.roc_error.as_deref().unwrap_or("n/a")),
    }
    println!("  τ = {:.2}: accuracy {:.3}", r.thresholds.tau, r.tau_report.accuracy);
    println!(
        "  (α, β) = ({:.2}, {:.2}): accuracy {:.3}",
        r.thresholds.alpha, r.thresholds.beta, r.alpha_beta_report.accuracy
    );
    println!("  two-step accuracy {:.3}", r.two_step.accuracy);
    if let Some(e) = &r.ensemble {
        println!("  ensemble accuracy {:.3} (members {:?})", e.accuracy, e.member_accuracies);
    }
    println!(
        "  ROI mean Dice {:.3}, mean center distance {}",
        r.roi.mean_dice,
        r.roi.mean_center_distance_mm.map_or("n/a".into(), |d| format!("{d:.2} mm"))
    );
}

fn eval(models: &Path, manifest: &Path, out: Option<&Path>) -> Result<()> {
    let m = load_models(models)?;
    let cases = load_cohort(&CohortManifest::load(manifest)?)?;
    let report = evaluate(&m, &cases)?;
    let path = out.map_or_else(|| models.join("eval_report.json"), Path::to_path_buf);
    write_report(&path, &serde_json::to_vec_pretty(&report)?)?;
    print_eval(&report);
    println!("report written to {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::PhantomGen { spec, out } => phantom_gen(spec, out, cli.seed),
        Command::Train { cohort, config, out } => train(cohort, config.as_deref(), out, cli.seed),
        Command::Grade {
            volume,
            models,
            tau,
            alpha,
            beta,
            out,
        } => grade(volume, models, *tau, alpha.zip(*beta), out.as_deref()),
        Command::Eval { models, manifest, out } => eval(models, manifest, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
