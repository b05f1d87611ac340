//! `catalog` command-line interface.
//!
//! Exit codes: 0 on success, 1 when validation fails (bundle violations, bad
//! config), 2 on any other error.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::alignment::FusionConfig;
use crate::evaluator::{
    alpha_sweep_with_text, build_ablation_config, compose_text, evaluate, AblationSpec, EvalReport, PromptSelection,
};
use crate::store::{self, load_bundle, save_bundle, validate_bundle, EmbeddingBundle};
use crate::synth::{generate, SynthSpec};
use crate::trainer::{load_checkpoint, save_checkpoint, train_with_prompts, Checkpoint, TrainConfig};

// stdout writes ignore errors: a closed pipe (`catalog ... | head`) is not a failure
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! say_raw {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

/// Environment variable capping internal parallelism.
pub const THREADS_ENV: &str = "CATALOG_CORE_THREADS";

/// Exit status for a failed validation.
pub const EXIT_INVALID: i32 = 1;
/// Exit status for runtime errors.
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "catalog",
    version,
    about = "Multi-modal fusion and projection-head training on embedding bundles"
)]
pub struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a bundle directory against every format invariant.
    Validate {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Write the class-text centroid matrix as a raw f32 blob.
    ComposeText {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prompt set: full, base, templates, llm.
        #[arg(long, default_value = "full")]
        prompts: String,
    },
    /// Train the projection head; writes a checkpoint directory.
    Train(TrainArgs),
    /// Zero-shot / fused classification report for one split.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the checkpoint's alpha, or 1 without a checkpoint.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        /// Write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the confusion matrix as CSV here.
        #[arg(long)]
        confusion_csv: Option<PathBuf>,
    },
    /// Accuracy over a grid of alpha values, as CSV.
    SweepAlpha {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated alphas; default 0, 0.1, ..., 1.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy for every branch/prompt ablation row.
    Ablate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        split: String,
        /// Trained head used for rows with the image-text branch.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Retrain a head per row with this run config instead of reusing a checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic bundle.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// out_of_domain, serengeti or terra.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub dim_prime: Option<usize>,
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub shift: Option<f64>,
}

/// A failure that maps to exit status 1.
#[derive(Debug)]
pub struct ValidationFailure(pub String);

impl fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationFailure {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ValidationFailure(msg.into()).into()
}

/// Run configuration file. Keys not listed here are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub bundle: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Starting hyperparameters; `train` entries override them.
    pub preset: Option<String>,
    /// Partial [`TrainConfig`].
    pub train: Option<serde_json::Map<String, Value>>,
    pub ablation: Option<AblationSpec>,
}

/// A fully resolved training run.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub bundle: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub config: TrainConfig,
    pub prompts: PromptSelection,
}

impl RunConfigFile {
    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfigFile =
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.bundle, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Preset, then `train` overrides, then the ablation toggles.
    pub fn resolve(&self) -> Result<ResolvedRun> {
        let preset = self.preset.as_deref().unwrap_or("out_of_domain");
        let base = TrainConfig::preset(preset).ok_or_else(|| invalid(format!("unknown preset {preset:?}")))?;
        let mut value = serde_json::to_value(&base).expect("serializable");
        if let Some(overrides) = &self.train {
            let obj = value.as_object_mut().expect("struct serializes to object");
            for (k, v) in overrides {
                obj.insert(k.clone(), v.clone());
            }
        }
        let mut config: TrainConfig = serde_json::from_value(value).map_err(|e| invalid(format!("train: {e}")))?;
        let mut prompts = PromptSelection::FULL;
        if let Some(spec) = &self.ablation {
            let (fusion, selection) =
                build_ablation_config(spec, config.fusion()).map_err(|e| invalid(e.to_string()))?;
            config.alpha = fusion.alpha;
            prompts = selection;
        }
        config.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(ResolvedRun {
            bundle: self.bundle.clone(),
            out: self.out.clone(),
            config,
            prompts,
        })
    }
}

fn parse_prompt_set(s: &str) -> Result<PromptSelection> {
    Ok(match s {
        "full" => PromptSelection::FULL,
        "base" => PromptSelection::BASE_ONLY,
        "templates" => PromptSelection {
            base: false,
            templates: true,
            llm: false,
        },
        "llm" => PromptSelection {
            base: false,
            templates: false,
            llm: true,
        },
        other => return Err(invalid(format!("unknown prompt set {other:?}"))),
    })
}

/// Parses `"0,0.5,1"` into alphas.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let grid = s
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| invalid(format!("grid value {t:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if grid.is_empty() {
        return Err(invalid("empty alpha grid"));
    }
    if let Some(a) = grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(invalid(format!("grid value {a} outside [0, 1]")));
    }
    Ok(grid)
}

fn open_bundle(path: &Path) -> Result<EmbeddingBundle> {
    load_bundle(path).map_err(|e| invalid(e.to_string()))
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn fusion(alpha: f64, tau: f64) -> Result<FusionConfig> {
    FusionConfig::new(alpha, tau).map_err(|e| invalid(e.to_string()))
}

fn emit_json<T: Serialize>(value: &T) -> Result<()> {
    say!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_validate(json: bool, bundle: &Path) -> Result<i32> {
    let loaded = match load_bundle(bundle) {
        Ok(b) => b,
        Err(e) => {
            if json {
                emit_json(&serde_json::json!({ "valid": false, "error": e.to_string(), "violations": [] }))?;
            } else {
                say!("invalid: {e}");
            }
            return Ok(EXIT_INVALID);
        }
    };
    let violations = validate_bundle(&loaded);
    if json {
        emit_json(&serde_json::json!({
            "valid": violations.is_empty(),
            "violations": violations,
        }))?;
    } else if violations.is_empty() {
        let rows: usize = loaded.splits.values().map(|s| s.len()).sum();
        say!(
            "ok: {} classes, {} splits, {} items, F={}, F'={}, M={}",
            loaded.catalog.len(),
            loaded.splits.len(),
            rows,
            loaded.dim_image(),
            loaded.dim_image_text(),
            loaded.class_prompts.m()
        );
    } else {
        for v in &violations {
            say!("{v}");
        }
    }
    Ok(if violations.is_empty() { 0 } else { EXIT_INVALID })
}

fn cmd_compose_text(json: bool, bundle: &Path, out: &Path, prompts: &str) -> Result<i32> {
    let selection = parse_prompt_set(prompts)?;
    let b = open_bundle(bundle)?;
    let text = compose_text(&b, &selection)?;
    let bytes = store::encode_f32(text.as_slice());
    fs::write(out, &bytes).with_context(|| format!("writing {}", out.display()))?;
    if json {
        emit_json(&serde_json::json!({
            "out": out,
            "rows": text.rows(),
            "dim": text.cols(),
            "crc32": store::crc32(&bytes),
        }))?;
    } else {
        say!(
            "wrote {} x {} class-text matrix to {}",
            text.rows(),
            text.cols(),
            out.display()
        );
    }
    Ok(0)
}

fn cmd_train(json: bool, args: &TrainArgs) -> Result<i32> {
    let mut file = match &args.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    if let Some(p) = &args.preset {
        file.preset = Some(p.clone());
    }
    let overrides = file.train.get_or_insert_with(Default::default);
    if let Some(s) = args.seed {
        overrides.insert("seed".into(), s.into());
    }
    if let Some(a) = args.alpha {
        overrides.insert("alpha".into(), a.into());
    }
    if let Some(t) = args.tau {
        overrides.insert("tau".into(), t.into());
    }
    if let Some(e) = args.epochs {
        overrides.insert("epochs".into(), e.into());
    }
    if args.bundle.is_some() {
        file.bundle = args.bundle.clone();
    }
    if args.out.is_some() {
        file.out = args.out.clone();
    }
    let run = file.resolve()?;
    let bundle_path = run
        .bundle
        .ok_or_else(|| invalid("no bundle given (--bundle or config \"bundle\")"))?;
    let out = run
        .out
        .ok_or_else(|| invalid("no output directory given (--out or config \"out\")"))?;
    let bundle = open_bundle(&bundle_path)?;
    let cp = train_with_prompts(&bundle, &run.config, run.prompts)?;
    save_checkpoint(&cp, &out)?;
    if json {
        emit_json(&serde_json::json!({
            "checkpoint": out,
            "epochs_run": cp.epoch,
            "best_epoch": cp.best_epoch,
            "best_val_accuracy": cp.best_val_accuracy,
            "history": cp.history,
        }))?;
    } else {
        for h in &cp.history {
            say!(
                "epoch {:>3}  train_loss {:.6}  val_top1 {:.4}",
                h.epoch,
                h.train_loss,
                h.val_accuracy
            );
        }
        say!(
            "best val top-1 {:.4} (epoch {}), checkpoint written to {}",
            cp.best_val_accuracy,
            cp.best_epoch.map_or("-".to_string(), |e| e.to_string()),
            out.display()
        );
    }
    Ok(0)
}

/// Report for `split`, using the checkpoint's prompt set and alpha unless overridden.
pub fn eval_report(
    bundle: &EmbeddingBundle,
    split: &str,
    checkpoint: Option<&Checkpoint>,
    alpha: Option<f64>,
    tau: Option<f64>,
) -> Result<EvalReport> {
    let alpha = alpha.unwrap_or(checkpoint.map_or(1.0, |c| c.config.alpha));
    let tau = tau.unwrap_or(checkpoint.map_or(0.1, |c| c.config.tau));
    let config = fusion(alpha, tau)?;
    let prompts = checkpoint.map_or(PromptSelection::FULL, |c| c.prompts);
    let text = compose_text(bundle, &prompts)?;
    Ok(evaluate(bundle, split, &text, checkpoint.map(|c| &c.params), &config)?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    json: bool,
    bundle: &Path,
    split: &str,
    checkpoint: Option<&Path>,
    alpha: Option<f64>,
    tau: Option<f64>,
    out: Option<&Path>,
    confusion_csv: Option<&Path>,
) -> Result<i32> {
    let b = open_bundle(bundle)?;
    let cp = checkpoint.map(open_checkpoint).transpose()?;
    let report = eval_report(&b, split, cp.as_ref(), alpha, tau)?;
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = confusion_csv {
        fs::write(p, report.confusion_csv(&b.catalog)).with_context(|| format!("writing {}", p.display()))?;
    }
    if json {
        emit_json(&report)?;
    } else {
        let correct: u64 = (0..report.confusion.len()).map(|c| report.confusion[c][c]).sum();
        say!(
            "{}: top-1 {:.4} ({}/{})",
            report.split_name,
            report.top1_accuracy,
            correct,
            report.n_items
        );
        for (name, acc) in &report.per_class_accuracy {
            say!("  {name:<24} {acc:.4}");
        }
    }
    Ok(0)
}

fn sweep_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("alpha,top1\n");
    for (a, acc) in rows {
        out.push_str(&format!("{a},{acc}\n"));
    }
    out
}

fn cmd_sweep_alpha(
    json: bool,
    bundle: &Path,
    split: &str,
    checkpoint: &Path,
    grid: Option<&str>,
    tau: Option<f64>,
    out: Option<&Path>,
) -> Result<i32> {
    let grid = match grid {
        Some(g) => parse_grid(g)?,
        None => crate::evaluator::uniform_grid(11),
    };
    let b = open_bundle(bundle)?;
    let cp = open_checkpoint(checkpoint)?;
    let tau = tau.unwrap_or(cp.config.tau);
    fusion(0.5, tau)?;
    let text = compose_text(&b, &cp.prompts)?;
    let rows = alpha_sweep_with_text(&b, split, &text, Some(&cp.params), tau, &grid)?;
    let csv = sweep_csv(&rows);
    if let Some(p) = out {
        fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?;
    }
    if json {
        let v: Vec<Value> = rows
            .iter()
            .map(|(a, acc)| serde_json::json!({ "alpha": a, "top1": acc }))
            .collect();
        emit_json(&v)?;
    } else if out.is_none() {
        say_raw!("{csv}");
    }
    Ok(0)
}

/// One line of the ablation table.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub alpha: f64,
    /// `None` when the row needs a trained head and none was available.
    pub top1: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    json: bool,
    bundle: &Path,
    split: &str,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    alpha: Option<f64>,
    tau: Option<f64>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<i32> {
    let b = open_bundle(bundle)?;
    let cp = checkpoint.map(open_checkpoint).transpose()?;
    let run = match config {
        Some(p) => {
            let mut file = RunConfigFile::load(p)?;
            if let Some(s) = seed {
                file.train
                    .get_or_insert_with(Default::default)
                    .insert("seed".into(), s.into());
            }
            Some(file.resolve()?)
        }
        None => None,
    };
    let base_alpha = alpha
        .or(run.as_ref().map(|r| r.config.alpha))
        .or(cp.as_ref().map(|c| c.config.alpha))
        .unwrap_or(0.6);
    let base_tau = tau.or(cp.as_ref().map(|c| c.config.tau)).unwrap_or(0.1);
    let base = fusion(base_alpha, base_tau)?;

    let mut rows = Vec::new();
    for spec in AblationSpec::table_rows() {
        let (config, selection) = build_ablation_config(&spec, base)?;
        let text = compose_text(&b, &selection)?;
        let top1 = if config.alpha == 1.0 {
            Some(evaluate(&b, split, &text, None, &config)?.top1_accuracy)
        } else if let Some(run) = &run {
            let mut train_cfg = run.config.clone();
            train_cfg.alpha = config.alpha;
            let trained = train_with_prompts(&b, &train_cfg, selection)?;
            Some(evaluate(&b, split, &text, Some(&trained.params), &config)?.top1_accuracy)
        } else if let Some(cp) = &cp {
            Some(evaluate(&b, split, &text, Some(&cp.params), &config)?.top1_accuracy)
        } else {
            None
        };
        rows.push(AblationRow {
            spec,
            alpha: config.alpha,
            top1,
        });
    }

    let mut table = String::from("CLIP  VLM  LLM  Templates  alpha  top1\n");
    let mark = |b: bool| if b { "x" } else { "-" };
    for r in &rows {
        table.push_str(&format!(
            "{:<5} {:<4} {:<4} {:<10} {:<6} {}\n",
            mark(r.spec.use_clip_branch),
            mark(r.spec.use_vlm_branch),
            mark(r.spec.use_llm_descriptions),
            mark(r.spec.use_templates),
            r.alpha,
            r.top1.map_or("n/a".to_string(), |a| format!("{a:.4}")),
        ));
    }
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(&rows)? + "\n")
            .with_context(|| format!("writing {}", p.display()))?;
    }
    if json {
        emit_json(&rows)?;
    } else {
        say_raw!("{table}");
    }
    Ok(0)
}

fn cmd_synth(json: bool, args: &SynthArgs) -> Result<i32> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        n_classes: args.classes.unwrap_or(d.n_classes),
        n_train: args.n_train.unwrap_or(d.n_train),
        n_val: args.n_val.unwrap_or(d.n_val),
        n_test: args.n_test.unwrap_or(d.n_test),
        dim: args.dim.unwrap_or(d.dim),
        dim_prime: args.dim_prime.unwrap_or(d.dim_prime),
        m: args.prompts.unwrap_or(d.m),
        cluster_separation: args.separation.unwrap_or(d.cluster_separation),
        noise_sigma: args.sigma.unwrap_or(d.noise_sigma),
        domain_shift_angle: args.shift.unwrap_or(d.domain_shift_angle),
        seed: args.seed.unwrap_or(d.seed),
    };
    let bundle = generate(&spec).map_err(|e| invalid(e.to_string()))?;
    save_bundle(&bundle, &args.out)?;
    if json {
        emit_json(&serde_json::json!({ "out": args.out, "spec": spec }))?;
    } else {
        say!("wrote synthetic bundle to {}", args.out.display());
    }
    Ok(0)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let json = cli.json;
    match &cli.command {
        Command::Validate { bundle } => cmd_validate(json, bundle),
        Command::ComposeText { bundle, out, prompts } => cmd_compose_text(json, bundle, out, prompts),
        Command::Train(args) => cmd_train(json, args),
        Command::Eval {
            bundle,
            split,
            checkpoint,
            alpha,
            tau,
            out,
            confusion_csv,
        } => cmd_eval(
            json,
            bundle,
            split,
            checkpoint.as_deref(),
            *alpha,
            *tau,
            out.as_deref(),
            confusion_csv.as_deref(),
        ),
        Command::SweepAlpha {
            bundle,
            split,
            checkpoint,
            grid,
            tau,
            out,
        } => cmd_sweep_alpha(json, bundle, split, checkpoint, grid.as_deref(), *tau, out.as_deref()),
        Command::Ablate {
            bundle,
            split,
            checkpoint,
            config,
            alpha,
            tau,
            seed,
            out,
        } => cmd_ablate(
            json,
            bundle,
            split,
            checkpoint.as_deref(),
            config.as_deref(),
            *alpha,
            *tau,
            *seed,
            out.as_deref(),
        ),
        Command::Synth(args) => cmd_synth(json, args),
    }
}

/// Thread cap from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(s) if s.trim().is_empty() => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(0) | Err(_) => bail!("{THREADS_ENV} must be a positive integer, got {s:?}"),
            Ok(n) => Ok(Some(n)),
        },
        Err(_) => Ok(None),
    }
}

/// Runs a parsed command and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let result = threads_from_env().and_then(|threads| match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| anyhow!("building thread pool: {e}"))?
            .install(|| dispatch(&cli)),
        None => dispatch(&cli),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ValidationFailure>().is_some() {
                EXIT_INVALID
            } else {
                EXIT_ERROR
            }
        }
    }
}
