//! Command-line entry points: dataset generation, training, evaluation,
//! explanation export, explanation-quality metrics, and the r-sweep study.

use crate::config::{RunConfig, TaskKind};
use crate::data::{generate_planted_dataset, load_dataset, load_image, read_manifest, SplitName};
use crate::error::{Error, Result};
use crate::explain::{export_json, render_overlay, top_percentile_subgraph};
use crate::metrics::{
    bundle_to_csv, compute_metrics, insertion_curve, kendall_tau, macro_f1, r_squared,
    render_insertion_plot, InsertionOrder, MetricsOptions, Perturbation,
};
use crate::model::{Model, Prediction, Target};
use crate::trainer::{train, Checkpoint, Split};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "iwivig", version, about = "Window vision GNN with an interpretable graph bottleneck")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic planted-dependency dataset.
    GenerateData(GenerateArgs),
    /// Train a model from a config file and a dataset manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Export the explanation (JSON + overlay) for one image.
    Explain(ExplainArgs),
    /// Compute explanation-quality metrics over a split.
    Metrics(MetricsArgs),
    /// Train and evaluate at several edge-prior values r, tabulating
    /// goodness of fit, edge-weight spread, and insertion AUC.
    RSweep(RSweepArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 128)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration JSON; defaults to the desk-scale preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Optional JSON output path (metrics always print to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    image_id: Option<String>,
    #[arg(long, default_value_t = 5.0)]
    percentile: f64,
    #[arg(long)]
    out_json: PathBuf,
    #[arg(long)]
    out_png: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    percentile: f64,
    #[arg(long, default_value_t = 20)]
    insertion_steps: usize,
    #[arg(long, default_value_t = 32)]
    ig_steps: usize,
    #[arg(long, default_value_t = 32)]
    infidelity_samples: usize,
    /// Cap attribution-based metrics to this many images.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write insertion-curve plots.
    #[arg(long)]
    plots: bool,
}

#[derive(Args)]
struct RSweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated prior values.
    #[arg(long, default_value = "0.3,0.5,0.7", value_delimiter = ',')]
    r: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 20)]
    insertion_steps: usize,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> SplitName {
        match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::Val => SplitName::Val,
            SplitArg::Test => SplitName::Test,
        }
    }
}

/// Run the CLI; returns the process exit code (0 success, 1 usage, 2 data
/// error, 3 numeric failure).
pub fn run(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::RSweep(a) => cmd_r_sweep(a),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => {
            let bytes = std::fs::read(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_slice::<RunConfig>(&bytes)
                .map_err(|e| Error::Config(format!("bad config {}: {e}", p.display())))?
        }
        None => RunConfig::desk(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let manifest = generate_planted_dataset(a.n, a.side, a.seed, &a.out)?;
    println!(
        "wrote {} samples ({} train / {} val / {} test) under {}",
        manifest.records.len(),
        manifest.records.iter().filter(|r| r.split == SplitName::Train).count(),
        manifest.records.iter().filter(|r| r.split == SplitName::Val).count(),
        manifest.records.iter().filter(|r| r.split == SplitName::Test).count(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.train.epochs = epochs;
    }
    let manifest = read_manifest(&a.data)?;
    let dataset = load_dataset(&manifest, cfg.model.input_side)?;
    let mut model = Model::init(cfg.model.clone(), cfg.train.seed)?;
    let outcome = train(&mut model, &dataset.train, &dataset.val, &cfg.train)?;
    for e in &outcome.history {
        match e.validation_metric {
            Some(v) => println!(
                "epoch {:>3}  lr {:.3e}  loss {:.4} (task {:.4} info {:.4})  val {:.4}",
                e.epoch, e.lr, e.mean_loss.total, e.mean_loss.task_loss, e.mean_loss.info_loss, v
            ),
            None => println!(
                "epoch {:>3}  lr {:.3e}  loss {:.4} (task {:.4} info {:.4})",
                e.epoch, e.lr, e.mean_loss.total, e.mean_loss.task_loss, e.mean_loss.info_loss
            ),
        }
    }
    outcome.checkpoint.save(&a.out)?;
    println!(
        "saved checkpoint {} (best validation {:.4} at epoch {})",
        a.out.display(),
        outcome.best_metric,
        outcome.checkpoint.meta.epoch
    );
    Ok(())
}

fn load_checkpoint_model(path: &Path) -> Result<(Model, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = ckpt.meta.config.clone();
    let (model, _) = ckpt.into_model()?;
    Ok((model, cfg))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let (model, cfg) = load_checkpoint_model(&a.checkpoint)?;
    let manifest = read_manifest(&a.data)?;
    let dataset = load_dataset(&manifest, cfg.model.input_side)?;
    let split = dataset.split(a.split.into());
    if split.is_empty() {
        return Err(Error::Data("selected split is empty".into()));
    }
    let preds = crate::trainer::predict_split(&model, split)?;
    let report = evaluation_report(&model, split, &preds)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    print!("{text}");
    if let Some(out) = a.out {
        std::fs::write(out, text)?;
    }
    Ok(())
}

fn evaluation_report(
    model: &Model,
    split: &Split,
    preds: &[Prediction],
) -> Result<serde_json::Value> {
    Ok(match model.config.task {
        TaskKind::Classification { num_classes } => {
            let pred_classes: Vec<usize> = preds
                .iter()
                .map(|p| match p {
                    Prediction::Classification { class, .. } => *class,
                    _ => 0,
                })
                .collect();
            let targets: Vec<usize> = split
                .samples
                .iter()
                .map(|s| match s.target {
                    Target::Class(c) => c,
                    Target::Value(_) => 0,
                })
                .collect();
            json!({
                "task": "classification",
                "n": split.len(),
                "accuracy": round6(crate::metrics::accuracy(&pred_classes, &targets)),
                "f1": round6(macro_f1(&pred_classes, &targets, num_classes)),
            })
        }
        TaskKind::Regression => {
            let values: Vec<f64> = preds.iter().map(|p| p.value().unwrap_or(0.0)).collect();
            let targets: Vec<f64> = split
                .samples
                .iter()
                .map(|s| match s.target {
                    Target::Value(v) => v,
                    Target::Class(c) => c as f64,
                })
                .collect();
            json!({
                "task": "regression",
                "n": split.len(),
                "r2": round6(r_squared(&values, &targets)),
                "kendall_tau": round6(kendall_tau(&values, &targets)),
            })
        }
    })
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let (model, cfg) = load_checkpoint_model(&a.checkpoint)?;
    let image = load_image(&a.image, cfg.model.input_side)?;
    let image_id = a.image_id.unwrap_or_else(|| {
        a.image.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    });
    let (_, explanation) = model.predict_with_explanation(&image, &image_id)?;
    let sub = top_percentile_subgraph(&explanation, a.percentile)?;
    export_json(&sub, &a.out_json)?;
    println!("wrote {} ({} edges)", a.out_json.display(), sub.num_edges());
    if let Some(png) = a.out_png {
        render_overlay(&image, &sub, &png)?;
        println!("wrote {}", png.display());
    }
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> Result<()> {
    let (model, cfg) = load_checkpoint_model(&a.checkpoint)?;
    let manifest = read_manifest(&a.data)?;
    let dataset = load_dataset(&manifest, cfg.model.input_side)?;
    let split = dataset.split(a.split.into());
    if split.is_empty() {
        return Err(Error::Data("selected split is empty".into()));
    }
    let opts = MetricsOptions {
        percentile: a.percentile,
        insertion_steps: a.insertion_steps,
        ig_steps: a.ig_steps,
        infidelity_samples: a.infidelity_samples,
        infidelity_perturbation: Perturbation::SquarePatch { patch_px: 16, baseline: 0.0 },
        seed: a.seed,
        attribution_limit: a.limit,
        ..MetricsOptions::default()
    };
    let bundle = compute_metrics(&model, split, &opts)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let report = json!({
        "ig": bundle.ig,
        "occlusion": bundle.occlusion,
    });
    std::fs::write(
        a.out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    std::fs::write(a.out_dir.join("metrics.csv"), bundle_to_csv(&bundle))?;
    if a.plots {
        render_insertion_plot(
            &bundle.ig.insertion_desc,
            &bundle.ig.insertion_asc,
            &a.out_dir.join("insertion.png"),
        )?;
    }
    println!(
        "insertion auc desc {:.4} asc {:.4}; infidelity ig {:.4e} occ {:.4e}; pq ig {:.4} occ {:.4}{}",
        bundle.ig.insertion_desc.auc,
        bundle.ig.insertion_asc.auc,
        bundle.ig.infidelity,
        bundle.occlusion.infidelity,
        bundle.ig.pq_sparsity,
        bundle.occlusion.pq_sparsity,
        bundle
            .ig
            .planted_recall
            .map(|r| format!("; planted recall {r:.4}"))
            .unwrap_or_default()
    );
    println!("wrote {}", a.out_dir.join("metrics.json").display());
    Ok(())
}

fn cmd_r_sweep(a: RSweepArgs) -> Result<()> {
    let base = load_config(&a.config)?;
    if a.r.is_empty() {
        return Err(Error::Config("r-sweep needs at least one r value".into()));
    }
    if a.r.iter().any(|r| !(0.0 < *r && *r < 1.0)) {
        return Err(Error::Config("r values must lie in (0, 1)".into()));
    }
    let manifest = read_manifest(&a.data)?;
    let dataset = load_dataset(&manifest, base.model.input_side)?;
    std::fs::create_dir_all(&a.out_dir)?;

    let mut rows = Vec::new();
    for &r in &a.r {
        let mut cfg = base.clone();
        cfg.model.bottleneck.r = r;
        if let Some(seed) = a.seed {
            cfg.train.seed = seed;
        }
        if let Some(epochs) = a.epochs {
            cfg.train.epochs = epochs;
        }
        let mut model = Model::init(cfg.model.clone(), cfg.train.seed)?;
        let outcome = train(&mut model, &dataset.train, &dataset.val, &cfg.train)?;
        let (best_model, _) = outcome.checkpoint.into_model()?;

        let fit = crate::trainer::goodness_of_fit(&best_model, &dataset.test)?;
        let weight_sd = edge_weight_sd(&best_model, &dataset.test)?;
        let curve = insertion_curve(
            &best_model,
            &dataset.test,
            InsertionOrder::Descending,
            a.insertion_steps,
        )?;
        println!(
            "r {:.2}  weight_sd {:.6}  goodness_of_fit {:.4}  auc {:.4}",
            r, weight_sd, fit, curve.auc
        );
        rows.push(json!({
            "r": r,
            "weight_sd": round6(weight_sd),
            "goodness_of_fit": round6(fit),
            "auc": round6(curve.auc),
        }));
    }
    let report = json!({ "rows": rows });
    let text = serde_json::to_string_pretty(&report)? + "\n";
    std::fs::write(a.out_dir.join("r_sweep.json"), &text)?;
    let mut csv = String::from("r,weight_sd,goodness_of_fit,auc\n");
    for row in report["rows"].as_array().unwrap() {
        csv.push_str(&format!(
            "{:.2},{:.6},{:.6},{:.6}\n",
            row["r"].as_f64().unwrap(),
            row["weight_sd"].as_f64().unwrap(),
            row["goodness_of_fit"].as_f64().unwrap(),
            row["auc"].as_f64().unwrap(),
        ));
    }
    std::fs::write(a.out_dir.join("r_sweep.csv"), csv)?;
    println!("wrote {}", a.out_dir.join("r_sweep.json").display());
    Ok(())
}

/// Standard deviation of the bottleneck edge probabilities over a split.
fn edge_weight_sd(model: &Model, split: &Split) -> Result<f64> {
    use rayon::prelude::*;
    let all: Vec<Vec<f64>> = split
        .samples
        .par_iter()
        .map(|s| model.embed(&s.image).map(|c| c.p))
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<f64> = all.into_iter().flatten().collect();
    if flat.is_empty() {
        return Err(Error::Data("no edges to take a deviation over".into()));
    }
    let mean = flat.iter().sum::<f64>() / flat.len() as f64;
    let var = flat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / flat.len() as f64;
    Ok(var.sqrt())
}
