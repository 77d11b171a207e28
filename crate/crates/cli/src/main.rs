//! `cycletrack` command-line front end.
//!
//! Any argument of the form `--section.key=value` is treated as a config
//! override, e.g. `--train.total_epochs=3 --dca.switch_epoch=1`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use cycletrack::checkpoint;
use cycletrack::config::{parse_toml, RunConfig, Sources, SEED_ENV};
use cycletrack::cycle::{self, read_log, RunPaths, Trainer, Variant};
use cycletrack::data::{self, CorpusSpec, FrameSequence};
use cycletrack::eval::{self, MetricsReport, TrackResult};
use cycletrack::model::{OracleModel, TrackModel, Tracker};
use cycletrack::plot::{moving_average, Chart, Series};
use cycletrack::Error;

#[derive(Parser)]
#[command(name = "cycletrack", version, about = "Self-supervised cycle tracking with dual-mode contextual tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a spec file.
    Generate(GenerateArgs),
    /// Train a tracker with cycle consistency.
    Train(TrainArgs),
    /// Evaluate a checkpoint, the oracle, or retrained ablation variants.
    Eval(EvalArgs),
    /// Draw loss and metric curves as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Corpus spec (TOML); defaults apply to omitted keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Parent directory; the corpus lands in `<out>/<name>`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the spec's sequence count.
    #[arg(long)]
    count: Option<usize>,
    /// Overrides the spec's corpus name.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the published 150-epoch schedule.
    #[arg(long)]
    paper_schedule: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training corpus; falls back to `data.train_dir`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory; falls back to `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
    /// Continue from `<out>/checkpoint.safetensors`.
    #[arg(long)]
    resume: bool,
    /// Stop after this many steps, leaving a resumable checkpoint.
    #[arg(long, hide = true)]
    stop_after: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, conflicts_with_all = ["oracle", "ablate"])]
    checkpoint: Option<PathBuf>,
    /// Evaluate a tracker that reads the ground truth.
    #[arg(long)]
    oracle: bool,
    /// Retrain and evaluate these variants next to the full model.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<Variant>,
    /// Seeds for `--ablate`; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Training corpus for `--ablate`; falls back to `data.train_dir`.
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Evaluation corpus; falls back to `data.eval_dir`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Training log(s) to draw loss curves from.
    #[arg(long)]
    log: Vec<PathBuf>,
    /// metrics.json file(s) to draw success and precision curves from.
    #[arg(long)]
    metrics: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Moving-average window for loss curves.
    #[arg(long, default_value_t = 50)]
    smooth: usize,
}

/// Splits `--a.b=c` overrides from the arguments clap should see.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let is_override = a
            .strip_prefix("--")
            .and_then(|s| s.split_once('='))
            .is_some_and(|(k, _)| k.contains('.'));
        if is_override {
            overrides.push(a[2..].to_string());
        } else {
            rest.push(a);
        }
    }
    (rest, overrides)
}

fn resolve(args: &ConfigArgs, overrides: &[String], file_fallback: Option<&Path>) -> cycletrack::Result<RunConfig> {
    let mut all = overrides.to_vec();
    if let Some(seed) = args.seed {
        all.push(format!("seed={seed}"));
    }
    RunConfig::resolve(&Sources {
        paper_schedule: args.paper_schedule,
        file: args.config.as_deref().or(file_fallback),
        overrides: &all,
        env_seed: std::env::var(SEED_ENV).ok(),
    })
}

fn require_dir(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> cycletrack::Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::config(what, "no directory given on the command line or in the config"))
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    let mut spec: CorpusSpec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::config("spec", format!("{}: {e}", p.display())))?;
            parse_toml(&text)?
        }
        None => CorpusSpec::default(),
    };
    if let Some(n) = a.count {
        spec.count = n;
    }
    if let Some(n) = a.name {
        spec.name = n;
    }
    spec.validate()?;
    let seed = match a.seed {
        Some(s) => s,
        None => match std::env::var(SEED_ENV) {
            Ok(raw) => raw
                .trim()
                .parse()
                .map_err(|_| Error::config("seed", format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?,
            Err(_) => 0,
        },
    };
    let root = data::generate_corpus(&spec, seed, &a.out)?;
    println!("{} sequences written to {}", spec.count, root.display());
    Ok(())
}

fn train_run(cfg: &RunConfig, sequences: &[FrameSequence], out: &Path, resume: bool, stop_after: Option<u64>) -> anyhow::Result<Trainer> {
    fs::create_dir_all(out).map_err(Error::from)?;
    let paths = RunPaths::new(out);
    let trainer = if resume {
        let t = Trainer::resume(&paths.checkpoint, cfg.train_config())?;
        log::info!("resuming at step {}", t.state.global_step + 1);
        t
    } else {
        let model = Tracker::new(&cfg.model_config(), cfg.seed, DType::F32, &Device::Cpu)?;
        Trainer::new(model, cfg.train_config())?
    };
    fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(Error::from)?;
    Ok(cycle::train(trainer, sequences, out, stop_after)?)
}

fn cmd_train(a: TrainArgs, overrides: &[String]) -> anyhow::Result<()> {
    let out_flag = a.out.clone();
    // On resume the frozen config of the run is the base.
    let frozen = out_flag.as_ref().map(|o| o.join("config.toml")).filter(|p| a.resume && p.is_file());
    let mut cfg = resolve(&a.cfg, overrides, frozen.as_deref())?;
    if let Some(v) = a.variant {
        cfg.train.variant = v;
    }
    if let Some(o) = &out_flag {
        cfg.output_dir = o.clone();
    }
    if let Some(d) = &a.data {
        cfg.data.train_dir = Some(d.clone());
    }
    cfg.validate()?;
    if a.dry_run {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let data_dir = require_dir(None, &cfg.data.train_dir, "data.train_dir")?;
    let sequences = data::load_dataset(&data_dir)?;
    let out = cfg.output_dir.clone();
    let t = train_run(&cfg, &sequences, &out, a.resume, a.stop_after)?;
    println!("trained {} steps into {}", t.state.global_step, out.display());
    Ok(())
}

fn curves_svg(dir: &Path, runs: &[(String, MetricsReport)]) -> anyhow::Result<()> {
    let success = Chart {
        title: "Success plot".into(),
        x_label: "Overlap threshold".into(),
        y_label: "Success rate".into(),
        x_range: Some((0.0, 1.0)),
        y_range: Some((0.0, 1.0)),
        series: runs
            .iter()
            .map(|(label, r)| Series {
                label: format!("{label} [{:.3}]", r.auc),
                points: r
                    .curves
                    .success
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (i as f64 / (r.curves.success.len().max(2) - 1) as f64, v))
                    .collect(),
            })
            .collect(),
    };
    let precision = Chart {
        title: "Precision plot".into(),
        x_label: "Location error threshold (px)".into(),
        y_label: "Precision".into(),
        x_range: Some((0.0, eval::PRECISION_CURVE_MAX_PX as f64)),
        y_range: Some((0.0, 1.0)),
        series: runs
            .iter()
            .map(|(label, r)| Series {
                label: format!("{label} [{:.3}]", r.precision),
                points: r.curves.precision.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect(),
            })
            .collect(),
    };
    fs::create_dir_all(dir).map_err(Error::from)?;
    fs::write(dir.join("success.svg"), success.render()).map_err(Error::from)?;
    fs::write(dir.join("precision.svg"), precision.render()).map_err(Error::from)?;
    Ok(())
}

fn evaluate_into<M: TrackModel + ?Sized>(
    model: &M,
    sequences: &[FrameSequence],
    cfg: &RunConfig,
    out: &Path,
    label: &str,
) -> anyhow::Result<MetricsReport> {
    let (report, results): (MetricsReport, Vec<TrackResult>) = eval::evaluate(model, sequences, &cfg.eval)?;
    fs::create_dir_all(out).map_err(Error::from)?;
    eval::write_results(out, sequences, &results)?;
    eval::write_report(&out.join("metrics.json"), &report)?;
    curves_svg(out, &[(label.to_string(), report.clone())])?;
    println!(
        "{label}: auc {:.4}  precision {:.4}  norm_precision {:.4}  mean_iou {:.4}  fps {:.1}",
        report.auc, report.precision, report.norm_precision, report.mean_iou, report.fps
    );
    Ok(report)
}

fn cmd_eval(a: EvalArgs, overrides: &[String]) -> anyhow::Result<()> {
    let mut cfg = resolve(&a.cfg, overrides, None)?;
    if let Some(d) = &a.data {
        cfg.data.eval_dir = Some(d.clone());
    }
    let eval_dir = require_dir(None, &cfg.data.eval_dir, "data.eval_dir")?;
    if a.oracle {
        let sequences = data::load_dataset(&eval_dir)?;
        let mut oracle = OracleModel::new(cfg.model.encoder.clone());
        for s in &sequences {
            let gt = s
                .full_annotations
                .clone()
                .ok_or_else(|| anyhow!("sequence {} has no full annotations", s.id))?;
            oracle.insert(s.id.clone(), gt);
        }
        evaluate_into(&oracle, &sequences, &cfg, &a.out, "oracle")?;
        return Ok(());
    }
    if !a.ablate.is_empty() {
        return ablate(a, cfg, eval_dir);
    }
    let ckpt = a
        .checkpoint
        .ok_or_else(|| Error::config("checkpoint", "pass --checkpoint, --oracle or --ablate"))?;
    // Check the checkpoint before touching the data so a bad path fails fast.
    let loaded = checkpoint::load(&ckpt, &Device::Cpu)?;
    let sequences = data::load_dataset(&eval_dir)?;
    evaluate_into(&loaded.tracker, &sequences, &cfg, &a.out, "tracker")?;
    Ok(())
}

fn ablate(a: EvalArgs, cfg: RunConfig, eval_dir: PathBuf) -> anyhow::Result<()> {
    let train_dir = require_dir(a.train_data.clone(), &cfg.data.train_dir, "data.train_dir")?;
    let train_seqs = data::load_dataset(&train_dir)?;
    let eval_seqs = data::load_dataset(&eval_dir)?;
    let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds.clone() };
    let mut variants = vec![Variant::Full];
    for v in &a.ablate {
        if !variants.contains(v) {
            variants.push(*v);
        }
    }
    let mut summary = serde_json::Map::new();
    for v in &variants {
        let mut per_seed = Vec::new();
        for &seed in &seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            run_cfg.train.variant = *v;
            let dir = a.out.join(v.as_str()).join(format!("seed{seed}"));
            run_cfg.output_dir = dir.clone();
            let t = train_run(&run_cfg, &train_seqs, &dir, false, None)?;
            let label = format!("{} seed {seed}", v.as_str());
            let r = evaluate_into(&t.model, &eval_seqs, &run_cfg, &dir, &label)?;
            per_seed.push(serde_json::json!({ "seed": seed, "mean_iou": r.mean_iou, "auc": r.auc }));
        }
        let mean = |key: &str| per_seed.iter().map(|r| r[key].as_f64().unwrap_or(0.0)).sum::<f64>() / per_seed.len() as f64;
        summary.insert(
            v.as_str().to_string(),
            serde_json::json!({ "mean_iou": mean("mean_iou"), "auc": mean("auc"), "runs": per_seed }),
        );
    }
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    fs::write(a.out.join("ablation.json"), &text).map_err(Error::from)?;
    for (k, v) in &summary {
        println!("{k:>10}: mean_iou {:.4}  auc {:.4}", v["mean_iou"].as_f64().unwrap_or(0.0), v["auc"].as_f64().unwrap_or(0.0));
    }
    Ok(())
}

fn label_of(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_plot(a: PlotArgs) -> anyhow::Result<()> {
    if a.log.is_empty() && a.metrics.is_empty() {
        return Err(Error::config("plot", "pass at least one --log or --metrics").into());
    }
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    if !a.log.is_empty() {
        let mut series = Vec::new();
        for p in &a.log {
            let recs = read_log(p).with_context(|| format!("reading {}", p.display()))?;
            let kept: Vec<_> = recs.iter().filter(|r| !r.skipped).collect();
            let loss: Vec<f64> = kept.iter().map(|r| r.loss).collect();
            let smooth = moving_average(&loss, a.smooth);
            series.push(Series {
                label: label_of(p),
                points: kept.iter().zip(smooth).map(|(r, l)| (r.step as f64, l)).collect(),
            });
        }
        let chart = Chart {
            title: "Training loss".into(),
            x_label: "Step".into(),
            y_label: "Cycle loss (moving average)".into(),
            x_range: None,
            y_range: None,
            series,
        };
        fs::write(a.out.join("loss.svg"), chart.render()).map_err(Error::from)?;
    }
    if !a.metrics.is_empty() {
        let mut runs = Vec::new();
        for p in &a.metrics {
            runs.push((label_of(p), eval::read_report(p).with_context(|| format!("reading {}", p.display()))?));
        }
        curves_svg(&a.out, &runs)?;
    }
    println!("plots written to {}", a.out.display());
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map(|e| e.exit_code() as u8)
        .unwrap_or(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate(a) => {
            if !overrides.is_empty() {
                Err(Error::config(&overrides[0], "generate takes no config overrides").into())
            } else {
                cmd_generate(a)
            }
        }
        Command::Train(a) => cmd_train(a, &overrides),
        Command::Eval(a) => cmd_eval(a, &overrides),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
