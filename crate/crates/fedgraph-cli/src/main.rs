//! Command-line driver: `run` executes one experiment, `sweep` runs the
//! built-in ablation axes (prune delta, prune mode, factor mix), and
//! `inspect` prints the layer manifest of a saved checkpoint.
//!
//! Exit codes: 0 success, 2 configuration or format problems, 1 runtime
//! failures. Set `FEDGRAPH_LOG` to `error`, `info`, or `debug` for
//! diagnostics on stderr; metrics and summaries go to stdout and the
//! output directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use fedgraph_core::aggregation::Strategy;
use fedgraph_core::config::{load_config, ExperimentConfig};
use fedgraph_core::error::{Error, Result};
use fedgraph_core::federation::{run_experiment_with, RoundRecord};
use fedgraph_core::metrics::read_metrics;
use fedgraph_core::nn::{read_checkpoint, LayerKind, ModelParams};

#[derive(Parser)]
#[command(name = "fedgraph", version, about = "Federated-learning simulation with graph-kernel aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file.
    Run(RunArgs),
    /// Run an ablation sweep over one axis and rank the results.
    Sweep(SweepArgs),
    /// Print the layer manifest of a model checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. --set federation.K=9 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; overrides output.dir from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for client training (0 = one per core).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    base: RunArgs,
    /// Which knob to sweep.
    #[arg(long)]
    axis: Axis,
    /// Axis values; defaults to the built-in set. For --axis mix, each
    /// value is an s,top,w triple such as 0.4,0.3,0.3 (repeatable).
    #[arg(long = "values", value_name = "VALUE")]
    values: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Axis {
    /// Fixed prune threshold delta.
    Delta,
    /// Prune mode: similarity vs dissimilarity.
    Mode,
    /// Factor mix (s, top, w).
    Mix,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint file to describe.
    checkpoint: PathBuf,
}

fn main() {
    // Restore default SIGPIPE handling so `fedgraph ... | head` ends the
    // process quietly instead of panicking inside a println.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let outcome = init_logging().and_then(|_| match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Inspect(args) => cmd_inspect(&args),
    });
    match outcome {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::exit(e.exit_code());
        }
    }
}

fn init_logging() -> Result<()> {
    let level = match std::env::var("FEDGRAPH_LOG") {
        Err(_) => log::LevelFilter::Warn,
        Ok(v) => match v.as_str() {
            "error" => log::LevelFilter::Error,
            "info" => log::LevelFilter::Info,
            "debug" => log::LevelFilter::Debug,
            other => {
                return Err(Error::Config(format!(
                    "FEDGRAPH_LOG must be error, info or debug, got '{}'",
                    other
                )))
            }
        },
    };
    env_logger::Builder::new()
        .format_timestamp(None)
        .filter_level(level)
        .init();
    Ok(())
}

fn parse_set_flags(flags: &[String]) -> Result<Vec<(String, String)>> {
    flags
        .iter()
        .map(|flag| {
            flag.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| {
                    Error::Config(format!("--set expects KEY=VALUE, got '{}'", flag))
                })
        })
        .collect()
}

/// Resolve a config from file + overrides, with `extra` axis overrides
/// applied after the user's own --set flags.
fn resolve(args: &RunArgs, extra: &[(String, String)]) -> Result<ExperimentConfig> {
    let source = fs::read_to_string(&args.config).map_err(|e| {
        Error::Config(format!("cannot read config {}: {}", args.config.display(), e))
    })?;
    let mut overrides = parse_set_flags(&args.set)?;
    overrides.extend_from_slice(extra);
    if let Some(seed) = args.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    let mut cfg = load_config(&source, &overrides)?;
    if let Some(out) = &args.out {
        cfg.output_dir = Some(out.clone());
    }
    if let Some(workers) = args.workers {
        cfg.workers = workers;
    }
    Ok(cfg)
}

fn print_banner(cfg: &ExperimentConfig) {
    println!("resolved configuration:");
    for line in cfg.to_toml_string().lines() {
        if line.is_empty() {
            println!();
        } else {
            println!("  {}", line);
        }
    }
}

fn round_line(rec: &RoundRecord, total_rounds: usize) -> String {
    let alpha: Vec<String> = rec.alpha.iter().map(|a| format!("{:.3}", a)).collect();
    format!(
        "round {:>3}/{}  loss {:.4}  {} {:.4}  alpha [{}]",
        rec.round,
        total_rounds,
        rec.val_loss,
        rec.score_name,
        rec.score,
        alpha.join(" ")
    )
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args, &[])?;
    print_banner(&cfg);
    let total = cfg.rounds;
    let run = run_experiment_with(&cfg, |rec| println!("{}", round_line(rec, total)))?;
    let last = run.records.last().expect("at least one round");
    println!(
        "done: {} rounds, final loss {:.4}, final {} {:.4}",
        total, last.val_loss, last.score_name, last.score
    );
    if let Some(dir) = &cfg.output_dir {
        println!("artifacts in {}", dir.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

/// One sweep setting: directory label plus the overrides that produce it.
struct Setting {
    label: String,
    overrides: Vec<(String, String)>,
    /// Mix triple when sweeping the mix axis, for the fedavg cross-check.
    mix: Option<(f64, f64, f64)>,
}

fn axis_settings(axis: Axis, values: &[String]) -> Result<Vec<Setting>> {
    let force_fedgraph = ("strategy.name".to_string(), "fedgraph".to_string());
    let defaults: Vec<String> = match axis {
        Axis::Delta => vec!["0.001".into(), "0.01".into(), "0.1".into()],
        Axis::Mode => vec!["similarity".into(), "dissimilarity".into()],
        Axis::Mix => vec![
            "1,0,0".into(),
            "0.4,0.3,0.3".into(),
            "0.2,0.6,0.2".into(),
            "0.2,0.2,0.6".into(),
        ],
    };
    let values = if values.is_empty() { &defaults } else { values };
    values
        .iter()
        .map(|v| match axis {
            Axis::Delta => {
                let delta: f64 = v.parse().map_err(|_| {
                    Error::Config(format!("delta value '{}' is not a number", v))
                })?;
                if !(delta.is_finite() && delta >= 0.0) {
                    return Err(Error::Config(format!(
                        "delta must be finite and >= 0, got {}",
                        v
                    )));
                }
                Ok(Setting {
                    label: format!("delta_{}", v),
                    overrides: vec![
                        force_fedgraph.clone(),
                        ("prune.delta".to_string(), v.clone()),
                    ],
                    mix: None,
                })
            }
            Axis::Mode => {
                if v != "similarity" && v != "dissimilarity" {
                    return Err(Error::Config(format!(
                        "mode value must be similarity or dissimilarity, got '{}'",
                        v
                    )));
                }
                Ok(Setting {
                    label: format!("mode_{}", v),
                    overrides: vec![
                        force_fedgraph.clone(),
                        ("prune.mode".to_string(), v.clone()),
                    ],
                    mix: None,
                })
            }
            Axis::Mix => {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| {
                        Error::Config(format!("mix value '{}' is not an s,top,w triple", v))
                    })?;
                let [s, top, w] = parts.as_slice() else {
                    return Err(Error::Config(format!(
                        "mix value '{}' must have exactly three components",
                        v
                    )));
                };
                Ok(Setting {
                    label: format!("mix_{}", v.replace(',', "_").replace(' ', "")),
                    overrides: vec![
                        force_fedgraph.clone(),
                        ("strategy.mix.s".to_string(), s.to_string()),
                        ("strategy.mix.top".to_string(), top.to_string()),
                        ("strategy.mix.w".to_string(), w.to_string()),
                    ],
                    mix: Some((*s, *top, *w)),
                })
            }
        })
        .collect()
}

struct SweepResult {
    label: String,
    score_name: &'static str,
    score: f64,
    loss: f64,
}

fn run_setting(cfg: &ExperimentConfig, label: &str) -> Result<SweepResult> {
    let run = run_experiment_with(cfg, |_| {})?;
    let last = run.records.last().expect("at least one round");
    println!(
        "setting {}: final loss {:.4}, final {} {:.4}",
        label, last.val_loss, last.score_name, last.score
    );
    Ok(SweepResult {
        label: label.to_string(),
        score_name: last.score_name,
        score: last.score,
        loss: last.val_loss,
    })
}

/// Compare a mix (1,0,0) run against its fedavg twin: the filtered metric
/// streams (factor vectors aside, which fedavg never emits) and the final
/// checkpoints must match byte for byte.
fn cross_check_fedavg(root: &Path, fedgraph_dir: &str, fedavg_dir: &str) -> Result<()> {
    let factor_metrics = ["alpha_s", "alpha_top", "alpha_w"];
    let read_rows = |dir: &str| -> Result<Vec<_>> {
        let content = fs::read_to_string(root.join(dir).join("metrics.csv"))?;
        Ok(read_metrics(&content)?
            .into_iter()
            .filter(|r| !factor_metrics.contains(&r.metric.as_str()))
            .collect())
    };
    if read_rows(fedgraph_dir)? != read_rows(fedavg_dir)? {
        return Err(Error::Internal(format!(
            "mix (1,0,0) metrics diverge from fedavg ({} vs {})",
            fedgraph_dir, fedavg_dir
        )));
    }
    let ckpt = |dir: &str| fs::read(root.join(dir).join("model_final.fgck"));
    if ckpt(fedgraph_dir)? != ckpt(fedavg_dir)? {
        return Err(Error::Internal(
            "mix (1,0,0) final checkpoint diverges from fedavg".into(),
        ));
    }
    println!("cross-check passed: mix (1,0,0) output matches fedavg");
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let settings = axis_settings(args.axis, &args.values)?;
    // Resolve once without axis overrides to find the sweep root and echo
    // the base configuration.
    let base = resolve(&args.base, &settings[0].overrides)?;
    let root = base.output_dir.clone().ok_or_else(|| {
        Error::Config("sweep needs an output directory (--out or output.dir)".into())
    })?;
    print_banner(&base);
    println!("sweeping {} settings under {}", settings.len(), root.display());

    let mut results = Vec::new();
    for setting in &settings {
        let mut cfg = resolve(&args.base, &setting.overrides)?;
        cfg.output_dir = Some(root.join(&setting.label));
        results.push(run_setting(&cfg, &setting.label)?);

        if setting.mix == Some((1.0, 0.0, 0.0)) {
            let mut avg = cfg.clone();
            avg.strategy = Strategy::FedAvg;
            avg.output_dir = Some(root.join("fedavg_check"));
            results.push(run_setting(&avg, "fedavg_check")?);
            cross_check_fedavg(&root, &setting.label, "fedavg_check")?;
        }
    }

    results.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut comparison = String::from("setting,score_metric,final_score,final_loss\n");
    for r in &results {
        comparison.push_str(&format!(
            "{},{},{},{}\n",
            r.label, r.score_name, r.score, r.loss
        ));
    }
    let comparison_path = root.join("comparison.csv");
    fs::write(&comparison_path, comparison)?;
    println!("comparison written to {}", comparison_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Inspect
// ---------------------------------------------------------------------------

fn layer_description(model: &ModelParams, idx: usize) -> String {
    let layer = &model.layers()[idx];
    let act = layer.spec.activation.name();
    match layer.spec.kind {
        LayerKind::Dense { n_in, n_out } => format!("dense {} -> {} ({})", n_in, n_out, act),
        LayerKind::Conv2d {
            kernel_h,
            kernel_w,
            c_in,
            c_out,
        } => format!(
            "conv2d {}x{} {} -> {} ({})",
            kernel_h, kernel_w, c_in, c_out, act
        ),
    }
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let bytes = fs::read(&args.checkpoint).map_err(|e| {
        Error::Config(format!(
            "cannot read checkpoint {}: {}",
            args.checkpoint.display(),
            e
        ))
    })?;
    let model = read_checkpoint(&mut bytes.as_slice())?;

    println!(
        "checkpoint: {} layers, {} parameters",
        model.layers().len(),
        model.n_params()
    );
    println!("{:<6} {:<32} {:>8}  {:>14}", "layer", "kind", "params", "l1_norm");
    let mut total_params = 0usize;
    let mut total_norm = 0.0f64;
    for idx in 0..model.layers().len() {
        let layer = &model.layers()[idx];
        let params = layer.weights.len() + layer.bias.len();
        let norm: f64 = layer.weights.data().iter().map(|w| w.abs()).sum::<f64>()
            + layer.bias.iter().map(|b| b.abs()).sum::<f64>();
        total_params += params;
        total_norm += norm;
        println!(
            "{:<6} {:<32} {:>8}  {:>14.6}",
            idx,
            layer_description(&model, idx),
            params,
            norm
        );
    }
    println!("{:<6} {:<32} {:>8}  {:>14.6}", "total", "", total_params, total_norm);
    Ok(())
}
