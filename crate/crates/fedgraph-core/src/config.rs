//! Experiment configuration: TOML schema, dotted-key overrides, validation,
//! and the canonical resolved echo.
//!
//! Files stay sparse; every key has a default except where a strategy
//! demands a choice. Overrides (`--set key=value`) patch the raw TOML table
//! before deserialization, so they obey the same schema and validation as
//! file keys.

use std::path::PathBuf;

use serde::Deserialize;

use crate::aggregation::{FactorMix, FedGraphConfig, GravityReduce, Strategy};
use crate::error::{Error, Result};
use crate::graph::{PruneConfig, PruneMode, PruneThreshold, Scalarize};

/// Fully resolved experiment setup.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub split_ratio: f64,
    pub strategy: Strategy,
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
    /// Worker threads for client training; 0 means the runtime default.
    /// Set from the command line, never from the file.
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub task: TaskKind,
    pub n: usize,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub hw: usize,
    pub max_radius: usize,
    pub dirichlet_beta: Option<f64>,
    pub size_skew: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    federation: Option<RawFederation>,
    train: Option<RawTrain>,
    strategy: Option<RawStrategy>,
    prune: Option<RawPrune>,
    kernel: Option<RawKernel>,
    data: Option<RawData>,
    output: Option<RawOutput>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFederation {
    #[serde(rename = "K")]
    k: Option<usize>,
    #[serde(rename = "T")]
    t: Option<usize>,
    #[serde(rename = "E")]
    e: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    lr: Option<f64>,
    batch: Option<usize>,
    split: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStrategy {
    name: Option<String>,
    mix: Option<RawMix>,
    cost_mix: Option<f64>,
    scalarize: Option<String>,
    gravity_reduce: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMix {
    s: Option<f64>,
    top: Option<f64>,
    w: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrune {
    mode: Option<String>,
    delta: Option<f64>,
    lambda: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKernel {
    d: Option<usize>,
    #[serde(rename = "L")]
    l: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    task: Option<String>,
    n: Option<usize>,
    classes: Option<usize>,
    dim: Option<usize>,
    separation: Option<f64>,
    hw: Option<usize>,
    max_radius: Option<usize>,
    dirichlet_beta: Option<f64>,
    size_skew: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<String>,
}

/// Parse a TOML config source with `key.path=value` overrides applied on
/// top, then validate into a resolved config.
pub fn load_config(source: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = source
        .parse()
        .map_err(|e| Error::Config(format!("config parse error: {}", e)))?;
    for (key, value) in overrides {
        apply_override(&mut table, key, value)?;
    }
    let raw: RawConfig = table
        .try_into()
        .map_err(|e| Error::Config(format!("config error: {}", e)))?;
    resolve(raw)
}

/// Patch one dotted key into the raw table. The value is parsed as a TOML
/// literal where possible (so numbers stay numbers) and falls back to a
/// plain string.
fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{}'", key)));
    }
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override '{}' descends into a non-table", key))
            })?;
    }
    let parsed: toml::Value = match format!("v = {}", value).parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(value.to_string()),
    };
    cursor.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

fn parse_prune(raw: &RawPrune) -> Result<PruneConfig> {
    let mode = match raw.mode.as_deref() {
        None | Some("dissimilarity") => PruneMode::Dissimilarity,
        Some("similarity") => PruneMode::Similarity,
        Some(other) => {
            return Err(Error::Config(format!(
                "prune.mode must be 'similarity' or 'dissimilarity', got '{}'",
                other
            )))
        }
    };
    let threshold = match (raw.delta, raw.lambda) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "prune.delta and prune.lambda are mutually exclusive".into(),
            ))
        }
        (Some(delta), None) => PruneThreshold::Fixed { delta },
        (None, Some(lambda)) => PruneThreshold::Quantile { lambda },
        (None, None) => PruneThreshold::Fixed { delta: 0.01 },
    };
    let cfg = PruneConfig { mode, threshold };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve(raw: RawConfig) -> Result<ExperimentConfig> {
    let federation = raw.federation.unwrap_or_default();
    let clients = federation.k.unwrap_or(5);
    let rounds = federation.t.unwrap_or(20);
    let local_epochs = federation.e.unwrap_or(3);
    if clients < 2 {
        return Err(Error::Config(format!(
            "federation.K must be >= 2, got {}",
            clients
        )));
    }
    if rounds < 1 {
        return Err(Error::Config("federation.T must be >= 1".into()));
    }
    if local_epochs < 1 {
        return Err(Error::Config("federation.E must be >= 1".into()));
    }

    let train = raw.train.unwrap_or_default();
    let lr = train.lr.unwrap_or(0.05);
    if !(lr > 0.0) {
        return Err(Error::Config(format!("train.lr must be > 0, got {}", lr)));
    }
    let batch_size = train.batch.unwrap_or(8);
    if batch_size == 0 {
        return Err(Error::Config("train.batch must be >= 1".into()));
    }
    let split_ratio = train.split.unwrap_or(0.8);
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::Config(format!(
            "train.split must be in (0, 1), got {}",
            split_ratio
        )));
    }

    let strat = raw.strategy.unwrap_or_default();
    let name = strat.name.as_deref().ok_or_else(|| {
        Error::Config("strategy.name is required (fedavg | fedcostwavg | fedgraph)".into())
    })?;
    let fedgraph_extras_present = strat.mix.is_some()
        || strat.scalarize.is_some()
        || strat.gravity_reduce.is_some()
        || raw.prune.is_some()
        || raw.kernel.is_some();
    let strategy = match name {
        "fedavg" | "fedcostwavg" => {
            if fedgraph_extras_present {
                return Err(Error::Config(format!(
                    "strategy '{}' does not accept mix/prune/kernel settings",
                    name
                )));
            }
            if name == "fedavg" {
                if strat.cost_mix.is_some() {
                    return Err(Error::Config(
                        "strategy.cost_mix only applies to fedcostwavg".into(),
                    ));
                }
                Strategy::FedAvg
            } else {
                let mix_a = strat.cost_mix.unwrap_or(0.5);
                if !(0.0..=1.0).contains(&mix_a) {
                    return Err(Error::Config(format!(
                        "strategy.cost_mix must be in [0, 1], got {}",
                        mix_a
                    )));
                }
                Strategy::FedCostWAvg { mix_a }
            }
        }
        "fedgraph" => {
            if strat.cost_mix.is_some() {
                return Err(Error::Config(
                    "strategy.cost_mix only applies to fedcostwavg".into(),
                ));
            }
            let mix = match strat.mix {
                Some(m) => {
                    let (s, top, w) = (m.s, m.top, m.w);
                    match (s, top, w) {
                        (Some(s), Some(top), Some(w)) => FactorMix::new(s, top, w)?,
                        _ => {
                            return Err(Error::Config(
                                "strategy.mix needs all of s, top, w".into(),
                            ))
                        }
                    }
                }
                None => FactorMix::default(),
            };
            let scalarize = match strat.scalarize.as_deref() {
                None | Some("sum") => Scalarize::Sum,
                Some("mean") => Scalarize::Mean,
                Some(other) => {
                    return Err(Error::Config(format!(
                        "strategy.scalarize must be 'sum' or 'mean', got '{}'",
                        other
                    )))
                }
            };
            let gravity_reduce = match strat.gravity_reduce.as_deref() {
                None | Some("sum") => GravityReduce::Sum,
                Some("mean") => GravityReduce::Mean,
                Some(other) => {
                    return Err(Error::Config(format!(
                        "strategy.gravity_reduce must be 'sum' or 'mean', got '{}'",
                        other
                    )))
                }
            };
            let prune = match &raw.prune {
                Some(p) => parse_prune(p)?,
                None => PruneConfig::default(),
            };
            let kernel = raw.kernel.unwrap_or_default();
            let kernel_d = kernel.d.unwrap_or(6);
            let kernel_levels = kernel.l.unwrap_or(4);
            if kernel_d == 0 {
                return Err(Error::Config("kernel.d must be >= 1".into()));
            }
            Strategy::FedGraph(FedGraphConfig {
                mix,
                prune,
                kernel_d,
                kernel_levels,
                scalarize,
                gravity_reduce,
            })
        }
        other => {
            return Err(Error::Config(format!(
                "strategy.name must be fedavg, fedcostwavg or fedgraph, got '{}'",
                other
            )))
        }
    };

    let d = raw.data.unwrap_or_default();
    let task = match d.task.as_deref() {
        None | Some("classification") => TaskKind::Classification,
        Some("segmentation") => TaskKind::Segmentation,
        Some(other) => {
            return Err(Error::Config(format!(
                "data.task must be 'classification' or 'segmentation', got '{}'",
                other
            )))
        }
    };
    let data = DataConfig {
        task,
        n: d.n.unwrap_or(341),
        classes: d.classes.unwrap_or(4),
        dim: d.dim.unwrap_or(8),
        separation: d.separation.unwrap_or(3.0),
        hw: d.hw.unwrap_or(12),
        max_radius: d.max_radius.unwrap_or(3),
        dirichlet_beta: d.dirichlet_beta,
        size_skew: d.size_skew,
    };
    if let Some(beta) = data.dirichlet_beta {
        if !(beta > 0.0) {
            return Err(Error::Config(format!(
                "data.dirichlet_beta must be > 0, got {}",
                beta
            )));
        }
    }
    if let Some(gamma) = data.size_skew {
        if !(gamma >= 1.0) {
            return Err(Error::Config(format!(
                "data.size_skew must be >= 1, got {}",
                gamma
            )));
        }
    }

    Ok(ExperimentConfig {
        seed: raw.seed.unwrap_or(42),
        clients,
        rounds,
        local_epochs,
        lr,
        batch_size,
        split_ratio,
        strategy,
        data,
        output_dir: raw.output.and_then(|o| o.dir).map(PathBuf::from),
        workers: 0,
    })
}

impl ExperimentConfig {
    /// Canonical TOML echo of the resolved configuration. Defaults are made
    /// explicit, so the output fully describes the run.
    pub fn to_toml_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("seed = {}\n\n", self.seed));
        out.push_str("[federation]\n");
        out.push_str(&format!("K = {}\n", self.clients));
        out.push_str(&format!("T = {}\n", self.rounds));
        out.push_str(&format!("E = {}\n\n", self.local_epochs));
        out.push_str("[train]\n");
        out.push_str(&format!("lr = {}\n", self.lr));
        out.push_str(&format!("batch = {}\n", self.batch_size));
        out.push_str(&format!("split = {}\n\n", self.split_ratio));
        out.push_str("[strategy]\n");
        out.push_str(&format!("name = \"{}\"\n", self.strategy.name()));
        match &self.strategy {
            Strategy::FedAvg => {}
            Strategy::FedCostWAvg { mix_a } => {
                out.push_str(&format!("cost_mix = {}\n", mix_a));
            }
            Strategy::FedGraph(cfg) => {
                out.push_str(&format!(
                    "scalarize = \"{}\"\n",
                    match cfg.scalarize {
                        Scalarize::Sum => "sum",
                        Scalarize::Mean => "mean",
                    }
                ));
                out.push_str(&format!(
                    "gravity_reduce = \"{}\"\n",
                    match cfg.gravity_reduce {
                        GravityReduce::Sum => "sum",
                        GravityReduce::Mean => "mean",
                    }
                ));
                out.push_str("\n[strategy.mix]\n");
                out.push_str(&format!("s = {}\n", cfg.mix.omega_s));
                out.push_str(&format!("top = {}\n", cfg.mix.omega_top));
                out.push_str(&format!("w = {}\n", cfg.mix.omega_w));
                out.push_str("\n[prune]\n");
                out.push_str(&format!(
                    "mode = \"{}\"\n",
                    match cfg.prune.mode {
                        PruneMode::Similarity => "similarity",
                        PruneMode::Dissimilarity => "dissimilarity",
                    }
                ));
                match cfg.prune.threshold {
                    PruneThreshold::Fixed { delta } => {
                        out.push_str(&format!("delta = {}\n", delta));
                    }
                    PruneThreshold::Quantile { lambda } => {
                        out.push_str(&format!("lambda = {}\n", lambda));
                    }
                }
                out.push_str("\n[kernel]\n");
                out.push_str(&format!("d = {}\n", cfg.kernel_d));
                out.push_str(&format!("L = {}\n", cfg.kernel_levels));
            }
        }
        out.push_str("\n[data]\n");
        out.push_str(&format!(
            "task = \"{}\"\n",
            match self.data.task {
                TaskKind::Classification => "classification",
                TaskKind::Segmentation => "segmentation",
            }
        ));
        out.push_str(&format!("n = {}\n", self.data.n));
        match self.data.task {
            TaskKind::Classification => {
                out.push_str(&format!("classes = {}\n", self.data.classes));
                out.push_str(&format!("dim = {}\n", self.data.dim));
                out.push_str(&format!("separation = {}\n", self.data.separation));
            }
            TaskKind::Segmentation => {
                out.push_str(&format!("hw = {}\n", self.data.hw));
                out.push_str(&format!("max_radius = {}\n", self.data.max_radius));
            }
        }
        if let Some(beta) = self.data.dirichlet_beta {
            out.push_str(&format!("dirichlet_beta = {}\n", beta));
        }
        if let Some(gamma) = self.data.size_skew {
            out.push_str(&format!("size_skew = {}\n", gamma));
        }
        if let Some(dir) = &self.output_dir {
            out.push_str(&format!("\n[output]\ndir = \"{}\"\n", dir.display()));
        }
        out
    }
}
