//! Round orchestration: parallel local training, strategy-driven
//! aggregation, global evaluation, and metric emission.
//!
//! Every source of randomness is derived from the experiment seed, and each
//! client trains in an isolated stream, so results are bit-identical
//! regardless of how many worker threads execute the round.

use std::fs::{self, File};
use std::io::{BufWriter, Write};

use rayon::prelude::*;

use crate::aggregation::{
    aggregate, fedcostwavg_weights, fedgraph_round_weights, sample_weights, AggregationWeights,
    Strategy,
};
use crate::config::{DataConfig, ExperimentConfig, TaskKind};
use crate::data::{
    make_classification, make_toy_segmentation, partition_noniid, partition_stats_csv,
    train_val_split, Dataset, Partition, PartitionMode, Task,
};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRow, MetricsWriter, Scope};
use crate::nn::{
    dataset_loss, forward, gather_batch, local_train, validate_chain, write_checkpoint,
    Activation, LayerSpec, ModelParams, Targets,
};
use crate::seed::{self, tag};
use crate::tensor::Tensor;

/// The fixed per-task architectures. Classification gets a small two-layer
/// perceptron, segmentation a two-layer conv net; both stay cheap enough to
/// train hundreds of rounds on a laptop while exposing every layer kind to
/// the graph mapping.
pub fn model_specs(data: &DataConfig) -> (Vec<LayerSpec>, Vec<usize>) {
    match data.task {
        TaskKind::Classification => (
            vec![
                LayerSpec::dense(data.dim, 16, Activation::Relu),
                LayerSpec::dense(16, data.classes, Activation::SoftmaxFinal),
            ],
            vec![data.dim],
        ),
        TaskKind::Segmentation => (
            vec![
                LayerSpec::conv2d(3, 3, 1, 4, Activation::Relu),
                LayerSpec::conv2d(3, 3, 4, 1, Activation::Sigmoid),
            ],
            vec![data.hw, data.hw, 1],
        ),
    }
}

fn partition_mode(data: &DataConfig) -> PartitionMode {
    match (data.dirichlet_beta, data.size_skew) {
        (Some(beta), Some(gamma)) => PartitionMode::DirichletSizeSkew { beta, gamma },
        (Some(beta), None) => PartitionMode::Dirichlet { beta },
        (None, Some(gamma)) => PartitionMode::SizeSkew { gamma },
        (None, None) => PartitionMode::DirichletSizeSkew {
            beta: 0.5,
            gamma: 1.3,
        },
    }
}

/// Fraction of validation samples whose argmax prediction matches the
/// label. Ties go to the lowest class index.
pub fn classification_accuracy(
    model: &ModelParams,
    inputs: &Tensor,
    targets: &Targets,
    idx: &[usize],
) -> Result<f64> {
    let Targets::Classes(_) = targets else {
        return Err(Error::Config(
            "accuracy needs classification targets".into(),
        ));
    };
    if idx.is_empty() {
        return Err(Error::Config(
            "cannot evaluate accuracy on an empty index set".into(),
        ));
    }
    let mut correct = 0usize;
    for chunk in idx.chunks(64) {
        let batch = gather_batch(inputs, targets, chunk);
        let pred = forward(model, &batch)?;
        let width = pred.sample_len();
        let Targets::Classes(labels) = &batch.targets else {
            unreachable!();
        };
        for (s, &label) in labels.iter().enumerate() {
            let row = &pred.data()[s * width..(s + 1) * width];
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// Dice coefficient of thresholded predictions (> 0.5) against binary
/// masks, pooled over every pixel of the index set. Empty prediction and
/// empty mask count as perfect overlap.
pub fn dice_score(
    model: &ModelParams,
    inputs: &Tensor,
    targets: &Targets,
    idx: &[usize],
) -> Result<f64> {
    let Targets::Masks(_) = targets else {
        return Err(Error::Config("dice needs segmentation targets".into()));
    };
    if idx.is_empty() {
        return Err(Error::Config(
            "cannot evaluate dice on an empty index set".into(),
        ));
    }
    let mut intersection = 0u64;
    let mut total = 0u64;
    for chunk in idx.chunks(64) {
        let batch = gather_batch(inputs, targets, chunk);
        let pred = forward(model, &batch)?;
        let Targets::Masks(masks) = &batch.targets else {
            unreachable!();
        };
        for (&p, &m) in pred.data().iter().zip(masks.data()) {
            let p = p > 0.5;
            let m = m > 0.5;
            if p && m {
                intersection += 1;
            }
            if p {
                total += 1;
            }
            if m {
                total += 1;
            }
        }
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * intersection as f64 / total as f64)
}

/// Everything one round produced: weights, per-client losses, and global
/// validation quality.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub sizes: Vec<usize>,
    /// Final local loss of each client's trained model on its own shard.
    pub local_losses: Vec<f64>,
    /// The aggregation weights actually applied.
    pub alpha: Vec<f64>,
    /// The three factor vectors behind `alpha` when the strategy computes
    /// them (fedgraph only).
    pub factors: Option<AggregationWeights>,
    /// Global model loss on the validation split.
    pub val_loss: f64,
    /// Task quality metric name, `accuracy` or `dice`.
    pub score_name: &'static str,
    pub score: f64,
}

impl RoundRecord {
    /// Flatten into metric rows: global rows first, then clients in id
    /// order with a fixed per-client metric order.
    pub fn metrics_rows(&self) -> Vec<MetricsRow> {
        let mut rows = vec![
            MetricsRow::new(self.round, Scope::Global, "loss", self.val_loss),
            MetricsRow::new(self.round, Scope::Global, self.score_name, self.score),
        ];
        for i in 0..self.sizes.len() {
            let scope = Scope::Client(i);
            rows.push(MetricsRow::new(
                self.round,
                scope,
                "local_loss",
                self.local_losses[i],
            ));
            rows.push(MetricsRow::new(
                self.round,
                scope,
                "n_k",
                self.sizes[i] as f64,
            ));
            rows.push(MetricsRow::new(self.round, scope, "alpha", self.alpha[i]));
            if let Some(f) = &self.factors {
                rows.push(MetricsRow::new(self.round, scope, "alpha_s", f.alpha_s[i]));
                rows.push(MetricsRow::new(
                    self.round,
                    scope,
                    "alpha_top",
                    f.alpha_top[i],
                ));
                rows.push(MetricsRow::new(self.round, scope, "alpha_w", f.alpha_w[i]));
            }
        }
        rows
    }
}

/// A running federated experiment: the dataset, its client partition, the
/// current global model, and any cross-round strategy state.
#[derive(Debug)]
pub struct Experiment {
    cfg: ExperimentConfig,
    dataset: Dataset,
    val_idx: Vec<usize>,
    partition: Partition,
    global: ModelParams,
    next_round: usize,
    prev_losses: Option<Vec<f64>>,
    forced_alpha: Option<Vec<f64>>,
    pool: rayon::ThreadPool,
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Internal(format!("worker pool: {}", e)))
}

impl Experiment {
    /// Materialize the experiment: synthesize the dataset, split and
    /// partition it, and initialize the global model, all from the config
    /// seed.
    pub fn new(cfg: &ExperimentConfig) -> Result<Experiment> {
        let d = &cfg.data;
        let dataset = match d.task {
            TaskKind::Classification => {
                make_classification(d.n, d.classes, d.dim, d.separation, cfg.seed)?
            }
            TaskKind::Segmentation => {
                make_toy_segmentation(d.n, d.hw, d.max_radius, cfg.seed)?
            }
        };
        let (train_idx, val_idx) = train_val_split(dataset.n(), cfg.split_ratio, cfg.seed)?;
        let partition = partition_noniid(
            &dataset,
            &train_idx,
            cfg.clients,
            partition_mode(d),
            cfg.seed,
        )?;
        let (specs, sample_shape) = model_specs(d);
        validate_chain(&specs, &sample_shape)?;
        let global = ModelParams::init(&specs, seed::derive(cfg.seed, &[tag::MODEL_INIT]))?;
        Experiment::from_parts(cfg.clone(), dataset, val_idx, partition, global)
    }

    /// Assemble an experiment from pre-built pieces. Lets callers study
    /// hand-crafted partitions (identical shards, adversarial skew) under
    /// the same round loop as `new`.
    pub fn from_parts(
        cfg: ExperimentConfig,
        dataset: Dataset,
        val_idx: Vec<usize>,
        partition: Partition,
        global: ModelParams,
    ) -> Result<Experiment> {
        if partition.k() != cfg.clients {
            return Err(Error::Config(format!(
                "partition has {} shards for {} clients",
                partition.k(),
                cfg.clients
            )));
        }
        let n = dataset.n();
        for (i, shard) in partition.client_shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::Config(format!("client {} has an empty shard", i)));
            }
            if let Some(&bad) = shard.iter().find(|&&s| s >= n) {
                return Err(Error::Config(format!(
                    "client {} shard references sample {} of {}",
                    i, bad, n
                )));
            }
        }
        if let Some(&bad) = val_idx.iter().find(|&&s| s >= n) {
            return Err(Error::Config(format!(
                "validation split references sample {} of {}",
                bad, n
            )));
        }
        if val_idx.is_empty() {
            return Err(Error::Config("validation split is empty".into()));
        }
        let pool = build_pool(cfg.workers)?;
        Ok(Experiment {
            cfg,
            dataset,
            val_idx,
            partition,
            global,
            next_round: 1,
            prev_losses: None,
            forced_alpha: None,
            pool,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn val_idx(&self) -> &[usize] {
        &self.val_idx
    }

    /// Replace the strategy's weights with a fixed vector from the next
    /// round on (`None` restores the strategy). A one-hot vector turns the
    /// federation into a single client's solo trajectory, which is the
    /// conservation check; a uniform vector gives an unweighted-average
    /// ablation.
    pub fn override_alpha(&mut self, alpha: Option<Vec<f64>>) {
        self.forced_alpha = alpha;
    }

    /// Run one synchronous round: every client trains from the current
    /// global model in parallel, the strategy weighs the results, and the
    /// weighted average becomes the next global model.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let round = self.next_round;
        let k = self.partition.k();
        let stream_seeds: Vec<u64> = (0..k)
            .map(|i| seed::derive(self.cfg.seed, &[tag::LOCAL_TRAIN, round as u64, i as u64]))
            .collect();

        let (dataset, partition, global, cfg) =
            (&self.dataset, &self.partition, &self.global, &self.cfg);
        let results: Vec<Result<(ModelParams, f64)>> = self.pool.install(|| {
            (0..k)
                .into_par_iter()
                .map(|i| {
                    let shard = &partition.client_shards[i];
                    let local = local_train(
                        &dataset.inputs,
                        &dataset.targets,
                        shard,
                        global,
                        cfg.local_epochs,
                        cfg.lr,
                        cfg.batch_size,
                        stream_seeds[i],
                    )?;
                    let loss = dataset_loss(&local, &dataset.inputs, &dataset.targets, shard)?;
                    Ok((local, loss))
                })
                .collect()
        });

        let mut locals = Vec::with_capacity(k);
        let mut local_losses = Vec::with_capacity(k);
        for (i, res) in results.into_iter().enumerate() {
            // Scanning in client order pins the reported failure to the
            // smallest client index, independent of thread scheduling.
            match res {
                Ok((model, loss)) => {
                    locals.push(model);
                    local_losses.push(loss);
                }
                Err(e) => {
                    let ctx = |m: String| format!("round {} client {}: {}", round, i, m);
                    return Err(match e {
                        Error::Config(m) => Error::Config(ctx(m)),
                        Error::Numeric(m) => Error::Numeric(ctx(m)),
                        Error::Format(m) => Error::Format(ctx(m)),
                        other => Error::Internal(ctx(other.to_string())),
                    });
                }
            }
        }

        let sizes = self.partition.sizes();
        let (strategy_alpha, factors) = match &self.cfg.strategy {
            Strategy::FedAvg => (sample_weights(&sizes)?, None),
            Strategy::FedCostWAvg { mix_a } => match &self.prev_losses {
                // No previous-round losses exist yet, so the cost ratio is
                // undefined; fall back to plain sample weighting.
                None => (sample_weights(&sizes)?, None),
                Some(prev) => (
                    fedcostwavg_weights(&sizes, prev, &local_losses, *mix_a)?,
                    None,
                ),
            },
            Strategy::FedGraph(fg) => {
                let w = fedgraph_round_weights(&locals, &self.global, &sizes, fg)?;
                (w.alpha.clone(), Some(w))
            }
        };
        let alpha = match &self.forced_alpha {
            Some(forced) => forced.clone(),
            None => strategy_alpha,
        };

        self.global = aggregate(&locals, &alpha)?;
        let val_loss = dataset_loss(
            &self.global,
            &self.dataset.inputs,
            &self.dataset.targets,
            &self.val_idx,
        )?;
        let (score_name, score) = match self.dataset.task {
            Task::Classification { .. } => (
                "accuracy",
                classification_accuracy(
                    &self.global,
                    &self.dataset.inputs,
                    &self.dataset.targets,
                    &self.val_idx,
                )?,
            ),
            Task::Segmentation => (
                "dice",
                dice_score(
                    &self.global,
                    &self.dataset.inputs,
                    &self.dataset.targets,
                    &self.val_idx,
                )?,
            ),
        };

        log::debug!(
            "round {}: alpha {:?}, local losses {:?}",
            round,
            alpha,
            local_losses
        );
        self.prev_losses = Some(local_losses.clone());
        self.next_round = round + 1;
        Ok(RoundRecord {
            round,
            sizes,
            local_losses,
            alpha,
            factors,
            val_loss,
            score_name,
            score,
        })
    }
}

/// A completed experiment: every round's record plus the final global
/// model.
pub struct ExperimentRun {
    pub records: Vec<RoundRecord>,
    pub final_model: ModelParams,
}

/// Run the configured number of rounds. With an output directory set, the
/// run writes `metrics.csv` (flushed every round), `partition.csv`, and the
/// final global checkpoint `model_final.fgck`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    run_experiment_with(cfg, |_| {})
}

/// `run_experiment` with a per-round callback for progress reporting.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    mut on_round: impl FnMut(&RoundRecord),
) -> Result<ExperimentRun> {
    let mut exp = Experiment::new(cfg)?;
    let mut writer = match &cfg.output_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            log::info!("writing artifacts to {}", dir.display());
            fs::write(
                dir.join("partition.csv"),
                partition_stats_csv(&exp.dataset, &exp.partition),
            )?;
            Some(MetricsWriter::create(
                &dir.join("metrics.csv"),
                &cfg.to_toml_string(),
            )?)
        }
        None => None,
    };

    let mut records = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let record = exp.run_round()?;
        if let Some(w) = &mut writer {
            w.write_round(&record.metrics_rows())?;
        }
        on_round(&record);
        records.push(record);
    }

    if let Some(dir) = &cfg.output_dir {
        let mut out = BufWriter::new(File::create(dir.join("model_final.fgck"))?);
        write_checkpoint(&exp.global, &mut out)?;
        out.flush()?;
    }
    Ok(ExperimentRun {
        records,
        final_model: exp.global,
    })
}
