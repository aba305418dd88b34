//! Aggregation weight factors and model combination strategies.
//!
//! Each round produces per-client evidence: shard sizes, the gravity matrix
//! of pruned delta graphs, and L1 distances from the global model. The
//! factors become simplex weight vectors (sample share, softmax of gravity
//! row reductions, normalized inverse distance) that a convex mix combines
//! into the final aggregation weights.

use crate::error::{Error, Result};
use crate::graph::{graph_map_with, graph_prune, PruneConfig, Scalarize};
use crate::kernel::{gravity_matrix, GravityMatrix};
use crate::nn::{param_l1_distance, ModelParams};

/// Division guard for inverse-distance weights.
pub const WEIGHT_DISTANCE_EPS: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-9;

/// Convex mix of the three weight factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorMix {
    pub omega_s: f64,
    pub omega_top: f64,
    pub omega_w: f64,
}

impl FactorMix {
    pub fn new(omega_s: f64, omega_top: f64, omega_w: f64) -> Result<Self> {
        let mix = FactorMix {
            omega_s,
            omega_top,
            omega_w,
        };
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<()> {
        if self.omega_s < 0.0 || self.omega_top < 0.0 || self.omega_w < 0.0 {
            return Err(Error::Config(format!(
                "factor mix must be non-negative, got ({}, {}, {})",
                self.omega_s, self.omega_top, self.omega_w
            )));
        }
        let sum = self.omega_s + self.omega_top + self.omega_w;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "factor mix must sum to 1, got {}",
                sum
            )));
        }
        Ok(())
    }

    /// The mix that ignores topology and distance, reducing to FedAvg.
    pub fn sample_only() -> Self {
        FactorMix {
            omega_s: 1.0,
            omega_top: 0.0,
            omega_w: 0.0,
        }
    }
}

impl Default for FactorMix {
    fn default() -> Self {
        FactorMix {
            omega_s: 0.4,
            omega_top: 0.3,
            omega_w: 0.3,
        }
    }
}

/// How gravity rows collapse to the scalar fed into the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GravityReduce {
    #[default]
    Sum,
    Mean,
}

/// All four per-round weight vectors, kept for metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    pub alpha_s: Vec<f64>,
    pub alpha_top: Vec<f64>,
    pub alpha_w: Vec<f64>,
    pub alpha: Vec<f64>,
}

fn check_simplex(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::Internal(format!(
            "{} has negative or non-finite entries: {:?}",
            name, v
        )));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Internal(format!("{} sums to {}", name, sum)));
    }
    Ok(())
}

impl AggregationWeights {
    pub fn validate(&self) -> Result<()> {
        check_simplex("alpha_s", &self.alpha_s)?;
        check_simplex("alpha_top", &self.alpha_top)?;
        check_simplex("alpha_w", &self.alpha_w)?;
        check_simplex("alpha", &self.alpha)
    }
}

/// Sample-share weights: shard size over total.
pub fn sample_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Config(format!(
            "every client needs at least one sample, got {:?}",
            sizes
        )));
    }
    let total: usize = sizes.iter().sum();
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Shift-invariant softmax (max subtracted before exponentiation).
fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Topology weights: reduce each gravity row (diagonal included) and take
/// the softmax.
pub fn topo_weights(c: &GravityMatrix, reduce: GravityReduce) -> Vec<f64> {
    let reduced = match reduce {
        GravityReduce::Sum => c.row_sums(),
        GravityReduce::Mean => c.row_means(),
    };
    softmax(&reduced)
}

/// Normalized inverse distances, clamped below so a client sitting exactly
/// on the global model cannot divide by zero. All-zero distances hit the
/// clamp together and come out uniform.
pub fn inverse_distance_weights(distances: &[f64]) -> Result<Vec<f64>> {
    if distances.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 distances, got {}",
            distances.len()
        )));
    }
    if distances.iter().any(|&d| !d.is_finite() || d < 0.0) {
        return Err(Error::Numeric(format!(
            "distances must be finite and non-negative, got {:?}",
            distances
        )));
    }
    let inv: Vec<f64> = distances
        .iter()
        .map(|&d| 1.0 / d.max(WEIGHT_DISTANCE_EPS))
        .collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|x| x / total).collect())
}

/// Convex combination of the three factors under the mix.
pub fn combine(
    alpha_s: &[f64],
    alpha_top: &[f64],
    alpha_w: &[f64],
    mix: FactorMix,
) -> Result<Vec<f64>> {
    mix.validate()?;
    if alpha_s.len() != alpha_top.len() || alpha_s.len() != alpha_w.len() {
        return Err(Error::Internal(format!(
            "factor lengths disagree: {} / {} / {}",
            alpha_s.len(),
            alpha_top.len(),
            alpha_w.len()
        )));
    }
    check_simplex("alpha_s", alpha_s)?;
    check_simplex("alpha_top", alpha_top)?;
    check_simplex("alpha_w", alpha_w)?;
    Ok((0..alpha_s.len())
        .map(|k| mix.omega_s * alpha_s[k] + mix.omega_top * alpha_top[k] + mix.omega_w * alpha_w[k])
        .collect())
}

/// Element-wise convex combination of congruent client models.
pub fn aggregate(models: &[ModelParams], alpha: &[f64]) -> Result<ModelParams> {
    if models.is_empty() {
        return Err(Error::Config("nothing to aggregate".into()));
    }
    if models.len() != alpha.len() {
        return Err(Error::Internal(format!(
            "{} models but {} weights",
            models.len(),
            alpha.len()
        )));
    }
    check_simplex("alpha", alpha)?;
    for m in &models[1..] {
        if !models[0].congruent(m) {
            return Err(Error::Internal("client models are not congruent".into()));
        }
    }
    let mut out = models[0].map(|_| 0.0);
    for (layer_idx, layer) in out.layers_mut().iter_mut().enumerate() {
        for i in 0..layer.weights.len() {
            let mut acc = 0.0;
            for (m, &a) in models.iter().zip(alpha) {
                acc += a * m.layers()[layer_idx].weights.data()[i];
            }
            layer.weights.data_mut()[i] = acc;
        }
        for i in 0..layer.bias.len() {
            let mut acc = 0.0;
            for (m, &a) in models.iter().zip(alpha) {
                acc += a * m.layers()[layer_idx].bias[i];
            }
            layer.bias[i] = acc;
        }
    }
    Ok(out)
}

/// Everything FedGraph needs beyond the shared round inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedGraphConfig {
    pub mix: FactorMix,
    pub prune: PruneConfig,
    pub kernel_d: usize,
    pub kernel_levels: usize,
    pub scalarize: Scalarize,
    pub gravity_reduce: GravityReduce,
}

impl Default for FedGraphConfig {
    fn default() -> Self {
        FedGraphConfig {
            mix: FactorMix::default(),
            prune: PruneConfig::default(),
            kernel_d: 6,
            kernel_levels: 4,
            scalarize: Scalarize::Sum,
            gravity_reduce: GravityReduce::Sum,
        }
    }
}

/// The full FedGraph weight pipeline for one round: absolute deltas map to
/// graphs, pruned graphs to the gravity matrix and topology weights, L1
/// distances to inverse-distance weights, and shard sizes to sample
/// weights; the mix combines all three.
pub fn fedgraph_round_weights(
    local_models: &[ModelParams],
    global_model: &ModelParams,
    sizes: &[usize],
    cfg: &FedGraphConfig,
) -> Result<AggregationWeights> {
    if local_models.len() < 2 {
        return Err(Error::Config(format!(
            "fedgraph needs at least 2 clients, got {}",
            local_models.len()
        )));
    }
    if local_models.len() != sizes.len() {
        return Err(Error::Internal(format!(
            "{} models but {} shard sizes",
            local_models.len(),
            sizes.len()
        )));
    }
    let alpha_s = sample_weights(sizes)?;

    let mut pruned = Vec::with_capacity(local_models.len());
    let mut distances = Vec::with_capacity(local_models.len());
    for local in local_models {
        let delta = local.abs_diff(global_model)?;
        let g = graph_map_with(&delta, cfg.scalarize)?;
        pruned.push(graph_prune(&g, &g.zero_like(), &cfg.prune)?);
        distances.push(param_l1_distance(local, global_model)?);
    }
    let gravity = gravity_matrix(&pruned, cfg.kernel_d, cfg.kernel_levels)?;
    let alpha_top = topo_weights(&gravity, cfg.gravity_reduce);
    let alpha_w = inverse_distance_weights(&distances)?;
    let alpha = combine(&alpha_s, &alpha_top, &alpha_w, cfg.mix)?;

    let weights = AggregationWeights {
        alpha_s,
        alpha_top,
        alpha_w,
        alpha,
    };
    weights.validate()?;
    Ok(weights)
}

/// Sample share blended with per-client loss improvement ratios
/// (previous over current round loss).
pub fn fedcostwavg_weights(
    sizes: &[usize],
    prev_losses: &[f64],
    curr_losses: &[f64],
    mix_a: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&mix_a) {
        return Err(Error::Config(format!(
            "cost mix must be in [0, 1], got {}",
            mix_a
        )));
    }
    if prev_losses.len() != sizes.len() || curr_losses.len() != sizes.len() {
        return Err(Error::Internal(format!(
            "losses ({}, {}) do not match {} clients",
            prev_losses.len(),
            curr_losses.len(),
            sizes.len()
        )));
    }
    if prev_losses
        .iter()
        .chain(curr_losses)
        .any(|&l| !(l > 0.0) || !l.is_finite())
    {
        return Err(Error::Numeric(
            "loss ratios need strictly positive losses".into(),
        ));
    }
    let alpha_s = sample_weights(sizes)?;
    let ratios: Vec<f64> = prev_losses
        .iter()
        .zip(curr_losses)
        .map(|(&p, &c)| p / c)
        .collect();
    let total: f64 = ratios.iter().sum();
    let alpha: Vec<f64> = alpha_s
        .iter()
        .zip(&ratios)
        .map(|(&s, &r)| mix_a * s + (1.0 - mix_a) * r / total)
        .collect();
    check_simplex("fedcostwavg alpha", &alpha)?;
    Ok(alpha)
}

/// Which aggregation rule the federation loop runs.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    FedAvg,
    FedCostWAvg { mix_a: f64 },
    FedGraph(FedGraphConfig),
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedCostWAvg { .. } => "fedcostwavg",
            Strategy::FedGraph(_) => "fedgraph",
        }
    }
}
