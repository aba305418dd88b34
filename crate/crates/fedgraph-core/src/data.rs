//! Synthetic datasets and non-i.i.d. client partitions.
//!
//! Two task families stand in for real federated workloads: Gaussian-cluster
//! classification and bright-blob segmentation. Both are generated from a
//! seed alone, so any experiment is reproducible from its config. Partitions
//! skew the training split across clients by label mix (Dirichlet draws),
//! by shard size (geometric progression), or both.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_exact, read_f64s, read_u32, read_u8, write_f64s, write_u32};
use crate::nn::{shuffle, Targets};
use crate::seed::{self, tag};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"FGDS";
pub const DATASET_VERSION: u32 = 1;

/// What the targets mean and which loss/metric pairing applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Integer class labels in `0..classes`.
    Classification { classes: usize },
    /// Per-pixel binary masks with the same shape as the inputs.
    Segmentation,
}

/// A full synthetic dataset: inputs batched along the leading axis plus
/// matching targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(task: Task, inputs: Tensor, targets: Targets) -> Result<Self> {
        if inputs.n() == 0 {
            return Err(Error::Config("dataset must be non-empty".into()));
        }
        if inputs.n() != targets.n() {
            return Err(Error::Config(format!(
                "dataset has {} inputs but {} targets",
                inputs.n(),
                targets.n()
            )));
        }
        match (&task, &targets) {
            (Task::Classification { classes }, Targets::Classes(labels)) => {
                if let Some(&bad) = labels.iter().find(|&&c| c >= *classes) {
                    return Err(Error::Config(format!(
                        "label {} out of range for {} classes",
                        bad, classes
                    )));
                }
            }
            (Task::Segmentation, Targets::Masks(masks)) => {
                if masks.shape() != inputs.shape() {
                    return Err(Error::Config(
                        "segmentation masks must match input shape".into(),
                    ));
                }
            }
            _ => {
                return Err(Error::Config(
                    "target kind does not match dataset task".into(),
                ));
            }
        }
        Ok(Dataset {
            task,
            inputs,
            targets,
        })
    }

    pub fn n(&self) -> usize {
        self.inputs.n()
    }
}

/// Deterministic class centroids used by [`make_classification`]. Exposed so
/// callers can recover the generating geometry for a given seed.
pub fn class_centroids(classes: usize, dim: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[tag::DATASET, 0]));
    (0..classes)
        .map(|_| {
            (0..dim)
                .map(|_| separation * rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect()
}

/// Gaussian class clusters: each sample is its class centroid plus unit
/// Gaussian noise. Labels are drawn uniformly, then patched so every class
/// appears at least once.
pub fn make_classification(
    n: usize,
    classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::Config(format!(
            "need n >= classes >= 2, got n = {} classes = {}",
            n, classes
        )));
    }
    if dim == 0 {
        return Err(Error::Config("feature dim must be positive".into()));
    }
    let centroids = class_centroids(classes, dim, separation, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[tag::DATASET, 1]));

    let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let mut counts = vec![0usize; classes];
    for &c in &labels {
        counts[c] += 1;
    }
    for c in 0..classes {
        if counts[c] == 0 {
            // Steal a sample from the most frequent class.
            let donor = (0..classes).max_by_key(|&d| counts[d]).unwrap();
            let i = labels.iter().position(|&l| l == donor).unwrap();
            labels[i] = c;
            counts[donor] -= 1;
            counts[c] += 1;
        }
    }

    let mut data = Vec::with_capacity(n * dim);
    for &c in &labels {
        for &center in &centroids[c] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(center + noise);
        }
    }
    Dataset::new(
        Task::Classification { classes },
        Tensor::from_vec(&[n, dim], data)?,
        Targets::Classes(labels),
    )
}

/// Square images containing one bright disc on a dim noisy background, with
/// the disc's pixels as the binary mask. Per-sample radius is drawn from
/// `0..=max_radius`; radius 0 keeps the single center pixel.
pub fn make_toy_segmentation(n: usize, hw: usize, max_radius: usize, seed: u64) -> Result<Dataset> {
    if hw < 8 {
        return Err(Error::Config(format!("image side must be >= 8, got {}", hw)));
    }
    if n == 0 {
        return Err(Error::Config("dataset must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[tag::DATASET, 2]));
    let mut images = Vec::with_capacity(n * hw * hw);
    let mut masks = Vec::with_capacity(n * hw * hw);
    for _ in 0..n {
        let r = rng.random_range(0..=max_radius);
        let cy = rng.random_range(0..hw) as isize;
        let cx = rng.random_range(0..hw) as isize;
        let r2 = (r * r) as isize;
        for y in 0..hw as isize {
            for x in 0..hw as isize {
                let inside = (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r2;
                if inside {
                    images.push(0.8 + 0.2 * rng.random_range(0.0..1.0));
                    masks.push(1.0);
                } else {
                    images.push(0.2 * rng.random_range(0.0..1.0));
                    masks.push(0.0);
                }
            }
        }
    }
    let shape = [n, hw, hw, 1];
    Dataset::new(
        Task::Segmentation,
        Tensor::from_vec(&shape, images)?,
        Targets::Masks(Tensor::from_vec(&shape, masks)?),
    )
}

/// Shuffled index split; the train side gets `round(ratio * n)` samples.
pub fn train_val_split(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "split ratio must be in (0, 1), got {}",
            ratio
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[tag::SPLIT]));
    shuffle(&mut order, &mut rng);
    let n_train = (ratio * n as f64).round() as usize;
    let val = order.split_off(n_train);
    Ok((order, val))
}

/// How training indices are spread across clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionMode {
    /// Per-client label mixes drawn from a symmetric Dirichlet; shard sizes
    /// stay balanced.
    Dirichlet { beta: f64 },
    /// Shard sizes follow a geometric progression with the given ratio;
    /// labels are spread uniformly.
    SizeSkew { gamma: f64 },
    /// Both skews at once.
    DirichletSizeSkew { beta: f64, gamma: f64 },
}

impl PartitionMode {
    fn validate(&self) -> Result<()> {
        let (beta, gamma) = match *self {
            PartitionMode::Dirichlet { beta } => (beta, 1.0),
            PartitionMode::SizeSkew { gamma } => (1.0, gamma),
            PartitionMode::DirichletSizeSkew { beta, gamma } => (beta, gamma),
        };
        if !(beta > 0.0) {
            return Err(Error::Config(format!(
                "dirichlet beta must be > 0, got {}",
                beta
            )));
        }
        if !(gamma >= 1.0) {
            return Err(Error::Config(format!(
                "size-skew gamma must be >= 1, got {}",
                gamma
            )));
        }
        Ok(())
    }

    fn beta(&self) -> Option<f64> {
        match *self {
            PartitionMode::Dirichlet { beta } | PartitionMode::DirichletSizeSkew { beta, .. } => {
                Some(beta)
            }
            PartitionMode::SizeSkew { .. } => None,
        }
    }

    fn gamma(&self) -> f64 {
        match *self {
            PartitionMode::SizeSkew { gamma } | PartitionMode::DirichletSizeSkew { gamma, .. } => {
                gamma
            }
            PartitionMode::Dirichlet { .. } => 1.0,
        }
    }
}

/// Disjoint per-client index shards covering the training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub client_shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn k(&self) -> usize {
        self.client_shards.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.client_shards.iter().map(|s| s.len()).collect()
    }
}

/// Symmetric Dirichlet draw via normalized Gamma samples.
fn dirichlet_draw(beta: f64, classes: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta checked positive");
    let mut draws: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total <= 0.0 {
        // All-zero draws can happen for tiny beta; fall back to uniform.
        return vec![1.0 / classes as f64; classes];
    }
    for d in &mut draws {
        *d /= total;
    }
    draws
}

/// Split `total` into `k` non-negative integer parts proportional to
/// `props`, each at least `min_each`, using largest-remainder rounding.
fn apportion(total: usize, props: &[f64], min_each: usize) -> Vec<usize> {
    let k = props.len();
    let sum: f64 = props.iter().sum();
    let mut out = vec![min_each; k];
    let mut assigned = min_each * k;
    let spare = total - assigned;
    let mut fractional: Vec<(usize, f64)> = Vec::with_capacity(k);
    for (i, &p) in props.iter().enumerate() {
        let exact = spare as f64 * p / sum;
        let floor = exact.floor() as usize;
        out[i] += floor;
        assigned += floor;
        fractional.push((i, exact - floor as f64));
    }
    // Hand out the remainder to the largest fractional parts; ties break by
    // index so the result is order-stable.
    fractional.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in fractional.iter().take(total - assigned) {
        out[i] += 1;
    }
    out
}

/// Spread the training indices across `k` clients. Shard sizes come from the
/// mode's geometric progression (ratio 1 means balanced); with a Dirichlet
/// component, each client draws a label mix and fills its shard by sampling
/// classes from that mix, falling back to whatever pools remain non-empty.
pub fn partition_noniid(
    dataset: &Dataset,
    train_idx: &[usize],
    k: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<Partition> {
    mode.validate()?;
    let n = train_idx.len();
    if k == 0 {
        return Err(Error::Config("client count must be positive".into()));
    }
    if k > n {
        return Err(Error::Config(format!(
            "cannot split {} training samples across {} clients",
            n, k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[tag::PARTITION]));

    let gamma = mode.gamma();
    let props: Vec<f64> = (0..k).map(|i| gamma.powi(i as i32)).collect();
    let sizes = apportion(n, &props, 1);

    let shards = match (mode.beta(), &dataset.task) {
        (Some(beta), Task::Classification { classes }) => {
            // Per-class index pools, each pre-shuffled so pops are random.
            let labels = match &dataset.targets {
                Targets::Classes(l) => l,
                Targets::Masks(_) => unreachable!("classification task carries class targets"),
            };
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); *classes];
            for &i in train_idx {
                pools[labels[i]].push(i);
            }
            for pool in &mut pools {
                shuffle(pool, &mut rng);
            }
            let mut shards = Vec::with_capacity(k);
            for &size in &sizes {
                let q = dirichlet_draw(beta, *classes, &mut rng);
                let mut shard = Vec::with_capacity(size);
                for _ in 0..size {
                    // Sample a class weighted by the client's mix restricted
                    // to non-empty pools.
                    let mass: f64 = (0..*classes)
                        .filter(|&c| !pools[c].is_empty())
                        .map(|c| q[c])
                        .sum();
                    let chosen = if mass > 0.0 {
                        let mut u = rng.random_range(0.0..mass);
                        let mut pick = None;
                        for c in 0..*classes {
                            if pools[c].is_empty() {
                                continue;
                            }
                            if u < q[c] {
                                pick = Some(c);
                                break;
                            }
                            u -= q[c];
                        }
                        pick.unwrap_or_else(|| {
                            (0..*classes).find(|&c| !pools[c].is_empty()).unwrap()
                        })
                    } else {
                        // Remaining pools all have zero mix weight; take any.
                        (0..*classes).find(|&c| !pools[c].is_empty()).unwrap()
                    };
                    shard.push(pools[chosen].pop().unwrap());
                }
                shards.push(shard);
            }
            shards
        }
        _ => {
            // No label skew requested (or no labels to skew): shuffle once
            // and cut into consecutive runs of the target sizes.
            let mut order = train_idx.to_vec();
            shuffle(&mut order, &mut rng);
            let mut shards = Vec::with_capacity(k);
            let mut start = 0;
            for &size in &sizes {
                shards.push(order[start..start + size].to_vec());
                start += size;
            }
            shards
        }
    };

    debug_assert_eq!(shards.iter().map(|s| s.len()).sum::<usize>(), n);
    Ok(Partition {
        client_shards: shards,
    })
}

/// CSV of shard sizes and per-class counts: `client_id,n_k,class_0,...`.
pub fn partition_stats_csv(dataset: &Dataset, partition: &Partition) -> String {
    let classes = match dataset.task {
        Task::Classification { classes } => classes,
        Task::Segmentation => 0,
    };
    let mut out = String::from("client_id,n_k");
    for c in 0..classes {
        out.push_str(&format!(",class_{}", c));
    }
    out.push('\n');
    for (k, shard) in partition.client_shards.iter().enumerate() {
        out.push_str(&format!("{},{}", k, shard.len()));
        if let (Targets::Classes(labels), true) = (&dataset.targets, classes > 0) {
            let mut counts = vec![0usize; classes];
            for &i in shard {
                counts[labels[i]] += 1;
            }
            for c in counts {
                out.push_str(&format!(",{}", c));
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_dataset(dataset: &Dataset, w: &mut impl Write) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    write_u32(w, DATASET_VERSION)?;
    match dataset.task {
        Task::Classification { classes } => {
            w.write_all(&[0u8])?;
            write_u32(w, classes as u32)?;
        }
        Task::Segmentation => w.write_all(&[1u8])?,
    }
    write_u32(w, dataset.inputs.rank() as u32)?;
    for &d in dataset.inputs.shape() {
        write_u32(w, d as u32)?;
    }
    write_f64s(w, dataset.inputs.data())?;
    match &dataset.targets {
        Targets::Classes(labels) => {
            for &l in labels {
                write_u32(w, l as u32)?;
            }
        }
        Targets::Masks(masks) => write_f64s(w, masks.data())?,
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "dataset magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "bad dataset magic {:02x?}, expected \"FGDS\"",
            magic
        )));
    }
    let version = read_u32(r, "dataset version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {}",
            version
        )));
    }
    let task = match read_u8(r, "task tag")? {
        0 => Task::Classification {
            classes: read_u32(r, "class count")? as usize,
        },
        1 => Task::Segmentation,
        t => return Err(Error::Format(format!("unknown task tag {}", t))),
    };
    let rank = read_u32(r, "input rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, "input dim")? as usize);
    }
    let len: usize = shape.iter().product();
    let inputs = Tensor::from_vec(&shape, read_f64s(r, len, "input data")?)?;
    let targets = match task {
        Task::Classification { .. } => {
            let mut labels = Vec::with_capacity(inputs.n());
            for _ in 0..inputs.n() {
                labels.push(read_u32(r, "label")? as usize);
            }
            Targets::Classes(labels)
        }
        Task::Segmentation => Targets::Masks(Tensor::from_vec(
            &shape,
            read_f64s(r, len, "mask data")?,
        )?),
    };
    Dataset::new(task, inputs, targets)
}

pub fn dataset_bytes(dataset: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    write_dataset(dataset, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

#[cfg(test)]
mod tests;
