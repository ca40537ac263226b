//! One-shot upsampling of slow-learnable examples.
//!
//! Train briefly, split each class into two groups by 2-means on the model
//! outputs, upsample the group with the higher mean loss, and restart
//! training from the original initialization on the reweighted data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_weights, logistic_loss, outputs, InitSpec, WeightMatrix};
use crate::optim::{train, OptimizerConfig, Snapshot, TrainOptions, TrainTrace, WeightRecorder};
use crate::synthgen::Dataset;

/// Result of Lloyd's algorithm with two clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub assignments: Vec<u8>,
    pub centers: [Vec<f64>; 2],
    pub sizes: [usize; 2],
    /// Within-cluster sum of squared distances of the final partition.
    pub objective: f64,
    /// Objective after each assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    /// All points coincide; both centers are equal and every point is in cluster 0.
    pub degenerate: bool,
    /// Scalar input whose Lloyd fixed point was replaced by the best sorted split.
    pub refined: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn point(values: &[f64], dim: usize, i: usize) -> &[f64] {
    &values[i * dim..(i + 1) * dim]
}

fn initial_pair(values: &[f64], dim: usize, n: usize) -> (usize, usize) {
    if dim == 1 {
        let mut lo = 0;
        let mut hi = 0;
        for i in 1..n {
            if values[i] < values[lo] {
                lo = i;
            }
            if values[i] > values[hi] {
                hi = i;
            }
        }
        return (lo, hi);
    }
    let mut best = (0, 0);
    let mut best_d = -1.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(point(values, dim, i), point(values, dim, j));
            if d > best_d {
                best_d = d;
                best = (i, j);
            }
        }
    }
    best
}

fn assign(values: &[f64], dim: usize, centers: &[Vec<f64>; 2], out: &mut [u8]) -> f64 {
    let mut objective = 0.0;
    for (i, a) in out.iter_mut().enumerate() {
        let x = point(values, dim, i);
        let d0 = sq_dist(x, &centers[0]);
        let d1 = sq_dist(x, &centers[1]);
        if d1 < d0 {
            *a = 1;
            objective += d1;
        } else {
            *a = 0;
            objective += d0;
        }
    }
    objective
}

fn means(values: &[f64], dim: usize, assignments: &[u8], fallback: &[Vec<f64>; 2]) -> ([Vec<f64>; 2], [usize; 2]) {
    let mut sums = [vec![0.0; dim], vec![0.0; dim]];
    let mut sizes = [0usize; 2];
    for (i, &a) in assignments.iter().enumerate() {
        let a = a as usize;
        sizes[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(point(values, dim, i)) {
            *s += x;
        }
    }
    for c in 0..2 {
        if sizes[c] == 0 {
            sums[c] = fallback[c].clone();
        } else {
            for s in &mut sums[c] {
                *s /= sizes[c] as f64;
            }
        }
    }
    (sums, sizes)
}

/// Lloyd's algorithm with two clusters on `values.len() / dim` points stored
/// row-major. Initial centers are the two mutually farthest points (the
/// minimum and maximum for scalars); iteration stops when no center moves by
/// `tolerance` or more, or after `max_iters` rounds.
///
/// Lloyd can stop at a local optimum even in one dimension, so scalar inputs
/// are finished with an exact sorted-split scan; the optimal split is itself a
/// Lloyd fixed point.
pub fn kmeans_two(values: &[f64], dim: usize, tolerance: f64, max_iters: usize) -> Result<KMeansResult> {
    if dim == 0 || !values.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: values.len(),
        });
    }
    let n = values.len() / dim;
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "2-means needs at least 2 points, got {n}"
        )));
    }
    let (i0, i1) = initial_pair(values, dim, n);
    let mut centers = [point(values, dim, i0).to_vec(), point(values, dim, i1).to_vec()];
    if centers[0] == centers[1] {
        let mean = means(values, dim, &vec![0; n], &centers).0[0].clone();
        let objective = (0..n).map(|i| sq_dist(point(values, dim, i), &mean)).sum();
        return Ok(KMeansResult {
            assignments: vec![0; n],
            centers: [mean.clone(), mean],
            sizes: [n, 0],
            objective,
            objective_history: vec![objective],
            iterations: 0,
            degenerate: true,
            refined: false,
        });
    }

    let mut assignments = vec![0u8; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        history.push(assign(values, dim, &centers, &mut assignments));
        let (next, _) = means(values, dim, &assignments, &centers);
        let moved = (0..2)
            .map(|c| sq_dist(&next[c], &centers[c]).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        if moved < tolerance {
            break;
        }
    }
    history.push(assign(values, dim, &centers, &mut assignments));
    let (mut centers, mut sizes) = means(values, dim, &assignments, &centers);
    let mut objective = partition_objective(values, dim, &assignments, &centers);
    let mut refined = false;
    if dim == 1 {
        let split = best_sorted_split(values);
        let (c, s) = means(values, 1, &split, &centers);
        let o = partition_objective(values, 1, &split, &c);
        if o < objective {
            assignments = split;
            centers = c;
            sizes = s;
            objective = o;
            refined = true;
            history.push(o);
        }
    }
    Ok(KMeansResult {
        assignments,
        centers,
        sizes,
        objective,
        objective_history: history,
        iterations,
        degenerate: false,
        refined,
    })
}

fn partition_objective(values: &[f64], dim: usize, assignments: &[u8], centers: &[Vec<f64>; 2]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(point(values, dim, i), &centers[a as usize]))
        .sum()
}

/// Optimal two-way split of scalars: sort, then scan every boundary between
/// distinct values with prefix sums. Values below the boundary get cluster 0.
fn best_sorted_split(values: &[f64]) -> Vec<u8> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    // centering keeps the prefix-sum variance formula well conditioned
    let (mut s, mut q) = (0.0, 0.0);
    let (total_s, total_q) = sorted
        .iter()
        .fold((0.0, 0.0), |(a, b), x| (a + (x - mean), b + (x - mean) * (x - mean)));
    let mut best = (f64::INFINITY, 1);
    for k in 1..n {
        let x = sorted[k - 1] - mean;
        s += x;
        q += x * x;
        if sorted[k - 1] == sorted[k] {
            continue;
        }
        let left = q - s * s / k as f64;
        let right = (total_q - q) - (total_s - s).powi(2) / (n - k) as f64;
        if left + right < best.0 {
            best = (left + right, k);
        }
    }
    let mut out = vec![0u8; n];
    for &i in &order[best.1..] {
        out[i] = 1;
    }
    out
}

pub const KMEANS_TOLERANCE: f64 = 1e-12;
pub const KMEANS_MAX_ITERS: usize = 300;

/// 2-means of one class's model outputs, with per-cluster mean loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub class: i8,
    /// Dataset indices of this class, in order; `kmeans.assignments` is parallel to it.
    pub indices: Vec<usize>,
    pub kmeans: KMeansResult,
    /// Multiplicity-weighted mean logistic loss per cluster (NaN when empty).
    pub mean_loss: [f64; 2],
    /// Higher-mean-loss cluster; `None` when the clustering is degenerate.
    pub slow_cluster: Option<usize>,
}

impl ClusterResult {
    pub fn slow_members(&self) -> Vec<usize> {
        match self.slow_cluster {
            None => Vec::new(),
            Some(c) => self
                .indices
                .iter()
                .zip(&self.kmeans.assignments)
                .filter(|(_, &a)| a as usize == c)
                .map(|(&i, _)| i)
                .collect(),
        }
    }
}

fn pick_slow(mean_loss: [f64; 2], sizes: [usize; 2]) -> usize {
    if mean_loss[1] > mean_loss[0] {
        1
    } else if mean_loss[0] > mean_loss[1] {
        0
    } else if sizes[1] < sizes[0] {
        1
    } else {
        0
    }
}

/// Clusters the outputs `f(x; W)` of each class separately (class -1 first).
pub fn separate(w: &WeightMatrix, ds: &Dataset) -> Result<Vec<ClusterResult>> {
    let out = outputs(w, ds)?;
    let results: Vec<Result<ClusterResult>> = [-1i8, 1]
        .par_iter()
        .map(|&class| {
            let indices: Vec<usize> = (0..ds.len()).filter(|&i| ds.examples()[i].label() == class).collect();
            if indices.len() < 2 {
                return Err(Error::ClassTooSmall {
                    class,
                    count: indices.len(),
                });
            }
            let values: Vec<f64> = indices.iter().map(|&i| out[i]).collect();
            let kmeans = kmeans_two(&values, 1, KMEANS_TOLERANCE, KMEANS_MAX_ITERS)?;
            let mut loss = [0.0; 2];
            let mut weight = [0.0; 2];
            for (&i, &a) in indices.iter().zip(&kmeans.assignments) {
                let m = ds.multiplicity()[i] as f64;
                loss[a as usize] += m * logistic_loss(class as f64 * out[i]);
                weight[a as usize] += m;
            }
            let mean_loss = [loss[0] / weight[0], loss[1] / weight[1]];
            let slow_cluster = (!kmeans.degenerate).then(|| pick_slow(mean_loss, kmeans.sizes));
            Ok(ClusterResult {
                class,
                indices,
                kmeans,
                mean_loss,
                slow_cluster,
            })
        })
        .collect();
    results.into_iter().collect()
}

/// First iteration `t` at which the mean per-iteration drop in training error
/// over `[t - window, t]` falls below `shrink_ratio` times the largest such
/// drop seen so far.
pub fn detect_knee(errors: &[f64], window: usize, shrink_ratio: f64) -> Result<usize> {
    if window == 0 {
        return Err(Error::InvalidConfig("window must be >= 1".into()));
    }
    if errors.len() < 2 * window {
        return Err(Error::TraceTooShort {
            len: errors.len(),
            needed: 2 * window,
        });
    }
    let mut best = 0.0f64;
    for t in window..errors.len() {
        let drop = (errors[t - window] - errors[t]) / window as f64;
        best = best.max(drop);
        if best > 0.0 && drop < shrink_ratio * best {
            return Ok(t);
        }
    }
    if best > 0.0 {
        Err(Error::NoKnee)
    } else {
        Err(Error::NeverDecreased)
    }
}

pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_SHRINK_RATIO: f64 = 0.25;

pub fn detect_separating_iteration(trace: &TrainTrace, window: usize, shrink_ratio: f64) -> Result<usize> {
    detect_knee(&trace.train_errors(), window, shrink_ratio)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: i8,
    pub sizes: [usize; 2],
    pub centers: [f64; 2],
    pub mean_loss: [f64; 2],
    pub slow_cluster: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsefulPlan {
    pub separating_iteration: usize,
    pub upsample_factor: u32,
    /// Sorted dataset indices of the upsampled examples.
    pub slow_indices: Vec<usize>,
    pub new_multiplicity: Vec<u32>,
    pub class_stats: Vec<ClassStats>,
}

impl UsefulPlan {
    /// Effective size after upsampling a dataset of unit multiplicities.
    pub fn effective_size(&self) -> u64 {
        self.new_multiplicity.iter().map(|&m| m as u64).sum()
    }
}

pub fn build_plan(
    clusters: &[ClusterResult],
    upsample_factor: u32,
    separating_iteration: usize,
    n: usize,
) -> Result<UsefulPlan> {
    if upsample_factor < 1 {
        return Err(Error::InvalidConfig("upsample factor must be >= 1".into()));
    }
    let mut slow_indices = Vec::new();
    let mut class_stats = Vec::new();
    for c in clusters {
        let slow = c.slow_cluster.ok_or(Error::DegenerateClustering { class: c.class })?;
        slow_indices.extend(c.slow_members());
        class_stats.push(ClassStats {
            class: c.class,
            sizes: c.kmeans.sizes,
            centers: [c.kmeans.centers[0][0], c.kmeans.centers[1][0]],
            mean_loss: c.mean_loss,
            slow_cluster: slow,
        });
    }
    slow_indices.sort_unstable();
    let mut new_multiplicity = vec![1u32; n];
    for &i in &slow_indices {
        if i >= n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: i + 1,
            });
        }
        new_multiplicity[i] = upsample_factor;
    }
    Ok(UsefulPlan {
        separating_iteration,
        upsample_factor,
        slow_indices,
        new_multiplicity,
        class_stats,
    })
}

/// Multiplies the dataset's multiplicities by the plan's.
pub fn apply_plan(ds: &Dataset, plan: &UsefulPlan) -> Result<Dataset> {
    if plan.new_multiplicity.len() != ds.len() {
        return Err(Error::DimensionMismatch {
            expected: ds.len(),
            got: plan.new_multiplicity.len(),
        });
    }
    let mult = ds
        .multiplicity()
        .iter()
        .zip(&plan.new_multiplicity)
        .map(|(&a, &b)| a * b)
        .collect();
    ds.with_multiplicity(mult)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SeparatingMode {
    Auto { window: usize, shrink_ratio: f64 },
    Fixed { iteration: usize },
}

impl Default for SeparatingMode {
    fn default() -> Self {
        SeparatingMode::Auto {
            window: DEFAULT_WINDOW,
            shrink_ratio: DEFAULT_SHRINK_RATIO,
        }
    }
}

fn default_factor() -> u32 {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UsefulConfig {
    #[serde(default)]
    pub separating: SeparatingMode,
    #[serde(default = "default_factor")]
    pub factor: u32,
    /// Restart from a fresh draw instead of the probe's initialization.
    #[serde(default)]
    pub fresh_init: Option<InitSpec>,
}

impl Default for UsefulConfig {
    fn default() -> Self {
        UsefulConfig {
            separating: SeparatingMode::default(),
            factor: default_factor(),
            fresh_init: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsefulOutcome {
    pub plan: UsefulPlan,
    pub clusters: Vec<ClusterResult>,
    /// Full-budget run on the original data; the probe is its prefix up to
    /// the separating iteration.
    pub baseline: TrainTrace,
    /// Full-budget run on the upsampled data.
    pub retrained: TrainTrace,
}

impl UsefulOutcome {
    pub fn separating_iteration(&self) -> usize {
        self.plan.separating_iteration
    }
}

pub fn run_useful(
    ds: &Dataset,
    w0: &WeightMatrix,
    base: &OptimizerConfig,
    useful: &UsefulConfig,
    options: &TrainOptions<'_>,
) -> Result<UsefulOutcome> {
    base.validate()?;
    let (separating_iteration, baseline, w_t) = match useful.separating {
        SeparatingMode::Fixed { iteration } => {
            if iteration > base.iterations {
                return Err(Error::InvalidConfig(format!(
                    "separating iteration {iteration} exceeds the budget of {}",
                    base.iterations
                )));
            }
            let mut w_t = None;
            let mut grab = |snap: &Snapshot<'_>| {
                if snap.iteration == iteration {
                    w_t = Some(snap.weights.clone());
                }
            };
            let baseline = train(w0, ds, base, options, &mut [&mut grab])?;
            (iteration, baseline, w_t.expect("every iterate is observed"))
        }
        SeparatingMode::Auto { window, shrink_ratio } => {
            let mut recorder = WeightRecorder::default();
            let baseline = train(w0, ds, base, options, &mut [&mut recorder])?;
            let t = detect_separating_iteration(&baseline, window, shrink_ratio)?;
            let w_t = recorder.weights.swap_remove(t);
            (t, baseline, w_t)
        }
    };

    let clusters = separate(&w_t, ds)?;
    let plan = build_plan(&clusters, useful.factor, separating_iteration, ds.len())?;
    let upsampled = apply_plan(ds, &plan)?;
    let restart = match &useful.fresh_init {
        Some(init) => init_weights(init, w0.filters(), w0.dim(), ds.basis())?,
        None => w0.clone(),
    };
    let retrained = train(&restart, &upsampled, base, options, &mut [])?;
    Ok(UsefulOutcome {
        plan,
        clusters,
        baseline,
        retrained,
    })
}
