//! Synthetic continual task generation and non-IID client partitioning.
//!
//! Task 0 places axis-aligned Gaussian class clusters; task t rotates the
//! class means (not the noise) by an angle that grows with t and the
//! `opposition` knob, so that at `opposition = 1` the last task's means are
//! exact negations of the first task's and mean task gradients oppose.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{CoreError, Result};
use crate::model::{predict, MoeLoraModel};
use crate::rng::{stream_rng, Stream};

/// Norm of every class mean in task 0.
pub const MEAN_NORM: f64 = 2.5;

/// Isotropic within-class noise scale; rotations never touch it, so the
/// intra-task gradient spread stays comparable across tasks.
pub const NOISE_SCALE: f64 = 0.6;

/// Rank of the shared low-rank noise component common to every task.
pub const SHARED_NOISE_RANK: usize = 6;

/// Scale of the shared component. Like a frozen backbone's representation
/// energy, it dominates the raw activation covariance of every task while
/// carrying no label information.
pub const SHARED_NOISE_SCALE: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Rotated class means, one per class.
    pub class_means: Vec<DVector<f64>>,
    /// Orthogonal rotation taking task-0 means to this task's means.
    pub rotation: DMatrix<f64>,
    /// Rotation angle relative to task 0, radians.
    pub opposition_angle: f64,
    pub noise_scale: f64,
}

#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub inputs: Vec<DVector<f64>>,
    pub labels: Vec<usize>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Per-client index lists into a task's sample pool.
#[derive(Debug, Clone)]
pub struct ClientPartition {
    pub assignments: Vec<Vec<usize>>,
    pub beta: f64,
}

impl ClientPartition {
    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    /// FedAvg mixing weights |D_c| / |D|.
    pub fn weights(&self) -> Vec<f64> {
        let total: usize = self.assignments.iter().map(Vec::len).sum();
        self.assignments
            .iter()
            .map(|a| a.len() as f64 / total as f64)
            .collect()
    }

    pub fn subset(&self, client: usize, pool: &SampleBatch) -> SampleBatch {
        let idx = &self.assignments[client];
        SampleBatch {
            inputs: idx.iter().map(|&i| pool.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| pool.labels[i]).collect(),
        }
    }
}

/// Rotation by `angle` in a set of disjoint coordinate planes chosen so each
/// class-mean axis lies in exactly one plane. With `2m <= d` the plane for
/// class c pairs axis c with a task-specific partner axis in `m..d`, so
/// intermediate tasks sweep through directions of their own while every
/// full-angle rotation still negates the means; tasks reuse partner axes
/// cyclically when the sequence is long. With `2m > d` adjacent axes are
/// paired, which still rotates every mean unless d is odd and m = d (the
/// final axis then stays fixed).
fn mean_rotation(d: usize, m: usize, task: usize, angle: f64) -> DMatrix<f64> {
    let mut rot = DMatrix::<f64>::identity(d, d);
    let (cos, sin) = (angle.cos(), angle.sin());
    let planes: Vec<(usize, usize)> = if 2 * m <= d {
        let _ = task;
        (0..m).map(|c| (c, m + c)).collect()
    } else {
        (0..d / 2).map(|i| (2 * i, 2 * i + 1)).collect()
    };
    for (i, j) in planes {
        rot[(i, i)] = cos;
        rot[(j, j)] = cos;
        rot[(i, j)] = -sin;
        rot[(j, i)] = sin;
    }
    rot
}

/// Generate a continual task sequence with controllable inter-task gradient
/// opposition. Deterministic given the seed.
pub fn generate_sequence(
    n_tasks: usize,
    d: usize,
    m: usize,
    samples_per_task: usize,
    opposition: f64,
    seed: u64,
) -> Result<Vec<(TaskSpec, SampleBatch)>> {
    if m < 2 || d < m {
        return Err(CoreError::contract(format!(
            "need m >= 2 and d >= m, got m = {m}, d = {d}"
        )));
    }
    if !(0.0..=1.0).contains(&opposition) {
        return Err(CoreError::contract(format!(
            "opposition must lie in [0, 1], got {opposition}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::TaskGen);
    let base_means: Vec<DVector<f64>> = (0..m)
        .map(|c| {
            let mut v = DVector::zeros(d);
            v[c] = MEAN_NORM;
            v
        })
        .collect();

    // Shared low-rank noise directions, drawn once for the whole sequence.
    let shared_rank = SHARED_NOISE_RANK.min(d);
    let shared_basis = crate::subspace::random_orthonormal(d, shared_rank, &mut rng);

    let mut out = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        // Convex angle schedule: later tasks sit far from every earlier one,
        // so at high opposition the final task conflicts with the whole
        // prefix rather than only with task 0.
        let angle = if n_tasks > 1 {
            let frac = t as f64 / (n_tasks - 1) as f64;
            opposition * std::f64::consts::PI * frac * frac
        } else {
            0.0
        };
        let rotation = mean_rotation(d, m, t, angle);
        let class_means: Vec<DVector<f64>> =
            base_means.iter().map(|mu| &rotation * mu).collect();

        let mut labels: Vec<usize> = (0..samples_per_task).map(|i| i % m).collect();
        labels.shuffle(&mut rng);
        let inputs: Vec<DVector<f64>> = labels
            .iter()
            .map(|&c| {
                let noise =
                    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * NOISE_SCALE);
                let z = DVector::from_fn(shared_rank, |_, _| {
                    rng.sample::<f64, _>(StandardNormal) * SHARED_NOISE_SCALE
                });
                &class_means[c] + noise + shared_basis.matrix() * z
            })
            .collect();

        out.push((
            TaskSpec {
                task_id: t,
                class_means,
                rotation,
                opposition_angle: angle,
                noise_scale: NOISE_SCALE,
            },
            SampleBatch { inputs, labels },
        ));
    }
    Ok(out)
}

/// Label-skew Dirichlet partition: per-class client proportions drawn from
/// Dirichlet(beta), samples split contiguously per class by largest
/// remainder. Draws are repeated until every client is nonempty; after 100
/// failed draws the largest client donates one sample to each empty one.
pub fn dirichlet_partition(
    n_samples: usize,
    labels: &[usize],
    n_clients: usize,
    beta: f64,
    seed: u64,
) -> Result<ClientPartition> {
    if labels.len() != n_samples {
        return Err(CoreError::contract("labels length must equal n_samples"));
    }
    if n_clients == 0 {
        return Err(CoreError::contract("need at least one client"));
    }
    if n_clients > n_samples {
        return Err(CoreError::contract(format!(
            "cannot give {n_clients} clients at least one of {n_samples} samples"
        )));
    }
    if beta <= 0.0 {
        return Err(CoreError::contract("beta must be positive"));
    }

    let n_classes = labels.iter().copied().max().map_or(0, |c| c + 1);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        per_class[c].push(i);
    }

    let mut rng = stream_rng(seed, Stream::Partition { task: 0 });
    let gamma = Gamma::new(beta, 1.0)
        .map_err(|e| CoreError::contract(format!("invalid beta for Dirichlet: {e}")))?;

    let mut assignments = vec![Vec::new(); n_clients];
    for attempt in 0..=100 {
        for a in &mut assignments {
            a.clear();
        }
        for class_idx in per_class.iter().filter(|v| !v.is_empty()) {
            // Dirichlet draw via normalized Gamma variates.
            let draws: Vec<f64> = (0..n_clients)
                .map(|_| gamma.sample(&mut rng).max(1e-300))
                .collect();
            let total: f64 = draws.iter().sum();
            let props: Vec<f64> = draws.iter().map(|g| g / total).collect();
            let counts = largest_remainder_counts(&props, class_idx.len());
            let mut start = 0;
            for (c, count) in counts.iter().enumerate() {
                assignments[c].extend_from_slice(&class_idx[start..start + count]);
                start += count;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            break;
        }
        if attempt == 100 {
            // Deterministic fix-up: largest client donates to each empty one.
            for c in 0..n_clients {
                if assignments[c].is_empty() {
                    let donor = (0..n_clients)
                        .max_by_key(|&i| assignments[i].len())
                        .unwrap();
                    let moved = assignments[donor].pop().expect("donor nonempty");
                    assignments[c].push(moved);
                }
            }
        }
    }

    Ok(ClientPartition {
        assignments,
        beta,
    })
}

/// Integer counts proportional to `props` summing to `total`, floor plus
/// largest fractional remainder, ties to the lower index.
fn largest_remainder_counts(props: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rem = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&i, &j| {
        let fi = raw[i] - raw[i].floor();
        let fj = raw[j] - raw[j].floor();
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    for i in order {
        if rem == 0 {
            break;
        }
        counts[i] += 1;
        rem -= 1;
    }
    counts
}

/// Fraction of samples whose argmax logit equals the label; argmax ties go
/// to the lowest class index.
pub fn evaluate_accuracy(model: &MoeLoraModel, batch: &SampleBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::contract("cannot evaluate an empty batch"));
    }
    let correct = batch
        .inputs
        .iter()
        .zip(&batch.labels)
        .filter(|(x, &label)| {
            let (logits, _) = model.forward(x);
            predict(&logits) == label
        })
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Export a batch as a CSV pair (inputs, labels) for inspection.
pub fn write_batch_csv(batch: &SampleBatch, dir: &Path, task_id: usize) -> Result<()> {
    let mut inputs = std::fs::File::create(dir.join(format!("task_{task_id}_inputs.csv")))?;
    for x in &batch.inputs {
        let row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        writeln!(inputs, "{}", row.join(","))?;
    }
    let mut labels = std::fs::File::create(dir.join(format!("task_{task_id}_labels.csv")))?;
    for l in &batch.labels {
        writeln!(labels, "{l}")?;
    }
    Ok(())
}
