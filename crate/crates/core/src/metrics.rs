//! Continual-learning metrics (average accuracy, backward and forward
//! transfer), subspace diagnostics, routing statistics, and capacity
//! accounting, plus the CSV emitters for run artifacts.

use std::io::Write as IoWrite;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::subspace::{self, OrthonormalBasis, ProtectionBasis};

/// `r[i][j]` is the test accuracy on task j after training task i; entries
/// with j > i are measured before task j's training begins.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AccuracyMatrix {
    pub r: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn n_tasks(&self) -> usize {
        self.r.len()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for row in &self.r {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut r = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|c| c.trim().parse::<f64>()).collect();
            r.push(row.map_err(|e| CoreError::contract(format!("bad accuracy cell: {e}")))?);
        }
        Ok(Self { r })
    }
}

/// The metric triple over an accuracy matrix. BWT and FWT are undefined for
/// single-task runs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ClMetrics {
    pub aa: f64,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
}

/// AA = mean of the last row; BWT = mean over j < N of R[N][j] - R[j][j];
/// FWT = mean over j >= 2 of R[j-1][j].
pub fn compute_aa_bwt_fwt(matrix: &AccuracyMatrix) -> Result<ClMetrics> {
    let n = matrix.n_tasks();
    if n == 0 {
        return Err(CoreError::contract("empty accuracy matrix"));
    }
    for row in &matrix.r {
        if row.len() != n {
            return Err(CoreError::contract("accuracy matrix must be square"));
        }
    }
    let last = &matrix.r[n - 1];
    let aa = last.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return Ok(ClMetrics {
            aa,
            bwt: None,
            fwt: None,
        });
    }
    let bwt = (0..n - 1)
        .map(|j| last[j] - matrix.r[j][j])
        .sum::<f64>()
        / (n - 1) as f64;
    let fwt = (1..n).map(|j| matrix.r[j - 1][j]).sum::<f64>() / (n - 1) as f64;
    Ok(ClMetrics {
        aa,
        bwt: Some(bwt),
        fwt: Some(fwt),
    })
}

/// Fraction k/d of the ambient dimension locked by a protection basis.
pub fn nullspace_consumption(basis: &ProtectionBasis, d: usize) -> f64 {
    basis.rank() as f64 / d as f64
}

/// Residual feasible update directions on the rank-r manifold after
/// protecting `k_cum` total directions: `2r(d - k_cum)` for a single shared
/// basis, `2r(E d - k_cum)` when protection is per expert; never negative.
pub fn plasticity_capacity(r: usize, d: usize, e: usize, k_cum: usize, per_expert: bool) -> usize {
    let horizon = if per_expert { e * d } else { d };
    2 * r * horizon.saturating_sub(k_cum)
}

/// Activation/gradient overlap for one task pair at a common rank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairOverlap {
    pub task_a: usize,
    pub task_b: usize,
    pub omega_activation: f64,
    pub omega_gradient: f64,
    pub k_used: usize,
    /// Set when a rank-deficient covariance forced k below the requested one.
    pub reduced: bool,
}

/// Per task: the top-k basis of the raw activation stack `[h_i]` and of the
/// sensitivity-weighted stack `[sqrt(s_i) h_i]`, plus their achievable ranks.
struct TaskSubspaces {
    activation: OrthonormalBasis,
    gradient: OrthonormalBasis,
}

/// For every task pair, the overlap of the top-k activation subspaces
/// (`Omega^a`) and of the top-k sensitivity-weighted subspaces (`Omega^g`),
/// both at the same k. Rank-deficient pairs are reduced to the achievable
/// rank and flagged.
pub fn overlap_contrast(
    task_samples: &[Vec<(DVector<f64>, f64)>],
    k: usize,
) -> Result<Vec<PairOverlap>> {
    if task_samples.len() < 2 {
        return Err(CoreError::contract("need at least two tasks of traces"));
    }
    if k == 0 {
        return Err(CoreError::contract("k must be positive"));
    }
    let d = task_samples
        .first()
        .and_then(|t| t.first())
        .map(|(h, _)| h.len())
        .ok_or_else(|| CoreError::contract("empty task trace"))?;

    // One SVD per stack, shared across pairs.
    let mut spaces = Vec::with_capacity(task_samples.len());
    let mut ranks = Vec::with_capacity(task_samples.len());
    for samples in task_samples {
        if samples.is_empty() {
            return Err(CoreError::contract("empty task trace"));
        }
        let mut act = DMatrix::<f64>::zeros(d, samples.len());
        let mut grad = DMatrix::<f64>::zeros(d, samples.len());
        for (j, (h, s)) in samples.iter().enumerate() {
            act.set_column(j, h);
            grad.set_column(j, &(h * s.sqrt()));
        }
        let (act_basis, act_rank) = thin_basis(&act);
        let (grad_basis, grad_rank) = thin_basis(&grad);
        ranks.push(act_rank.min(grad_rank));
        spaces.push(TaskSubspaces {
            activation: act_basis,
            gradient: grad_basis,
        });
    }

    let mut out = Vec::new();
    for i in 0..spaces.len() {
        for j in (i + 1)..spaces.len() {
            let k_used = k.min(ranks[i]).min(ranks[j]);
            if k_used == 0 {
                return Err(CoreError::contract(format!(
                    "tasks {i} and {j} have no usable covariance rank"
                )));
            }
            let slice = |b: &OrthonormalBasis| {
                OrthonormalBasis::new(b.matrix().columns(0, k_used).into_owned())
                    .expect("slice of orthonormal columns")
            };
            let omega_a =
                subspace::subspace_overlap(&slice(&spaces[i].activation), &slice(&spaces[j].activation))?;
            let omega_g =
                subspace::subspace_overlap(&slice(&spaces[i].gradient), &slice(&spaces[j].gradient))?;
            out.push(PairOverlap {
                task_a: i,
                task_b: j,
                omega_activation: omega_a,
                omega_gradient: omega_g,
                k_used,
                reduced: k_used < k,
            });
        }
    }
    Ok(out)
}

fn thin_basis(stack: &DMatrix<f64>) -> (OrthonormalBasis, usize) {
    let svd = stack.clone().svd(true, false);
    let u = svd.u.expect("svd with u");
    let sigma = svd.singular_values;
    let sigma_max = sigma.iter().cloned().fold(0.0_f64, f64::max);
    let rank = if sigma_max == 0.0 {
        0
    } else {
        sigma.iter().filter(|s| **s > 1e-12 * sigma_max).count()
    };
    (
        OrthonormalBasis::new(u.columns(0, rank).into_owned()).expect("svd columns"),
        rank,
    )
}

/// Routing observations collected by the harness.
#[derive(Debug, Clone, Default)]
pub struct RoutingTraces {
    /// Per task: full routing vectors over that task's own samples (pooled
    /// across adapted layers).
    pub per_task: Vec<Vec<DVector<f64>>>,
    /// Per task snapshot: top-1 expert per probe sample on a fixed probe set.
    pub probe_top1: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingStats {
    /// heatmap[t][e]: mean routing weight of expert e over task-t samples.
    pub heatmap: Vec<Vec<f64>>,
    /// Fraction of (probe sample, consecutive snapshot) pairs whose top-1
    /// expert changed.
    pub flip_rate: f64,
    /// Mean routing entropy over all recorded vectors.
    pub mean_entropy: f64,
}

pub fn routing_stats(traces: &RoutingTraces) -> RoutingStats {
    let mut heatmap = Vec::with_capacity(traces.per_task.len());
    let mut entropy_sum = 0.0;
    let mut entropy_count = 0usize;
    for task in &traces.per_task {
        if task.is_empty() {
            heatmap.push(Vec::new());
            continue;
        }
        let e = task[0].len();
        let mut mean = vec![0.0; e];
        for pi in task {
            for (slot, v) in pi.iter().enumerate() {
                mean[slot] += v;
            }
            entropy_sum += -pi
                .iter()
                .map(|p| if *p > 0.0 { p * p.ln() } else { 0.0 })
                .sum::<f64>();
            entropy_count += 1;
        }
        for v in &mut mean {
            *v /= task.len() as f64;
        }
        heatmap.push(mean);
    }

    let mut flips = 0usize;
    let mut comparisons = 0usize;
    for pair in traces.probe_top1.windows(2) {
        for (a, b) in pair[0].iter().zip(pair[1].iter()) {
            comparisons += 1;
            if a != b {
                flips += 1;
            }
        }
    }
    RoutingStats {
        heatmap,
        flip_rate: if comparisons == 0 {
            0.0
        } else {
            flips as f64 / comparisons as f64
        },
        mean_entropy: if entropy_count == 0 {
            0.0
        } else {
            entropy_sum / entropy_count as f64
        },
    }
}

pub fn write_accuracy_matrix_csv(path: &Path, matrix: &AccuracyMatrix) -> Result<()> {
    std::fs::write(path, matrix.to_csv_string())?;
    Ok(())
}

pub fn write_heatmap_csv(path: &Path, heatmap: &[Vec<f64>]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    if let Some(first) = heatmap.first() {
        let header: Vec<String> = (0..first.len()).map(|e| format!("expert_{e}")).collect();
        writeln!(file, "task,{}", header.join(","))?;
    }
    for (t, row) in heatmap.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(file, "{t},{}", cells.join(","))?;
    }
    Ok(())
}

/// Generic long-format emitter used for metrics and diagnostics files.
pub fn write_rows_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{header}")?;
    for row in rows {
        writeln!(file, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::Spectrum;

    #[test]
    fn metric_triple_hand_example() {
        let m = AccuracyMatrix {
            r: vec![
                vec![0.6, 0.2, 0.1],
                vec![0.5, 0.7, 0.3],
                vec![0.4, 0.6, 0.8],
            ],
        };
        let out = compute_aa_bwt_fwt(&m).unwrap();
        assert!((out.aa - 0.6).abs() <= 1e-15);
        assert!((out.bwt.unwrap() + 0.15).abs() <= 1e-15);
        assert!((out.fwt.unwrap() - 0.25).abs() <= 1e-15);
    }

    #[test]
    fn constant_last_row_gives_its_mean() {
        let m = AccuracyMatrix {
            r: vec![vec![0.9, 0.1], vec![0.5, 0.5]],
        };
        assert!((compute_aa_bwt_fwt(&m).unwrap().aa - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn uniform_forgetting_example() {
        // R[j][j] = 0.8, R[N][j] = 0.7 for j < N: BWT = -0.1.
        let m = AccuracyMatrix {
            r: vec![
                vec![0.8, 0.0, 0.0],
                vec![0.0, 0.8, 0.0],
                vec![0.7, 0.7, 0.9],
            ],
        };
        assert!((compute_aa_bwt_fwt(&m).unwrap().bwt.unwrap() + 0.1).abs() <= 1e-12);
    }

    #[test]
    fn single_task_flags_undefined_transfer() {
        let m = AccuracyMatrix { r: vec![vec![0.75]] };
        let out = compute_aa_bwt_fwt(&m).unwrap();
        assert_eq!(out.aa, 0.75);
        assert!(out.bwt.is_none() && out.fwt.is_none());
    }

    #[test]
    fn matrix_round_trips_through_csv_exactly() {
        let m = AccuracyMatrix {
            r: vec![
                vec![0.6123456789012345, 1.0 / 3.0],
                vec![f64::MIN_POSITIVE, 0.9999999999999999],
            ],
        };
        let back = AccuracyMatrix::from_csv_str(&m.to_csv_string()).unwrap();
        assert_eq!(m, back);
        assert_eq!(
            compute_aa_bwt_fwt(&m).unwrap(),
            compute_aa_bwt_fwt(&back).unwrap()
        );
    }

    #[test]
    fn consumption_fractions() {
        let d = 12;
        assert_eq!(nullspace_consumption(&ProtectionBasis::empty(d), d), 0.0);
        let mut rng = crate::rng::stream_rng(1, crate::rng::Stream::Oracle { trial: 30 });
        let full = ProtectionBasis {
            basis: crate::subspace::random_orthonormal(d, d, &mut rng),
            spectrum: Spectrum::empty(),
        };
        assert_eq!(nullspace_consumption(&full, d), 1.0);
        let part = ProtectionBasis {
            basis: crate::subspace::random_orthonormal(d, 3, &mut rng),
            spectrum: Spectrum::empty(),
        };
        assert!((nullspace_consumption(&part, d) - 0.25).abs() <= 1e-15);
    }

    #[test]
    fn capacity_formula() {
        // Saturation of the shared basis.
        assert_eq!(plasticity_capacity(4, 16, 4, 16, false), 0);
        // The per-expert horizon survives the same cumulative rank.
        assert_eq!(plasticity_capacity(4, 16, 4, 16, true), 2 * 4 * (64 - 16));
        // Formula evaluation: r=8, d=64, E=4, k_cum=96.
        assert_eq!(plasticity_capacity(8, 64, 4, 96, false), 0);
        assert_eq!(plasticity_capacity(8, 64, 4, 96, true), 2560);
    }

    fn axis(d: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        v
    }

    #[test]
    fn identical_tasks_have_unit_overlaps() {
        let d = 6;
        let samples: Vec<(DVector<f64>, f64)> = (0..8)
            .map(|i| (axis(d, i % 3) + axis(d, (i + 1) % 3) * 0.2, 1.0 + i as f64))
            .collect();
        let out = overlap_contrast(&[samples.clone(), samples], 2).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].omega_activation - 1.0).abs() <= 1e-9);
        assert!((out[0].omega_gradient - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn constant_sensitivity_degenerates_weighting() {
        let d = 6;
        let mut rng = crate::rng::stream_rng(2, crate::rng::Stream::Oracle { trial: 31 });
        let make = |rng: &mut rand_chacha::ChaCha12Rng| -> Vec<(DVector<f64>, f64)> {
            (0..10)
                .map(|_| {
                    (
                        DVector::from_fn(d, |_, _| {
                            rand::Rng::sample::<f64, _>(rng, rand_distr::StandardNormal)
                        }),
                        3.7,
                    )
                })
                .collect()
        };
        let t0 = make(&mut rng);
        let t1 = make(&mut rng);
        let out = overlap_contrast(&[t0, t1], 3).unwrap();
        assert!(
            (out[0].omega_activation - out[0].omega_gradient).abs() <= 1e-9,
            "uniform s must make both overlaps equal: {} vs {}",
            out[0].omega_activation,
            out[0].omega_gradient
        );
    }

    #[test]
    fn disjoint_sensitive_subsets_separate_gradient_overlap() {
        let d = 8;
        // Both tasks share the same inputs spanning e0..e3, but task 0 is
        // loss-sensitive only on e0/e1 samples and task 1 only on e2/e3.
        let inputs: Vec<DVector<f64>> = (0..40).map(|i| axis(d, i % 4)).collect();
        let t0: Vec<(DVector<f64>, f64)> = inputs
            .iter()
            .map(|h| {
                let hot = h[0] != 0.0 || h[1] != 0.0;
                (h.clone(), if hot { 1.0 } else { 1e-9 })
            })
            .collect();
        let t1: Vec<(DVector<f64>, f64)> = inputs
            .iter()
            .map(|h| {
                let hot = h[2] != 0.0 || h[3] != 0.0;
                (h.clone(), if hot { 1.0 } else { 1e-9 })
            })
            .collect();
        let out = overlap_contrast(&[t0, t1], 2).unwrap();
        assert!(
            out[0].omega_activation > out[0].omega_gradient + 0.5,
            "expected activation >> gradient overlap, got {} vs {}",
            out[0].omega_activation,
            out[0].omega_gradient
        );
    }

    #[test]
    fn routing_stats_examples() {
        // Single expert: heatmap column of 1, entropy 0.
        let traces = RoutingTraces {
            per_task: vec![vec![DVector::from_element(1, 1.0); 4]],
            probe_top1: vec![vec![0; 4], vec![0; 4]],
        };
        let stats = routing_stats(&traces);
        assert_eq!(stats.heatmap[0], vec![1.0]);
        assert_eq!(stats.flip_rate, 0.0);
        assert!(stats.mean_entropy.abs() <= 1e-15);

        // A flip between consecutive snapshots.
        let traces = RoutingTraces {
            per_task: vec![vec![DVector::from_vec(vec![0.5, 0.5])]],
            probe_top1: vec![vec![0, 1], vec![1, 1]],
        };
        let stats = routing_stats(&traces);
        assert!((stats.flip_rate - 0.5).abs() <= 1e-15);
        // Heatmap rows sum to one.
        for row in &stats.heatmap {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }
}
