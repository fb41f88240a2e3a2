//! Independent brute-force verifiers for the structural claims the training
//! machinery relies on: conic-hull gradient conflict, the cone-ceiling
//! alignment bound, the bilateral residual order, the subspace entanglement
//! bound, exhaustive water-filling search, and the Kronecker projector rank.
//!
//! Every construction here is elementary (explicit loops, materialized
//! matrices, exhaustive enumeration) and deliberately avoids the modules it
//! validates except for final comparisons.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};
use crate::rng::{stream_rng, Stream};

fn oracle_rng(seed: u64) -> ChaCha12Rng {
    stream_rng(seed, Stream::Oracle { trial: 0 })
}

fn gaussian_vector<R: Rng>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Uniform draw from the ball of the given radius.
fn ball_noise<R: Rng>(d: usize, radius: f64, rng: &mut R) -> DVector<f64> {
    let dir = gaussian_vector(d, rng);
    let norm = dir.norm();
    if norm == 0.0 {
        return DVector::zeros(d);
    }
    let u: f64 = rng.random_range(0.0..1.0);
    dir * (radius * u.powf(1.0 / d as f64) / norm)
}

fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b) / (a.norm() * b.norm())
}

/// Orthonormal k-frame via QR of a Gaussian matrix; local to the oracle so
/// the sampler does not depend on the subspace module.
fn random_frame<R: Rng>(d: usize, k: usize, rng: &mut R) -> DMatrix<f64> {
    let gauss = DMatrix::<f64>::from_fn(d, k, |_, _| rng.sample(StandardNormal));
    gauss.qr().q().columns(0, k).into_owned()
}

/// Construct a two-task instance with mean opposition `<mu1, mu2> = -delta`
/// and per-sample noise of norm at most `sigma`, then measure the fraction
/// of random nonnegative routings whose cumulative gradients have negative
/// cosine. Under the dominance margin the fraction must be exactly 1.
pub fn conic_conflict_trial(
    d: usize,
    delta: f64,
    sigma: f64,
    n_samples: usize,
    n_routings: usize,
    seed: u64,
) -> Result<f64> {
    if d < 2 || delta <= 0.0 || sigma < 0.0 || n_samples == 0 || n_routings == 0 {
        return Err(CoreError::contract("bad conic trial arguments"));
    }
    let root = delta.sqrt();
    let mut mu1 = DVector::zeros(d);
    mu1[0] = root;
    let mut mu2 = DVector::zeros(d);
    mu2[0] = -root;
    mu2[1] = 0.5 * root;
    debug_assert!((mu1.dot(&mu2) + delta).abs() <= 1e-12 * delta.max(1.0));

    // Dominance margin: sigma^2 + sigma (||mu1|| + ||mu2||) < delta.
    let margin = sigma * sigma + sigma * (mu1.norm() + mu2.norm());
    if margin >= delta {
        return Err(CoreError::contract(format!(
            "inputs violate the dominance margin: {margin} >= {delta}"
        )));
    }

    let mut rng = oracle_rng(seed);
    let sample = |mu: &DVector<f64>, rng: &mut ChaCha12Rng| -> Vec<DVector<f64>> {
        (0..n_samples).map(|_| mu + ball_noise(d, sigma, rng)).collect()
    };
    let task1 = sample(&mu1, &mut rng);
    let task2 = sample(&mu2, &mut rng);

    let mut negative = 0usize;
    for _ in 0..n_routings {
        let cumulative = |grads: &[DVector<f64>], rng: &mut ChaCha12Rng| -> DVector<f64> {
            let mut g = DVector::zeros(d);
            for sample_grad in grads {
                let pi: f64 = rng.random_range(0.0..1.0);
                g += sample_grad * pi;
            }
            g
        };
        let g1 = cumulative(&task1, &mut rng);
        let g2 = cumulative(&task2, &mut rng);
        if cosine(&g1, &g2) < 0.0 {
            negative += 1;
        }
    }
    Ok(negative as f64 / n_routings as f64)
}

/// Minimum observed alignment of routing-weighted cumulative gradients with
/// the cluster mean, over random compliant sample sets and routings. The
/// cone-ceiling bound guarantees `cos >= (||mu|| - sigma) / (||mu|| + sigma)`.
pub fn cone_ceiling_check(
    mu: &DVector<f64>,
    sigma: f64,
    n_trials: usize,
    seed: u64,
) -> Result<f64> {
    if mu.norm() <= sigma {
        return Err(CoreError::contract("cone ceiling needs ||mu|| > sigma"));
    }
    let d = mu.len();
    let n_samples = 50;
    let mut rng = oracle_rng(seed);
    let mut min_cos = f64::INFINITY;
    for _ in 0..n_trials {
        let mut g = DVector::zeros(d);
        for _ in 0..n_samples {
            let pi: f64 = rng.random_range(0.0..1.0);
            g += (mu + ball_noise(d, sigma, &mut rng)) * pi;
        }
        if g.norm() == 0.0 {
            continue;
        }
        min_cos = min_cos.min(cosine(&g, mu));
    }
    Ok(min_cos)
}

/// The cone-ceiling constant `chi = (||mu|| - sigma) / (||mu|| + sigma)`.
pub fn cone_ceiling_bound(mu: &DVector<f64>, sigma: f64) -> f64 {
    (mu.norm() - sigma) / (mu.norm() + sigma)
}

/// Outcome of the residual-order probe.
#[derive(Debug, Clone)]
pub struct ResidualOrderFit {
    /// Residual `||P ((B+dB)(A+dA) - B A) h||` at each eta.
    pub residuals: Vec<f64>,
    /// Log-log slope of residual vs eta; `None` when every residual sits at
    /// machine epsilon (the exact-cancellation case).
    pub slope: Option<f64>,
    pub max_residual: f64,
    /// All residuals at or below 1e-12: the bilateral pass condition.
    pub exact_zero: bool,
}

/// Probe the order of the protected-subspace residual in the step size: a
/// one-sided scheme (project the A side only) leaves a first-order residual,
/// the bilateral scheme cancels it exactly through `P Pi = 0`.
pub fn residual_order_fit(
    d: usize,
    r: usize,
    eta_grid: &[f64],
    one_sided: bool,
    seed: u64,
) -> Result<ResidualOrderFit> {
    residual_order_fit_impl(d, r, eta_grid, one_sided, seed, 0.0)
}

/// Fault-injected variant used as a mutation self-check: `fault > 0` leaks a
/// fraction of the protected component through the B-side projector, which
/// must break the bilateral exact-zero condition.
pub fn residual_order_fit_faulted(
    d: usize,
    r: usize,
    eta_grid: &[f64],
    one_sided: bool,
    seed: u64,
    fault: f64,
) -> Result<ResidualOrderFit> {
    residual_order_fit_impl(d, r, eta_grid, one_sided, seed, fault)
}

fn residual_order_fit_impl(
    d: usize,
    r: usize,
    eta_grid: &[f64],
    one_sided: bool,
    seed: u64,
    fault: f64,
) -> Result<ResidualOrderFit> {
    if eta_grid.len() < 3 {
        return Err(CoreError::contract("eta grid must span at least 3 points"));
    }
    let k = (d / 4).max(1);
    let mut rng = oracle_rng(seed);
    let u = random_frame(d, k, &mut rng);
    let p = &u * u.transpose();
    let pi = DMatrix::<f64>::identity(d, d) - &p;

    let a = DMatrix::<f64>::from_fn(r, d, |_, _| rng.sample(StandardNormal));
    // B starts with P B = 0.
    let b_raw = DMatrix::<f64>::from_fn(d, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let b = &pi * b_raw;
    // h in range(U).
    let z = gaussian_vector(k, &mut rng);
    let h = &u * z;

    let g_a = DMatrix::<f64>::from_fn(r, d, |_, _| rng.sample(StandardNormal));
    let g_b = DMatrix::<f64>::from_fn(d, r, |_, _| rng.sample(StandardNormal));

    let b_projector = &pi + &p * fault;
    let mut residuals = Vec::with_capacity(eta_grid.len());
    for &eta in eta_grid {
        let delta_a = &g_a * &pi * (-eta);
        let delta_b = if one_sided {
            &g_b * (-eta)
        } else {
            &b_projector * &g_b * (-eta)
        };
        let update = (&b + &delta_b) * (&a + &delta_a) - &b * &a;
        residuals.push((&p * update * &h).norm());
    }

    let max_residual = residuals.iter().cloned().fold(0.0_f64, f64::max);
    let exact_zero = max_residual <= 1e-12;
    let slope = if exact_zero {
        None
    } else {
        Some(log_log_slope(eta_grid, &residuals))
    };
    Ok(ResidualOrderFit {
        residuals,
        slope,
        max_residual,
        exact_zero,
    })
}

fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y.iter())
        .filter(|(_, v)| **v > 0.0)
        .map(|(e, v)| (e.ln(), v.ln()))
        .collect();
    let n = pts.len() as f64;
    let mean_x = pts.iter().map(|(a, _)| a).sum::<f64>() / n;
    let mean_y = pts.iter().map(|(_, b)| b).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|(a, b)| (a - mean_x) * (b - mean_y)).sum();
    let var: f64 = pts.iter().map(|(a, _)| (a - mean_x) * (a - mean_x)).sum();
    cov / var
}

/// Sample pairs of k-dimensional subspaces uniformly inside a fixed
/// r_o-dimensional manifold of R^d and return the minimum observed overlap
/// `tr(P1 P2) / k`, computed with materialized projectors.
pub fn entanglement_sampler(
    d: usize,
    r_o: usize,
    k: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if k > r_o || r_o > d || k == 0 {
        return Err(CoreError::contract("need k <= r_o <= d with k >= 1"));
    }
    let mut rng = oracle_rng(seed);
    let manifold = random_frame(d, r_o, &mut rng);
    let mut min_overlap = f64::INFINITY;
    for _ in 0..n_pairs {
        let v1 = &manifold * random_frame(r_o, k, &mut rng);
        let v2 = &manifold * random_frame(r_o, k, &mut rng);
        let p1 = &v1 * v1.transpose();
        let p2 = &v2 * v2.transpose();
        let overlap = (&p1 * &p2).trace() / k as f64;
        min_overlap = min_overlap.min(overlap);
    }
    Ok(min_overlap)
}

/// Exhaustive integer water-filling: enumerate every allocation of `k_bar`
/// units over the layers and return the argmax of `sum_l gamma_l sqrt(k_l)`
/// (first maximum in lexicographic enumeration order).
pub fn waterfill_grid_search(gamma: &[f64], k_bar: usize) -> Result<Vec<usize>> {
    if gamma.is_empty() {
        return Err(CoreError::contract("no layers to allocate"));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut current = vec![0usize; gamma.len()];
    enumerate_compositions(gamma, k_bar, 0, &mut current, &mut best);
    Ok(best.expect("at least one composition exists").1)
}

fn enumerate_compositions(
    gamma: &[f64],
    remaining: usize,
    layer: usize,
    current: &mut Vec<usize>,
    best: &mut Option<(f64, Vec<usize>)>,
) {
    if layer == gamma.len() - 1 {
        current[layer] = remaining;
        let objective: f64 = gamma
            .iter()
            .zip(current.iter())
            .map(|(g, k)| g * (*k as f64).sqrt())
            .sum();
        match best {
            Some((value, _)) if objective <= *value => {}
            _ => *best = Some((objective, current.clone())),
        }
        return;
    }
    for k in 0..=remaining {
        current[layer] = k;
        enumerate_compositions(gamma, remaining - k, layer + 1, current, best);
    }
}

/// Materialize the d^2 x d^2 Kronecker bilateral projector for a random
/// rank-k basis and count its unit eigenvalues. Must equal (d - k)^2.
pub fn kron_unit_eigenvalue_count(d: usize, k: usize, seed: u64) -> Result<usize> {
    if k > d {
        return Err(CoreError::contract("k exceeds d"));
    }
    let mut rng = oracle_rng(seed);
    let u = random_frame(d, k, &mut rng);
    let pi = DMatrix::<f64>::identity(d, d) - &u * u.transpose();
    let mut kron = DMatrix::<f64>::zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            for p in 0..d {
                for q in 0..d {
                    kron[(i * d + p, j * d + q)] = pi[(i, j)] * pi[(p, q)];
                }
            }
        }
    }
    let eig = kron.symmetric_eigen();
    Ok(eig
        .eigenvalues
        .iter()
        .filter(|l| (**l - 1.0).abs() < 1e-6)
        .count())
}
