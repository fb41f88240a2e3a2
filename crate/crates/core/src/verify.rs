//! The verification suite: every oracle at its documented size, reported as
//! a pass/fail table. Each check pins its tolerance in code.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::metrics::write_rows_csv;
use crate::model::{cross_entropy, cross_entropy_grad, ModelShape, MoeLoraModel};
use crate::oracle;
use crate::rng::{stream_rng, Stream};
use crate::scheduler::{waterfill_budget, InterferenceLandscape};
use crate::server;
use crate::subspace::{self, random_orthonormal, CovarianceFactor};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn outcome(name: &str, started: Instant, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// FedAvg preserves factor orthogonality exactly: 1000 random trials of
/// bilaterally projected client gradients under random simplex weights.
pub fn check_fedavg_orthogonality(seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let tol = 1e-10;
    let mut rng = stream_rng(seed, Stream::Oracle { trial: 40 });
    let (d, r, n_clients) = (32, 4, 5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=8);
        let basis = random_orthonormal(d, k, &mut rng);
        let mut grads_a = Vec::with_capacity(n_clients);
        let mut grads_b = Vec::with_capacity(n_clients);
        for _ in 0..n_clients {
            let ga = DMatrix::from_fn(r, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let gb = DMatrix::from_fn(d, r, |_, _| rng.sample::<f64, _>(StandardNormal));
            let (pa, pb) = subspace::bilateral_project(&basis, &ga, &gb, 1.0)
                .expect("projection on valid shapes");
            grads_a.push(pa);
            grads_b.push(pb);
        }
        let raw: Vec<f64> = (0..n_clients)
            .map(|_| -rng.random_range(0.0_f64..1.0).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mean_a = server::weighted_mean_matrix(&grads_a, &weights).expect("shapes match");
        let mean_b = server::weighted_mean_matrix(&grads_b, &weights).expect("shapes match");
        worst = worst
            .max((mean_a * basis.matrix()).norm())
            .max((basis.matrix().transpose() * mean_b).norm());
    }
    outcome(
        "fedavg_orthogonality",
        started,
        worst <= tol,
        format!("max leak {worst:.3e} over 1000 trials (tolerance {tol:.0e})"),
    )
}

/// One-sided projection leaves a first-order residual (log-log slope
/// 1.0 +/- 0.1 over eta in 1e-1..1e-4); the bilateral residual is exactly
/// zero (<= 1e-12) at every eta.
pub fn check_residual_order(seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let grid = [1e-1, 1e-2, 1e-3, 1e-4];
    let one_sided = oracle::residual_order_fit(16, 4, &grid, true, seed.wrapping_add(1));
    let bilateral = oracle::residual_order_fit(16, 4, &grid, false, seed.wrapping_add(2));
    match (one_sided, bilateral) {
        (Ok(one), Ok(bi)) => {
            let slope = one.slope.unwrap_or(f64::NAN);
            let slope_ok = (slope - 1.0).abs() <= 0.1;
            let exact_ok = bi.exact_zero;
            outcome(
                "bilateral_residual_order",
                started,
                slope_ok && exact_ok,
                format!(
                    "one-sided slope {slope:.4} (want 1.0 +/- 0.1); bilateral max residual {:.3e} (want <= 1e-12)",
                    bi.max_residual
                ),
            )
        }
        (a, b) => outcome(
            "bilateral_residual_order",
            started,
            false,
            format!("oracle failed: {:?} / {:?}", a.err(), b.err()),
        ),
    }
}

/// Sampled subspace pairs inside an r_o-dimensional manifold respect the
/// overlap floor max(0, 2 - r_o/k).
pub fn check_entanglement_bound(seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let (d, r_o, k, pairs) = (32, 8, 6, 200);
    let bound = subspace::entanglement_bound(r_o, k).expect("valid budget");
    match oracle::entanglement_sampler(d, r_o, k, pairs, seed.wrapping_add(3)) {
        Ok(min_overlap) => outcome(
            "entanglement_bound",
            started,
            min_overlap >= bound - 1e-9,
            format!("min overlap {min_overlap:.6} over {pairs} pairs, bound {bound:.6}"),
        ),
        Err(e) => outcome("entanglement_bound", started, false, e.to_string()),
    }
}

/// Three sequential subspace unions at d=16, C=3 match a materialized
/// eigendecomposition chain: spectrum within 1e-6 relative, projector
/// distance within 1e-6.
pub fn check_pefosu_oracle_equivalence(seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let (d, k_l, n_clients) = (16, 3, 3);
    let mut rng = stream_rng(seed, Stream::Oracle { trial: 41 });
    let mut bank = server::BasisBank::per_expert(d, 1, 1);
    let mut m_oracle = DMatrix::<f64>::zeros(d, d);
    let mut worst_spectrum: f64 = 0.0;
    let mut worst_projector: f64 = 0.0;
    for _ in 0..3 {
        let weights = vec![1.0 / n_clients as f64; n_clients];
        let mut uploads = Vec::new();
        for _ in 0..n_clients {
            // Gap-separated column scales keep the comparison well posed.
            let cols = DMatrix::from_fn(d, k_l, |_, j| {
                rng.sample::<f64, _>(StandardNormal) * 2.5_f64.powi(-(j as i32))
            });
            uploads.push(vec![vec![CovarianceFactor::new(cols).expect("finite")]]);
        }
        for (c, up) in uploads.iter().enumerate() {
            let f = up[0][0].matrix();
            m_oracle += f * f.transpose() * weights[c];
        }
        if server::pefosu_update(&mut bank, &uploads, &weights, &[k_l]).is_err() {
            return outcome(
                "pefosu_oracle_equivalence",
                started,
                false,
                "union failed".into(),
            );
        }
        let entry = bank.basis_for(0, 0);
        let kept = entry.rank();

        let eig = m_oracle.clone().symmetric_eigen();
        let mut pairs: Vec<(f64, DVector<f64>)> = eig
            .eigenvalues
            .iter()
            .zip(eig.eigenvectors.column_iter())
            .map(|(l, v)| (*l, v.into_owned()))
            .collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

        for (i, v) in entry.spectrum.values().iter().enumerate() {
            worst_spectrum = worst_spectrum.max((v - pairs[i].0).abs() / pairs[i].0.max(1e-12));
        }
        let mut oracle_proj = DMatrix::<f64>::zeros(d, d);
        for (_, v) in pairs.iter().take(kept) {
            oracle_proj += v * v.transpose();
        }
        worst_projector = worst_projector.max((entry.basis.projector() - oracle_proj).norm());

        let mut truncated = DMatrix::<f64>::zeros(d, d);
        for (l, v) in pairs.iter().take(kept) {
            truncated += v * v.transpose() * *l;
        }
        m_oracle = truncated;
    }
    outcome(
        "pefosu_oracle_equivalence",
        started,
        worst_spectrum <= 1e-6 && worst_projector <= 1e-6,
        format!(
            "spectrum rel error {worst_spectrum:.3e}, projector distance {worst_projector:.3e} (tolerance 1e-6)"
        ),
    )
}

/// Water-filling: the closed form gives (9, 16) for gamma = (3, 4) at
/// k_bar = 25, and the integerized scheduler stays within one unit per layer
/// of exhaustive search over an L <= 4, k_bar <= 20 battery.
pub fn check_waterfill(_seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let landscape = |gamma: &[f64]| InterferenceLandscape {
        gamma: gamma.to_vec(),
        warnings: Vec::new(),
    };
    let closed = waterfill_budget(&landscape(&[3.0, 4.0]), 25, 1024)
        .map(|b| b.k_l)
        .unwrap_or_default();
    let grid = oracle::waterfill_grid_search(&[3.0, 4.0], 25).unwrap_or_default();
    let closed_ok = closed == vec![9, 16] && grid == vec![9, 16];

    let battery: Vec<(Vec<f64>, usize)> = vec![
        (vec![1.0, 1.0], 4),
        (vec![1.0, 2.0, 3.0], 14),
        (vec![0.5, 0.5], 9),
        (vec![2.0, 1.0, 1.0, 4.0], 20),
        (vec![1.0, 1.0, 1.0], 5),
        (vec![0.2, 0.9], 17),
        (vec![3.0, 4.0], 20),
        (vec![0.7, 0.1, 0.4], 12),
        (vec![5.0, 3.0, 2.0, 1.0], 18),
    ];
    let mut max_dev = 0i64;
    for (gamma, k_bar) in &battery {
        let exhaustive = oracle::waterfill_grid_search(gamma, *k_bar).unwrap_or_default();
        let scheduled = match waterfill_budget(&landscape(gamma), *k_bar, 1024) {
            Ok(b) => b.k_l,
            Err(_) => {
                return outcome("waterfill_optimality", started, false, "scheduler failed".into())
            }
        };
        for (a, b) in exhaustive.iter().zip(scheduled.iter()) {
            max_dev = max_dev.max((*a as i64 - *b as i64).abs());
        }
    }
    outcome(
        "waterfill_optimality",
        started,
        closed_ok && max_dev <= 1,
        format!(
            "closed form {closed:?} (want [9, 16]); max per-layer deviation {max_dev} over {} cases (want <= 1)",
            battery.len()
        ),
    )
}

/// A margin-compliant two-task instance conflicts on every random routing,
/// and the cone-ceiling alignment floor holds.
pub fn check_conic_conflict(seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let fraction =
        oracle::conic_conflict_trial(8, 4.0, 0.5, 60, 100, seed.wrapping_add(4)).unwrap_or(0.0);

    let mut mu = DVector::zeros(8);
    mu[0] = 2.0;
    let chi = oracle::cone_ceiling_bound(&mu, 1.0);
    let min_cos = oracle::cone_ceiling_check(&mu, 1.0, 300, seed.wrapping_add(5))
        .unwrap_or(f64::NEG_INFINITY);
    outcome(
        "conic_hull_conflict",
        started,
        fraction == 1.0 && min_cos >= chi - 1e-9,
        format!(
            "conflict fraction {fraction} (want 1.0); cone-ceiling min cos {min_cos:.6} vs chi {chi:.6}"
        ),
    )
}

/// The materialized Kronecker projector has exactly (d-k)^2 unit eigenvalues
/// for every d <= 8, k <= d.
pub fn check_kron_rank(seed: u64) -> CheckOutcome {
    let started = Instant::now();
    for d in 2..=8usize {
        for k in 0..=d {
            match oracle::kron_unit_eigenvalue_count(d, k, seed.wrapping_add(d as u64)) {
                Ok(count) if count == (d - k) * (d - k) => {}
                Ok(count) => {
                    return outcome(
                        "kronecker_projector_rank",
                        started,
                        false,
                        format!("d={d}, k={k}: {count} unit eigenvalues, want {}", (d - k) * (d - k)),
                    )
                }
                Err(e) => {
                    return outcome("kronecker_projector_rank", started, false, e.to_string())
                }
            }
        }
    }
    outcome(
        "kronecker_projector_rank",
        started,
        true,
        "all d <= 8, 0 <= k <= d match (d-k)^2".into(),
    )
}

/// Analytic gradients match central finite differences (step 1e-5) within
/// 1e-4 relative error on every trainable parameter block, over 20 random
/// model configurations.
pub fn check_gradient_exactness(seed: u64) -> CheckOutcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for trial in 0..20u64 {
        let mut rng = stream_rng(seed.wrapping_add(trial), Stream::Oracle { trial: 60 + trial });
        let d = [4, 6, 8][rng.random_range(0..3)];
        let experts = rng.random_range(1..=3);
        let shape = ModelShape {
            d,
            r: rng.random_range(1..=2),
            experts,
            top_k: rng.random_range(1..=experts.min(2)),
            classes: rng.random_range(2..=3),
            layers: rng.random_range(1..=3),
            adapted_layers: vec![],
        };
        let layers = shape.layers;
        let mut shape = shape;
        shape.adapted_layers = (0..layers)
            .filter(|_| rng.random_range(0.0..1.0) < 0.7)
            .collect();
        if shape.adapted_layers.is_empty() {
            shape.adapted_layers = vec![0];
        }
        let mut model = MoeLoraModel::init(shape.clone(), &mut rng);
        for &l in shape.adapted_layers.clone().iter() {
            let adapter = model.adapter_mut(l).unwrap();
            for expert in &mut adapter.experts {
                for v in expert.b_factor.iter_mut() {
                    *v = rng.sample::<f64, _>(StandardNormal) * 0.3;
                }
            }
            if trial % 2 == 0 {
                adapter.router.frozen = true;
            }
        }
        let x = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let label = rng.random_range(0..shape.classes);
        worst = worst.max(max_fd_deviation(&mut model, &x, label));
        configs += 1;
    }
    outcome(
        "gradient_exactness",
        started,
        worst <= 1e-4,
        format!("max relative FD deviation {worst:.3e} over {configs} configurations (tolerance 1e-4)"),
    )
}

/// Largest relative deviation between analytic and finite-difference
/// gradients over all trainable parameter blocks.
fn max_fd_deviation(model: &mut MoeLoraModel, x: &DVector<f64>, label: usize) -> f64 {
    let step = 1e-5;
    let (logits, mut trace) = model.forward(x);
    let grads = model.backward(&mut trace, &cross_entropy_grad(&logits, label));
    let shape = model.shape().clone();
    let mut worst: f64 = 0.0;

    let fd_matrix = |model: &mut MoeLoraModel,
                         get: &dyn Fn(&MoeLoraModel) -> DMatrix<f64>,
                         set: &dyn Fn(&mut MoeLoraModel, DMatrix<f64>)|
     -> DMatrix<f64> {
        let orig = get(model);
        let mut fd = DMatrix::zeros(orig.nrows(), orig.ncols());
        for i in 0..orig.nrows() {
            for j in 0..orig.ncols() {
                let mut plus = orig.clone();
                plus[(i, j)] += step;
                set(model, plus);
                let lp = cross_entropy(&model.forward(x).0, label);
                let mut minus = orig.clone();
                minus[(i, j)] -= step;
                set(model, minus);
                let lm = cross_entropy(&model.forward(x).0, label);
                fd[(i, j)] = (lp - lm) / (2.0 * step);
            }
        }
        set(model, orig);
        fd
    };

    for (pos, &l) in shape.adapted_layers.iter().enumerate() {
        for e in 0..shape.experts {
            let analytic_a = grads.layers[pos][e]
                .as_ref()
                .map(|g| g.grad_a.clone())
                .unwrap_or_else(|| DMatrix::zeros(shape.r, shape.d));
            let fd_a = fd_matrix(
                model,
                &|m| m.adapter(l).unwrap().experts[e].a_factor.clone(),
                &move |m, v| m.adapter_mut(l).unwrap().experts[e].a_factor = v,
            );
            worst = worst.max((&analytic_a - &fd_a).norm() / fd_a.norm().max(1e-10));

            let analytic_b = grads.layers[pos][e]
                .as_ref()
                .map(|g| g.grad_b.clone())
                .unwrap_or_else(|| DMatrix::zeros(shape.d, shape.r));
            let fd_b = fd_matrix(
                model,
                &|m| m.adapter(l).unwrap().experts[e].b_factor.clone(),
                &move |m, v| m.adapter_mut(l).unwrap().experts[e].b_factor = v,
            );
            worst = worst.max((&analytic_b - &fd_b).norm() / fd_b.norm().max(1e-10));
        }
        if !model.adapter(l).unwrap().router.frozen {
            let analytic_r = grads.router[pos].clone().expect("unfrozen router grad");
            let fd_r = fd_matrix(
                model,
                &|m| m.adapter(l).unwrap().router.weight.clone(),
                &move |m, v| m.adapter_mut(l).unwrap().router.weight = v,
            );
            worst = worst.max((&analytic_r - &fd_r).norm() / fd_r.norm().max(1e-10));
        }
    }
    worst
}

/// Run every check at its documented size.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        check_fedavg_orthogonality(seed),
        check_residual_order(seed),
        check_entanglement_bound(seed),
        check_pefosu_oracle_equivalence(seed),
        check_waterfill(seed),
        check_conic_conflict(seed),
        check_kron_rank(seed),
        check_gradient_exactness(seed),
    ]
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}

pub fn write_csv(path: &Path, outcomes: &[CheckOutcome]) -> Result<()> {
    let rows: Vec<Vec<String>> = outcomes
        .iter()
        .map(|o| {
            vec![
                o.name.clone(),
                if o.passed { "pass" } else { "fail" }.to_string(),
                o.detail.replace(',', ";"),
                format!("{:.3}", o.seconds),
            ]
        })
        .collect();
    write_rows_csv(path, "check,status,detail,seconds", &rows)
}
