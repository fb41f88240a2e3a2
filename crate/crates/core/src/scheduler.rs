//! Interference landscape measurement, water-filling budget allocation, and
//! the warmup coefficient.
//!
//! The per-layer conflict score gamma_l is the rectified cross-task gradient
//! cosine `mean over task pairs of max(0, -cos)`, measured on briefly trained
//! fresh models. The per-layer protection budget follows the closed form
//! `k_l = k_bar * gamma_l^2 / ||gamma||^2` of the water-filling problem
//! `maximize sum_l gamma_l sqrt(k_l)` over the budget simplex, integerized by
//! largest remainder.

use std::io::Write as IoWrite;
use std::path::Path;

use nalgebra::DVector;

use crate::client::{ClientState, CovarianceRecipe, ProjectionMode};
use crate::error::{CoreError, Result};
use crate::model::{cross_entropy_grad, MoeLoraModel};
use crate::rng::{stream_rng, Stream};
use crate::server::BasisBank;
use crate::tasks::SampleBatch;

#[derive(Debug, Clone)]
pub struct InterferenceLandscape {
    /// Per adapted layer, nonnegative conflict score in [0, 1].
    pub gamma: Vec<f64>,
    /// Degenerate pairs (zero mean gradient) that contributed 0.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct BudgetAllocation {
    /// Per adapted layer protection rank, each at most d - 1.
    pub k_l: Vec<usize>,
    pub k_bar: usize,
    /// Set when every gamma was zero and the split fell back to uniform.
    pub uniform_fallback: bool,
}

/// Warmup coefficient `alpha(s) = min(s / s_0, 1)`; `s_0 = 0` means full
/// projection from the first step.
pub fn warmup_alpha(step: usize, s_0: usize) -> f64 {
    if s_0 == 0 {
        1.0
    } else {
        (step as f64 / s_0 as f64).min(1.0)
    }
}

/// Rectified conflict mean over unordered pairs: `mean max(0, -cos(g_i, g_j))`.
/// Pairs with a zero vector contribute 0; the caller collects a warning.
pub fn rectified_conflict_mean(grads: &[DVector<f64>]) -> (f64, usize) {
    let n = grads.len();
    let mut total = 0.0;
    let mut pairs = 0usize;
    let mut degenerate = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            pairs += 1;
            let ni = grads[i].norm();
            let nj = grads[j].norm();
            if ni == 0.0 || nj == 0.0 {
                degenerate += 1;
                continue;
            }
            let cos = grads[i].dot(&grads[j]) / (ni * nj);
            total += (-cos).max(0.0);
        }
    }
    if pairs == 0 {
        (0.0, degenerate)
    } else {
        (total / pairs as f64, degenerate)
    }
}

/// Measure the per-layer interference landscape: train one fresh
/// unprotected model for one epoch on the pooled data of every task
/// (interleaved), then take every task's mean per-layer factor gradient at
/// the shared end state; gamma_l is the rectified cross-task cosine mean at
/// layer l. Near the pooled compromise point the per-task mean gradients
/// roughly cancel, so genuinely opposed tasks show up as negative cosines;
/// gradients taken at different parameter points would not be comparable.
pub fn measure_gamma(
    model: &MoeLoraModel,
    task_batches: &[SampleBatch],
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<InterferenceLandscape> {
    if task_batches.len() < 2 {
        return Err(CoreError::contract(
            "interference measurement needs at least two task batches",
        ));
    }
    let shape = model.shape().clone();
    let n_layers = shape.adapted_layers.len();
    let empty_bank = BasisBank::per_expert(shape.d, n_layers, shape.experts);

    let pooled = SampleBatch {
        inputs: task_batches
            .iter()
            .flat_map(|b| b.inputs.iter().cloned())
            .collect(),
        labels: task_batches
            .iter()
            .flat_map(|b| b.labels.iter().copied())
            .collect(),
    };
    let mut state = ClientState::new(
        model.clone(),
        learning_rate,
        batch_size,
        0,
        CovarianceRecipe::Skip,
        ProjectionMode::Bilateral,
        stream_rng(seed, Stream::GammaTrain { task: 0 }),
    );
    state.local_train_epoch(&pooled, &empty_bank)?;

    // Per task, per adapted layer: mean flattened factor gradient at the
    // shared diagnostic parameters.
    let per_task: Vec<Vec<DVector<f64>>> = task_batches
        .iter()
        .map(|batch| mean_layer_gradients(&state.model, batch))
        .collect();

    let mut gamma = Vec::with_capacity(n_layers);
    let mut warnings = Vec::new();
    for l in 0..n_layers {
        let grads: Vec<DVector<f64>> = per_task.iter().map(|g| g[l].clone()).collect();
        let (value, degenerate) = rectified_conflict_mean(&grads);
        if degenerate > 0 {
            warnings.push(format!(
                "layer position {l}: {degenerate} task pair(s) had a zero mean gradient and contributed 0"
            ));
        }
        gamma.push(value);
    }
    Ok(InterferenceLandscape { gamma, warnings })
}

/// Mean per-layer factor gradient over a batch, flattened across all experts
/// (inactive experts contribute zeros).
fn mean_layer_gradients(model: &MoeLoraModel, batch: &SampleBatch) -> Vec<DVector<f64>> {
    let shape = model.shape();
    let block = shape.r * shape.d;
    let width = shape.experts * 2 * block;
    let mut acc = vec![DVector::<f64>::zeros(width); shape.adapted_layers.len()];
    for (x, &label) in batch.inputs.iter().zip(&batch.labels) {
        let (logits, mut trace) = model.forward(x);
        let grads = model.backward(&mut trace, &cross_entropy_grad(&logits, label));
        for (pos, layer) in grads.layers.iter().enumerate() {
            for (e, grad) in layer.iter().enumerate() {
                if let Some(g) = grad {
                    let base = e * 2 * block;
                    for (i, v) in g.grad_a.iter().enumerate() {
                        acc[pos][base + i] += v;
                    }
                    for (i, v) in g.grad_b.iter().enumerate() {
                        acc[pos][base + block + i] += v;
                    }
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    acc.into_iter().map(|g| g * inv).collect()
}

/// Water-filling per-layer budget: continuous solution
/// `k_bar * gamma_l^2 / ||gamma||^2`, floored, with the remainder distributed
/// one unit at a time by descending fractional part (ties to the lower
/// index). Layers with positive gamma receive at least 1; every k_l is
/// capped at d - 1 with overflow redistributed by the same rule. All-zero
/// gamma falls back to a uniform split with a flag.
pub fn waterfill_budget(
    landscape: &InterferenceLandscape,
    k_bar: usize,
    d: usize,
) -> Result<BudgetAllocation> {
    let gamma = &landscape.gamma;
    let n = gamma.len();
    if n == 0 {
        return Err(CoreError::contract("no layers to allocate over"));
    }
    if gamma.iter().any(|g| *g < 0.0 || !g.is_finite()) {
        return Err(CoreError::contract("gamma must be finite and nonnegative"));
    }
    let cap = d.saturating_sub(1);
    let positive: Vec<usize> = (0..n).filter(|&l| gamma[l] > 0.0).collect();

    if positive.is_empty() {
        let mut k_l = vec![k_bar / n; n];
        for slot in k_l.iter_mut().take(k_bar % n) {
            *slot += 1;
        }
        for slot in k_l.iter_mut() {
            *slot = (*slot).min(cap);
        }
        return Ok(BudgetAllocation {
            k_l,
            k_bar,
            uniform_fallback: true,
        });
    }

    if k_bar < positive.len() {
        return Err(CoreError::contract(format!(
            "budget {k_bar} cannot give every conflicted layer ({}) at least one rank",
            positive.len()
        )));
    }

    let norm_sq: f64 = gamma.iter().map(|g| g * g).sum();
    let continuous: Vec<f64> = gamma
        .iter()
        .map(|g| k_bar as f64 * g * g / norm_sq)
        .collect();
    let mut k_l: Vec<usize> = continuous.iter().map(|c| c.floor() as usize).collect();
    let mut rem = k_bar - k_l.iter().sum::<usize>();

    // Remainder by descending fractional part among conflicted layers.
    let mut frac_order: Vec<usize> = positive.clone();
    frac_order.sort_by(|&i, &j| {
        let fi = continuous[i] - continuous[i].floor();
        let fj = continuous[j] - continuous[j].floor();
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    for &l in frac_order.iter().cycle().take(rem.min(n * (cap + 1))) {
        if rem == 0 {
            break;
        }
        if k_l[l] < cap {
            k_l[l] += 1;
            rem -= 1;
        }
    }

    // Minimum 1 for conflicted layers, taking from the largest allocation.
    for &l in &positive {
        while k_l[l] == 0 {
            let donor = (0..n)
                .filter(|&i| k_l[i] > 1)
                .max_by(|&i, &j| k_l[i].cmp(&k_l[j]).then(j.cmp(&i)))
                .ok_or_else(|| CoreError::contract("cannot satisfy minimum-1 allocation"))?;
            k_l[donor] -= 1;
            k_l[l] += 1;
        }
    }

    // Cap at d - 1, redistributing overflow by the same remainder rule.
    let mut overflow = 0usize;
    for slot in k_l.iter_mut() {
        if *slot > cap {
            overflow += *slot - cap;
            *slot = cap;
        }
    }
    while overflow > 0 {
        let recipient = frac_order.iter().copied().find(|&l| k_l[l] < cap);
        match recipient {
            Some(l) => {
                k_l[l] += 1;
                overflow -= 1;
            }
            None => break, // every conflicted layer saturated; under-allocate
        }
    }

    Ok(BudgetAllocation {
        k_l,
        k_bar,
        uniform_fallback: false,
    })
}

/// Export the landscape and allocation as `layer,gamma,k_l` rows.
pub fn write_gamma_csv(
    path: &Path,
    adapted_layers: &[usize],
    landscape: &InterferenceLandscape,
    allocation: &BudgetAllocation,
) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "layer,gamma,k_l")?;
    for (pos, &layer) in adapted_layers.iter().enumerate() {
        writeln!(
            file,
            "{layer},{},{}",
            landscape.gamma[pos], allocation.k_l[pos]
        )?;
    }
    Ok(())
}
