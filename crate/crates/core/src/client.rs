//! Client-side local training: mini-batch SGD with warmup-annealed bilateral
//! projection of every active expert's factor gradients, routing-weighted
//! covariance accumulation, and end-of-task factorization into the uploaded
//! low-rank factors.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;

use crate::error::{CoreError, Result};
use crate::model::{cross_entropy_grad, BatchTrace, ExpertGrad, MoeLoraModel};
use crate::scheduler::warmup_alpha;
use crate::server::BasisBank;
use crate::subspace::{self, CovarianceFactor};
use crate::tasks::SampleBatch;

/// Which per-sample weight each covariance column carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceRecipe {
    /// sqrt(pi_e * s_e) h: the routing-weighted gradient covariance.
    RoutingWeighted,
    /// sqrt(s_e) h: routing weight dropped, sensitivity kept.
    SensitivityOnly,
    /// h: plain activation covariance (both weights dropped).
    ActivationOnly,
    /// No accumulation at all (unprotected training).
    Skip,
}

/// Which sides of the factor pair the projector touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMode {
    /// Project gradA on the right and gradB on the left.
    Bilateral,
    /// Project gradA only; gradB passes through (the one-sided ablation).
    AOnly,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub model: MoeLoraModel,
    /// Accumulated covariance columns per adapted-layer position per expert.
    accumulators: Vec<Vec<Vec<DVector<f64>>>>,
    /// Batch steps taken within the current task; drives the warmup weight.
    pub step: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub recipe: CovarianceRecipe,
    pub projection: ProjectionMode,
    rng: ChaCha12Rng,
}

impl ClientState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: MoeLoraModel,
        learning_rate: f64,
        batch_size: usize,
        warmup_steps: usize,
        recipe: CovarianceRecipe,
        projection: ProjectionMode,
        rng: ChaCha12Rng,
    ) -> Self {
        let n_adapted = model.adapted_positions().len();
        let n_experts = model.shape().experts;
        Self {
            model,
            accumulators: vec![vec![Vec::new(); n_experts]; n_adapted],
            step: 0,
            learning_rate,
            batch_size,
            warmup_steps,
            recipe,
            projection,
            rng,
        }
    }

    /// Replace the model replica with the broadcast global parameters.
    /// Accumulators and the step counter survive across rounds of a task.
    pub fn sync_model(&mut self, global: &MoeLoraModel) {
        self.model = global.clone();
    }

    /// Part of receiving the basis broadcast: project every A factor's rows
    /// off the protected subspace. The task-start redraw leaves A with
    /// components inside span(U); without this step those components couple
    /// protected input directions into the new task's B updates and the
    /// update B A h is no longer zero on protected activations. With it,
    /// both factors live entirely in the complement, matching the 2r(d - k)
    /// feasible-direction count. A no-op while the bank is empty.
    pub fn align_adapters(&mut self, bank: &BasisBank) {
        let positions = self.model.adapted_positions().to_vec();
        for (pos, &layer) in positions.iter().enumerate() {
            for e in 0..self.model.shape().experts {
                let basis = &bank.basis_for(pos, e).basis;
                if basis.is_empty() {
                    continue;
                }
                let adapter = self.model.adapter_mut(layer).expect("adapted layer");
                let a = &adapter.experts[e].a_factor;
                let coeffs = a * basis.matrix();
                adapter.experts[e].a_factor = a - coeffs * basis.matrix().transpose();
            }
        }
    }

    /// One local epoch: shuffled mini-batches, projected factor updates with
    /// `alpha = min(step / s_0, 1)`, router SGD while unfrozen, and
    /// covariance accumulation for every active expert.
    pub fn local_train_epoch(&mut self, data: &SampleBatch, bank: &BasisBank) -> Result<()> {
        if data.is_empty() {
            return Err(CoreError::contract("client has no data to train on"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);

        let shape = self.model.shape().clone();
        let positions = self.model.adapted_positions().to_vec();

        for batch_idx in order.chunks(self.batch_size) {
            let alpha = warmup_alpha(self.step, self.warmup_steps);
            let inv = 1.0 / batch_idx.len() as f64;

            let mut grad_sum: Vec<Vec<Option<ExpertGrad>>> =
                vec![vec![None; shape.experts]; positions.len()];
            let mut router_sum: Vec<Option<DMatrix<f64>>> = vec![None; positions.len()];
            let mut trace_batch = BatchTrace::default();

            for &i in batch_idx {
                let (logits, mut trace) = self.model.forward(&data.inputs[i]);
                let loss_grad = cross_entropy_grad(&logits, data.labels[i]);
                let grads = self.model.backward(&mut trace, &loss_grad);
                for (pos, layer) in grads.layers.into_iter().enumerate() {
                    for (e, grad) in layer.into_iter().enumerate() {
                        if let Some(g) = grad {
                            match &mut grad_sum[pos][e] {
                                Some(acc) => {
                                    acc.grad_a += &g.grad_a;
                                    acc.grad_b += &g.grad_b;
                                }
                                slot => *slot = Some(g),
                            }
                        }
                    }
                }
                for (pos, rg) in grads.router.into_iter().enumerate() {
                    if let Some(g) = rg {
                        match &mut router_sum[pos] {
                            Some(acc) => *acc += &g,
                            slot => *slot = Some(g),
                        }
                    }
                }
                trace_batch.samples.push(trace);
            }

            self.accumulate_covariance(&trace_batch);

            for (pos, &layer) in positions.iter().enumerate() {
                for e in 0..shape.experts {
                    if let Some(g) = &grad_sum[pos][e] {
                        let mean_a = &g.grad_a * inv;
                        let mean_b = &g.grad_b * inv;
                        let basis = &bank.basis_for(pos, e).basis;
                        let (step_a, step_b) = match self.projection {
                            ProjectionMode::Bilateral => {
                                subspace::bilateral_project(basis, &mean_a, &mean_b, alpha)?
                            }
                            ProjectionMode::AOnly => {
                                let (a_out, _) =
                                    subspace::bilateral_project(basis, &mean_a, &mean_b, alpha)?;
                                (a_out, mean_b)
                            }
                        };
                        let adapter = self.model.adapter_mut(layer).expect("adapted layer");
                        adapter.experts[e].a_factor -= step_a * self.learning_rate;
                        adapter.experts[e].b_factor -= step_b * self.learning_rate;
                    }
                }
                if let Some(rg) = &router_sum[pos] {
                    let adapter = self.model.adapter_mut(layer).expect("adapted layer");
                    if !adapter.router.frozen {
                        adapter.router.weight -= rg * (inv * self.learning_rate);
                    }
                }
            }
            self.step += 1;
        }
        Ok(())
    }

    /// Append one weighted column per (active expert, sample) to the running
    /// accumulators: `sqrt(pi_e(x_i) * s_{i,e}) h_i` under the full recipe.
    /// Inactive experts receive nothing; exactly-zero weights are skipped
    /// since a zero column does not change the accumulated covariance.
    pub fn accumulate_covariance(&mut self, trace: &BatchTrace) {
        if self.recipe == CovarianceRecipe::Skip {
            return;
        }
        let positions = self.model.adapted_positions();
        for sample in &trace.samples {
            for layer_trace in &sample.adapted {
                let pos = positions
                    .iter()
                    .position(|&l| l == layer_trace.layer)
                    .expect("trace layer is adapted");
                for &(e, s) in &layer_trace.sensitivities {
                    let weight = match self.recipe {
                        CovarianceRecipe::RoutingWeighted => layer_trace.routing[e] * s,
                        CovarianceRecipe::SensitivityOnly => s,
                        CovarianceRecipe::ActivationOnly => 1.0,
                        CovarianceRecipe::Skip => unreachable!(),
                    };
                    if weight > 0.0 {
                        self.accumulators[pos][e].push(&layer_trace.input * weight.sqrt());
                    }
                }
            }
        }
    }

    /// End-of-task factorization: thin SVD of each accumulated column stack,
    /// `L = U_k Sigma_k` zero-padded to the per-layer budget so `L L^T` is
    /// the best rank-k approximation of the accumulated covariance. Uploads
    /// are exactly d x k_l reals; an expert that never activated uploads an
    /// empty factor. Accumulators are cleared afterwards.
    pub fn factorize_covariance(&mut self, k_per_layer: &[usize]) -> Result<Vec<Vec<CovarianceFactor>>> {
        let positions = self.model.adapted_positions().len();
        if k_per_layer.len() != positions {
            return Err(CoreError::contract(format!(
                "budget has {} entries for {} adapted layers",
                k_per_layer.len(),
                positions
            )));
        }
        let d = self.model.shape().d;
        let mut out = Vec::with_capacity(positions);
        for (pos, k_l) in k_per_layer.iter().enumerate() {
            let mut per_expert = Vec::with_capacity(self.accumulators[pos].len());
            for columns in &mut self.accumulators[pos] {
                if columns.is_empty() {
                    per_expert.push(CovarianceFactor::empty(d));
                    continue;
                }
                let mut stack = DMatrix::<f64>::zeros(d, columns.len());
                for (j, c) in columns.iter().enumerate() {
                    stack.set_column(j, c);
                }
                columns.clear();

                let svd = stack.svd(true, false);
                let u = svd.u.expect("svd with u");
                let sigma = svd.singular_values;
                let sigma_max = sigma.iter().cloned().fold(0.0_f64, f64::max);
                let mut factor = DMatrix::<f64>::zeros(d, *k_l);
                for j in 0..(*k_l).min(sigma.len()) {
                    if sigma_max > 0.0 && sigma[j] > 1e-12 * sigma_max {
                        let mut col = u.column(j) * sigma[j];
                        // Deterministic sign: largest-magnitude entry positive.
                        let lead = (0..d)
                            .max_by(|&a, &b| col[a].abs().partial_cmp(&col[b].abs()).unwrap())
                            .unwrap();
                        if col[lead] < 0.0 {
                            col = -col;
                        }
                        factor.set_column(j, &col);
                    }
                }
                per_expert.push(CovarianceFactor::new(factor)?);
            }
            out.push(per_expert);
        }
        Ok(out)
    }

    /// Total routing mass accumulated per (layer position, expert); zero for
    /// an expert that was never routed to.
    pub fn accumulated_columns(&self, pos: usize, expert: usize) -> usize {
        self.accumulators[pos][expert].len()
    }
}
