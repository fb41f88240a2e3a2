//! Experiment orchestration: the federated continual-learning lifecycle
//! (diagnostic pass, per-task rounds of client training and FedAvg, the
//! end-of-task subspace union, task-start resets and the router freeze),
//! baselines and ablations, result emission, and parameter sweeps.

use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{ClientState, CovarianceRecipe, ProjectionMode};
use crate::config::{ExperimentConfig, Method};
use crate::error::{CoreError, Result};
use crate::metrics::{
    self, AccuracyMatrix, ClMetrics, PairOverlap, RoutingStats, RoutingTraces,
};
use crate::model::MoeLoraModel;
use crate::rng::{stream_rng, Stream};
use crate::scheduler::{self, BudgetAllocation, InterferenceLandscape};
use crate::server::{self, BasisBank};
use crate::subspace::{self, CovarianceFactor};
use crate::tasks::{self, ClientPartition, SampleBatch, TaskSpec};

/// Null-space consumption level treated as saturation.
pub const SATURATION_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsumptionRecord {
    pub task: usize,
    pub layer: usize,
    pub slot: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaRecord {
    pub task: usize,
    pub layer: usize,
    pub slot: usize,
    pub radians: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub task: usize,
    pub round: usize,
    pub value: f64,
}

/// Everything a run produces. Serializes losslessly; the wall clock is the
/// only field excluded from the reproducibility contract (it never reaches
/// the CSV outputs).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub accuracy: AccuracyMatrix,
    pub metrics: ClMetrics,
    pub gamma: Vec<f64>,
    pub gamma_warnings: Vec<String>,
    pub budget_k: Vec<usize>,
    pub uniform_budget: bool,
    pub routing: RoutingStats,
    pub consumption: Vec<ConsumptionRecord>,
    pub theta_min: Vec<ThetaRecord>,
    pub overlaps: Vec<PairOverlap>,
    pub overlap_rank: Option<usize>,
    pub activation_effective_rank: Option<usize>,
    pub bilateral_residuals: Vec<ResidualRecord>,
    pub max_bilateral_residual: f64,
    pub first_saturation_task: Option<usize>,
    pub wall_clock_seconds: f64,
}

/// Who owns the protection bases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BasisOwnership {
    Server,
    PerClient,
}

struct ProtectionPlan {
    recipe: CovarianceRecipe,
    projection: ProjectionMode,
    ownership: BasisOwnership,
    shared_per_layer: bool,
    active: bool,
}

impl ProtectionPlan {
    fn from_config(config: &ExperimentConfig) -> Self {
        let active = config.method.protected();
        let recipe = match config.method {
            Method::NoProtection => CovarianceRecipe::Skip,
            Method::Activation => CovarianceRecipe::ActivationOnly,
            Method::Prism | Method::Monolithic => {
                if config.ablation.no_routing_weight {
                    CovarianceRecipe::SensitivityOnly
                } else {
                    CovarianceRecipe::RoutingWeighted
                }
            }
        };
        let projection = if config.ablation.a_only_projection {
            ProjectionMode::AOnly
        } else {
            ProjectionMode::Bilateral
        };
        let ownership = if config.ablation.no_pefosu {
            BasisOwnership::PerClient
        } else {
            BasisOwnership::Server
        };
        let shared_per_layer =
            config.method == Method::Monolithic || config.ablation.no_per_expert;
        Self {
            recipe,
            projection,
            ownership,
            shared_per_layer,
            active,
        }
    }

    fn new_bank(&self, d: usize, n_layers: usize, n_experts: usize) -> BasisBank {
        if self.shared_per_layer {
            BasisBank::shared(d, n_layers)
        } else {
            BasisBank::per_expert(d, n_layers, n_experts)
        }
    }
}

fn partition_seed(seed: u64, task: usize) -> u64 {
    seed ^ ((task as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Activation/gradient overlap contrast measured on the diagnostic state: a
/// fresh model trained for `epochs` epochs on the pooled union of all tasks,
/// so that each task's remaining misfit is class-coherent and the
/// sensitivity weights carry task-specific structure. Returns the per-pair
/// overlaps at rank k = classes, together with the rank used and the
/// effective rank of the pooled activations.
pub fn overlap_probe(
    config: &ExperimentConfig,
    epochs: usize,
) -> Result<(Vec<PairOverlap>, usize, usize)> {
    config.validate()?;
    if config.n_tasks < 2 {
        return Err(CoreError::config("overlap probe needs at least two tasks"));
    }
    let sequence = tasks::generate_sequence(
        config.n_tasks,
        config.d,
        config.classes,
        config.samples_per_task,
        config.opposition,
        config.seed,
    )?;
    let mut init_rng = stream_rng(config.seed, Stream::ModelInit);
    let model = MoeLoraModel::init(config.model_shape(), &mut init_rng);

    let pooled = SampleBatch {
        inputs: sequence
            .iter()
            .flat_map(|(_, b)| b.inputs.iter().cloned())
            .collect(),
        labels: sequence
            .iter()
            .flat_map(|(_, b)| b.labels.iter().copied())
            .collect(),
    };
    let bank = BasisBank::per_expert(config.d, config.adapted_layers.len(), config.experts);
    let mut state = ClientState::new(
        model,
        config.learning_rate,
        config.batch_size,
        0,
        CovarianceRecipe::Skip,
        ProjectionMode::Bilateral,
        stream_rng(config.seed, Stream::GammaTrain { task: 0 }),
    );
    for _ in 0..epochs {
        state.local_train_epoch(&pooled, &bank)?;
    }

    let task_traces: Vec<Vec<(DVector<f64>, f64)>> = sequence
        .iter()
        .map(|(_, pool)| omega_trace(&state.model, pool))
        .collect();
    let all_columns: Vec<&DVector<f64>> = task_traces
        .iter()
        .flat_map(|t| t.iter().map(|(h, _)| h))
        .collect();
    let mut stacked = nalgebra::DMatrix::<f64>::zeros(config.d, all_columns.len());
    for (j, h) in all_columns.iter().enumerate() {
        stacked.set_column(j, h);
    }
    let r_o = subspace::effective_rank(&stacked, 1e-3)?;
    let k = config.classes.min(r_o.max(1));
    let overlaps = metrics::overlap_contrast(&task_traces, k)?;
    Ok((overlaps, k, r_o))
}

/// The diagnostic pass alone: measure the interference landscape and the
/// per-layer budget without running the federated lifecycle.
pub fn diagnose(config: &ExperimentConfig) -> Result<(InterferenceLandscape, BudgetAllocation)> {
    config.validate()?;
    let plan = ProtectionPlan::from_config(config);
    let sequence = tasks::generate_sequence(
        config.n_tasks,
        config.d,
        config.classes,
        config.samples_per_task,
        config.opposition,
        config.seed,
    )?;
    let mut init_rng = stream_rng(config.seed, Stream::ModelInit);
    let mut model = MoeLoraModel::init(config.model_shape(), &mut init_rng);
    if config.dense_router_warmup {
        model.dense_routing = true;
    }
    plan_budget(config, &plan, &model, &sequence)
}

/// Validate that the method is one of the reference baselines, then run it
/// through the shared lifecycle.
pub fn run_baseline(config: &ExperimentConfig) -> Result<RunReport> {
    if !matches!(config.method, Method::Monolithic | Method::Activation) {
        return Err(CoreError::config(format!(
            "run_baseline expects method monolithic or activation, got {}",
            config.method.as_str()
        )));
    }
    run_experiment(config)
}

/// Execute the full lifecycle for any method and return the report.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    run_experiment_with_model(config).map(|(report, _)| report)
}

/// As `run_experiment`, additionally returning the final global model (for
/// parameter-level equivalence checks).
pub fn run_experiment_with_model(
    config: &ExperimentConfig,
) -> Result<(RunReport, MoeLoraModel)> {
    config.validate()?;
    let start = Instant::now();
    let plan = ProtectionPlan::from_config(config);
    let shape = config.model_shape();
    let d = config.d;
    let n_tasks = config.n_tasks;
    let n_clients = config.n_clients;
    let n_adapted = config.adapted_layers.len();

    let sequence = tasks::generate_sequence(
        n_tasks,
        d,
        config.classes,
        config.samples_per_task,
        config.opposition,
        config.seed,
    )?;
    let partitions: Vec<ClientPartition> = (0..n_tasks)
        .map(|t| {
            tasks::dirichlet_partition(
                sequence[t].1.len(),
                &sequence[t].1.labels,
                n_clients,
                config.beta,
                partition_seed(config.seed, t),
            )
            .map_err(|e| e.at(format!("task {t} partition")))
        })
        .collect::<Result<_>>()?;

    let mut init_rng = stream_rng(config.seed, Stream::ModelInit);
    let mut global_model = MoeLoraModel::init(shape.clone(), &mut init_rng);
    if config.dense_router_warmup {
        global_model.dense_routing = true;
    }

    // Interference landscape and per-layer budgets.
    let (landscape, budget) = plan_budget(config, &plan, &global_model, &sequence)?;

    let mut server_bank = plan.new_bank(d, n_adapted, config.experts);
    let mut client_banks: Vec<BasisBank> = (0..n_clients)
        .map(|_| plan.new_bank(d, n_adapted, config.experts))
        .collect();

    let probe_inputs: Vec<&DVector<f64>> = sequence
        .iter()
        .flat_map(|(_, batch)| batch.inputs.iter())
        .collect();

    let mut accuracy = vec![vec![0.0; n_tasks]; n_tasks];
    let mut consumption = Vec::new();
    let mut theta_records = Vec::new();
    let mut residual_records = Vec::new();
    let mut routing_traces = RoutingTraces::default();
    let mut omega_samples: Vec<Vec<(DVector<f64>, f64)>> = Vec::new();
    let mut first_saturation_task = None;

    for t in 0..n_tasks {
        if t > 0 {
            let mut reset_rng = stream_rng(config.seed, Stream::TaskReset { task: t });
            global_model.reset_for_task(&mut reset_rng);
            if global_model.dense_routing {
                global_model.dense_routing = false;
            }
        }
        let pool = &sequence[t].1;
        let partition = &partitions[t];
        let weights = partition.weights();
        let client_data: Vec<SampleBatch> = (0..n_clients)
            .map(|c| partition.subset(c, pool))
            .collect();

        let mut client_states: Vec<ClientState> = (0..n_clients)
            .map(|c| {
                ClientState::new(
                    global_model.clone(),
                    config.learning_rate,
                    config.batch_size,
                    config.effective_warmup(),
                    plan.recipe,
                    plan.projection,
                    stream_rng(config.seed, Stream::ClientTrain { task: t, client: c }),
                )
            })
            .collect();

        for round in 0..config.rounds_per_task {
            let server_bank_ref = &server_bank;
            let client_banks_ref = &client_banks;
            let global_ref = &global_model;
            let data_ref = &client_data;
            let epochs = config.local_epochs;
            let ownership = plan.ownership;

            let trained: Vec<Result<ClientState>> = client_states
                .into_par_iter()
                .enumerate()
                .map(move |(c, mut state)| {
                    state.sync_model(global_ref);
                    let bank = match ownership {
                        BasisOwnership::Server => server_bank_ref,
                        BasisOwnership::PerClient => &client_banks_ref[c],
                    };
                    state.align_adapters(bank);
                    for _ in 0..epochs {
                        state
                            .local_train_epoch(&data_ref[c], bank)
                            .map_err(|e| e.at(format!("task {t}, round {round}, client {c}")))?;
                    }
                    Ok(state)
                })
                .collect();
            client_states = trained.into_iter().collect::<Result<Vec<_>>>()?;

            // Pre-aggregation residual for client-owned bases.
            let mut round_residual: f64 = 0.0;
            if plan.active && plan.ownership == BasisOwnership::PerClient {
                for (c, state) in client_states.iter().enumerate() {
                    round_residual = round_residual.max(bilateral_residual(
                        &client_banks[c],
                        &state.model,
                        config,
                    ));
                }
            }

            let models: Vec<MoeLoraModel> =
                client_states.iter().map(|s| s.model.clone()).collect();
            global_model = server::fedavg_aggregate(&models, &weights)
                .map_err(|e| e.at(format!("task {t}, round {round} aggregation")))?;

            if plan.active && plan.ownership == BasisOwnership::Server {
                round_residual = bilateral_residual(&server_bank, &global_model, config);
            }
            if plan.active {
                residual_records.push(ResidualRecord {
                    task: t,
                    round,
                    value: round_residual,
                });
            }
        }

        if plan.active {
            let uploads: Vec<Vec<Vec<CovarianceFactor>>> = client_states
                .iter_mut()
                .enumerate()
                .map(|(c, state)| {
                    state
                        .factorize_covariance(&budget.k_l)
                        .map_err(|e| e.at(format!("task {t}, client {c} factorization")))
                })
                .collect::<Result<_>>()?;

            // Communication contract: per expert per layer the upload is
            // exactly d x k_l reals, or empty for a never-routed expert.
            for (c, up) in uploads.iter().enumerate() {
                for (pos, layer) in up.iter().enumerate() {
                    for (e, f) in layer.iter().enumerate() {
                        if !f.is_empty()
                            && (f.dim() != d || f.rank_cols() != budget.k_l[pos])
                        {
                            return Err(CoreError::contract(format!(
                                "upload payload is {}x{}, expected {d}x{}",
                                f.dim(),
                                f.rank_cols(),
                                budget.k_l[pos]
                            ))
                            .at(format!("task {t}, client {c}, layer {pos}, expert {e}")));
                        }
                    }
                }
            }

            // Smallest principal angle between the basis in force and the
            // incoming task subspace, per slot, before the union absorbs it.
            let reference_bank = match plan.ownership {
                BasisOwnership::Server => &server_bank,
                BasisOwnership::PerClient => &client_banks[0],
            };
            record_theta_min(
                t,
                config,
                reference_bank,
                &uploads,
                &weights,
                &budget,
                &mut theta_records,
            )?;

            match plan.ownership {
                BasisOwnership::Server => {
                    server::pefosu_update(&mut server_bank, &uploads, &weights, &budget.k_l)
                        .map_err(|e| e.at(format!("task {t} subspace union")))?;
                }
                BasisOwnership::PerClient => {
                    for (c, up) in uploads.into_iter().enumerate() {
                        server::pefosu_update(&mut client_banks[c], &[up], &[1.0], &budget.k_l)
                            .map_err(|e| e.at(format!("task {t}, client {c} local union")))?;
                    }
                }
            }

            // Null-space consumption after the union.
            let bank_for_consumption = match plan.ownership {
                BasisOwnership::Server => &server_bank,
                BasisOwnership::PerClient => &client_banks[0],
            };
            let mut task_max = 0.0_f64;
            for pos in 0..n_adapted {
                for slot in 0..bank_for_consumption.slots_per_layer() {
                    let value = bank_for_consumption.entry(pos, slot).rank() as f64 / d as f64;
                    task_max = task_max.max(value);
                    consumption.push(ConsumptionRecord {
                        task: t,
                        layer: config.adapted_layers[pos],
                        slot,
                        value,
                    });
                }
            }
            if first_saturation_task.is_none() && task_max >= SATURATION_LEVEL {
                first_saturation_task = Some(t);
            }
        }

        if t == 0 && !config.ablation.no_router_freeze {
            global_model.freeze_router();
        }
        if t == 0 {
            global_model.dense_routing = false;
        }

        // Full evaluation row: accuracy on every task after training task t.
        for (j, (_, batch)) in sequence.iter().enumerate() {
            accuracy[t][j] = tasks::evaluate_accuracy(&global_model, batch)
                .map_err(|e| e.at(format!("task {t} evaluation of task {j}")))?;
        }

        // Routing diagnostics: per-task heatmap traces and the fixed-probe
        // top-1 snapshot.
        routing_traces
            .per_task
            .push(task_routing_vectors(&global_model, pool));
        routing_traces
            .probe_top1
            .push(probe_top1(&global_model, &probe_inputs));

    }

    // Activation/sensitivity traces for the overlap contrast, collected for
    // every task on the final model so the sensitivity weights carry the
    // end-of-run misfit structure.
    for (_, pool) in &sequence {
        omega_samples.push(omega_trace(&global_model, pool));
    }

    let matrix = AccuracyMatrix { r: accuracy };
    let cl_metrics = metrics::compute_aa_bwt_fwt(&matrix)?;
    let routing = metrics::routing_stats(&routing_traces);

    let (overlaps, overlap_rank, activation_effective_rank) = if n_tasks >= 2 {
        let all_columns: Vec<&DVector<f64>> = omega_samples
            .iter()
            .flat_map(|task| task.iter().map(|(h, _)| h))
            .collect();
        let mut stacked = nalgebra::DMatrix::<f64>::zeros(d, all_columns.len());
        for (j, h) in all_columns.iter().enumerate() {
            stacked.set_column(j, h);
        }
        let r_o = subspace::effective_rank(&stacked, 1e-3)?;
        // The per-task label-relevant structure spans about one direction
        // per class; comparing at that rank keeps the contrast readable
        // when the ambient covariance has a slowly decaying tail.
        let k = config.classes.min(r_o.max(1));
        let overlaps = metrics::overlap_contrast(&omega_samples, k)?;
        (overlaps, Some(k), Some(r_o))
    } else {
        (Vec::new(), None, None)
    };

    let max_bilateral_residual = residual_records
        .iter()
        .map(|r| r.value)
        .fold(0.0_f64, f64::max);

    Ok((RunReport {
        config: config.clone(),
        accuracy: matrix,
        metrics: cl_metrics,
        gamma: landscape.gamma,
        gamma_warnings: landscape.warnings,
        budget_k: budget.k_l,
        uniform_budget: budget.uniform_fallback,
        routing,
        consumption,
        theta_min: theta_records,
        overlaps,
        overlap_rank,
        activation_effective_rank,
        bilateral_residuals: residual_records,
        max_bilateral_residual,
        first_saturation_task,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    }, global_model))
}

/// Diagnostic pass and budget allocation. Unprotected runs skip both;
/// the no-scheduling ablation and single-task runs fall back to a uniform
/// split without measuring gamma.
fn plan_budget(
    config: &ExperimentConfig,
    plan: &ProtectionPlan,
    model: &MoeLoraModel,
    sequence: &[(TaskSpec, SampleBatch)],
) -> Result<(InterferenceLandscape, BudgetAllocation)> {
    let n_adapted = config.adapted_layers.len();
    if !plan.active {
        return Ok((
            InterferenceLandscape {
                gamma: vec![0.0; n_adapted],
                warnings: Vec::new(),
            },
            BudgetAllocation {
                k_l: vec![0; n_adapted],
                k_bar: 0,
                uniform_fallback: false,
            },
        ));
    }
    if config.ablation.no_scheduling || config.n_tasks < 2 {
        let landscape = InterferenceLandscape {
            gamma: vec![0.0; n_adapted],
            warnings: Vec::new(),
        };
        let budget = scheduler::waterfill_budget(&landscape, config.k_bar, config.d)?;
        return Ok((landscape, budget));
    }
    let batches: Vec<SampleBatch> = sequence.iter().map(|(_, b)| b.clone()).collect();
    let landscape = scheduler::measure_gamma(
        model,
        &batches,
        config.learning_rate,
        config.batch_size,
        config.seed,
    )?;
    let budget = scheduler::waterfill_budget(&landscape, config.k_bar, config.d)?;
    Ok((landscape, budget))
}

/// Max over (layer, expert) of ||U^T B||_F against the bank in force.
fn bilateral_residual(bank: &BasisBank, model: &MoeLoraModel, config: &ExperimentConfig) -> f64 {
    let mut max = 0.0_f64;
    for (pos, &layer) in config.adapted_layers.iter().enumerate() {
        let adapter = match model.adapter(layer) {
            Some(a) => a,
            None => continue,
        };
        for (e, expert) in adapter.experts.iter().enumerate() {
            let basis = &bank.basis_for(pos, e).basis;
            if basis.is_empty() {
                continue;
            }
            max = max.max((basis.matrix().transpose() * &expert.b_factor).norm());
        }
    }
    max
}

/// Smallest principal angle between each slot's current basis and the top
/// directions of the incoming task covariance (pooled over clients).
fn record_theta_min(
    task: usize,
    config: &ExperimentConfig,
    bank: &BasisBank,
    uploads: &[Vec<Vec<CovarianceFactor>>],
    weights: &[f64],
    budget: &BudgetAllocation,
    records: &mut Vec<ThetaRecord>,
) -> Result<()> {
    for pos in 0..config.adapted_layers.len() {
        for slot in 0..bank.slots_per_layer() {
            let carry = bank.entry(pos, slot);
            if carry.basis.is_empty() {
                continue;
            }
            // Pool the incoming factors for this slot across clients.
            let factors: Vec<(f64, CovarianceFactor)> = if bank.is_shared() {
                uploads
                    .iter()
                    .enumerate()
                    .flat_map(|(c, up)| {
                        up[pos]
                            .iter()
                            .map(move |f| (weights[c] / up[pos].len() as f64, f.clone()))
                    })
                    .collect()
            } else {
                uploads
                    .iter()
                    .enumerate()
                    .map(|(c, up)| (weights[c], up[pos][slot].clone()))
                    .collect()
            };
            if factors.iter().all(|(_, f)| f.is_empty()) {
                continue;
            }
            let incoming = subspace::thin_svd_union(
                &subspace::OrthonormalBasis::empty(config.d),
                &subspace::Spectrum::empty(),
                &factors,
                budget.k_l[pos].max(1),
            )?;
            if incoming.basis.is_empty() {
                continue;
            }
            let angles = subspace::principal_angles(&carry.basis, &incoming.basis)?;
            records.push(ThetaRecord {
                task,
                layer: config.adapted_layers[pos],
                slot,
                radians: angles[0],
            });
        }
    }
    Ok(())
}

/// Routing vectors over a task's own samples, pooled across adapted layers.
fn task_routing_vectors(model: &MoeLoraModel, pool: &SampleBatch) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(pool.len() * model.adapted_positions().len());
    for x in &pool.inputs {
        let (_, trace) = model.forward(x);
        for layer_trace in &trace.adapted {
            out.push(layer_trace.routing.clone());
        }
    }
    out
}

/// Top-1 expert at the first adapted layer for every probe input.
fn probe_top1(model: &MoeLoraModel, probe: &[&DVector<f64>]) -> Vec<usize> {
    probe
        .iter()
        .map(|x| {
            let (_, trace) = model.forward(x);
            let pi = &trace.adapted[0].routing;
            let mut best = 0;
            for i in 1..pi.len() {
                if pi[i] > pi[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// (activation, sensitivity of the dominant active expert) at the first
/// adapted layer for every sample of a task pool.
fn omega_trace(model: &MoeLoraModel, pool: &SampleBatch) -> Vec<(DVector<f64>, f64)> {
    let mut out = Vec::with_capacity(pool.len());
    for (x, &label) in pool.inputs.iter().zip(&pool.labels) {
        let (logits, mut trace) = model.forward(x);
        let loss_grad = crate::model::cross_entropy_grad(&logits, label);
        let _ = model.backward(&mut trace, &loss_grad);
        let layer_trace = &trace.adapted[0];
        let (_, s) = layer_trace
            .sensitivities
            .iter()
            .max_by(|(a, _), (b, _)| {
                layer_trace.routing[*a]
                    .partial_cmp(&layer_trace.routing[*b])
                    .unwrap()
            })
            .copied()
            .unwrap_or((0, 0.0));
        out.push((layer_trace.input.clone(), s));
    }
    out
}

/// Write the run artifacts into a directory: `accuracy_matrix.csv`,
/// `metrics.csv`, `heatmap.csv`, `diagnostics.csv`, `gamma.csv`, and
/// `report.json`.
pub fn write_outputs(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    metrics::write_accuracy_matrix_csv(&dir.join("accuracy_matrix.csv"), &report.accuracy)?;
    metrics::write_heatmap_csv(&dir.join("heatmap.csv"), &report.routing.heatmap)?;

    let mut rows: Vec<Vec<String>> = Vec::new();
    let n = report.accuracy.n_tasks();
    rows.push(vec!["aa".into(), String::new(), report.metrics.aa.to_string()]);
    rows.push(vec![
        "bwt".into(),
        String::new(),
        report
            .metrics
            .bwt
            .map_or_else(|| "undefined".into(), |v| v.to_string()),
    ]);
    rows.push(vec![
        "fwt".into(),
        String::new(),
        report
            .metrics
            .fwt
            .map_or_else(|| "undefined".into(), |v| v.to_string()),
    ]);
    for j in 0..n {
        rows.push(vec![
            "final_accuracy".into(),
            j.to_string(),
            report.accuracy.r[n - 1][j].to_string(),
        ]);
    }
    for j in 0..n {
        rows.push(vec![
            "diagonal_accuracy".into(),
            j.to_string(),
            report.accuracy.r[j][j].to_string(),
        ]);
    }
    rows.push(vec![
        "flip_rate".into(),
        String::new(),
        report.routing.flip_rate.to_string(),
    ]);
    rows.push(vec![
        "mean_routing_entropy".into(),
        String::new(),
        report.routing.mean_entropy.to_string(),
    ]);
    rows.push(vec![
        "max_bilateral_residual".into(),
        String::new(),
        report.max_bilateral_residual.to_string(),
    ]);
    rows.push(vec![
        "first_saturation_task".into(),
        String::new(),
        report
            .first_saturation_task
            .map_or_else(|| "none".into(), |t| t.to_string()),
    ]);
    for overlap in &report.overlaps {
        rows.push(vec![
            "omega_activation".into(),
            format!("{}-{}", overlap.task_a, overlap.task_b),
            overlap.omega_activation.to_string(),
        ]);
        rows.push(vec![
            "omega_gradient".into(),
            format!("{}-{}", overlap.task_a, overlap.task_b),
            overlap.omega_gradient.to_string(),
        ]);
    }
    metrics::write_rows_csv(&dir.join("metrics.csv"), "metric,task,value", &rows)?;

    let mut diag: Vec<Vec<String>> = Vec::new();
    for c in &report.consumption {
        diag.push(vec![
            "consumption".into(),
            c.task.to_string(),
            String::new(),
            c.layer.to_string(),
            c.slot.to_string(),
            c.value.to_string(),
        ]);
    }
    for t in &report.theta_min {
        diag.push(vec![
            "theta_min".into(),
            t.task.to_string(),
            String::new(),
            t.layer.to_string(),
            t.slot.to_string(),
            t.radians.to_string(),
        ]);
    }
    for r in &report.bilateral_residuals {
        diag.push(vec![
            "bilateral_residual".into(),
            r.task.to_string(),
            r.round.to_string(),
            String::new(),
            String::new(),
            r.value.to_string(),
        ]);
    }
    metrics::write_rows_csv(
        &dir.join("diagnostics.csv"),
        "record,task,round,layer,expert,value",
        &diag,
    )?;

    let landscape = InterferenceLandscape {
        gamma: report.gamma.clone(),
        warnings: report.gamma_warnings.clone(),
    };
    let allocation = BudgetAllocation {
        k_l: report.budget_k.clone(),
        k_bar: report.config.k_bar,
        uniform_fallback: report.uniform_budget,
    };
    scheduler::write_gamma_csv(
        &dir.join("gamma.csv"),
        &report.config.adapted_layers,
        &landscape,
        &allocation,
    )?;

    let json = serde_json::to_string_pretty(report)
        .map_err(|e| CoreError::contract(format!("report serialization failed: {e}")))?;
    std::fs::write(dir.join("report.json"), json)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub aa: f64,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
}

/// Run one experiment per (value, seed) over a named axis with a shared
/// seed set, emitting per-run artifacts and an aggregated `sweep.csv`.
pub fn sweep(
    base: &ExperimentConfig,
    axis: &str,
    values: &[f64],
    n_seeds: u64,
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || n_seeds == 0 {
        return Err(CoreError::config("sweep needs values and at least one seed"));
    }
    let mut rows = Vec::new();
    for &value in values {
        for offset in 0..n_seeds {
            let mut cfg = base.clone();
            cfg.seed = base.seed + offset;
            apply_axis(&mut cfg, axis, value)?;
            cfg.validate()?;
            let report = run_experiment(&cfg)?;
            if let Some(dir) = out_dir {
                let run_dir = dir.join(format!("{axis}_{value}")).join(format!(
                    "seed_{}",
                    cfg.seed
                ));
                write_outputs(&report, &run_dir)?;
            }
            rows.push(SweepRow {
                axis: axis.to_string(),
                value,
                seed: cfg.seed,
                aa: report.metrics.aa,
                bwt: report.metrics.bwt,
                fwt: report.metrics.fwt,
            });
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let csv_rows: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.axis.clone(),
                    r.value.to_string(),
                    r.seed.to_string(),
                    r.aa.to_string(),
                    r.bwt.map_or_else(|| "undefined".into(), |v| v.to_string()),
                    r.fwt.map_or_else(|| "undefined".into(), |v| v.to_string()),
                ]
            })
            .collect();
        metrics::write_rows_csv(
            &dir.join("sweep.csv"),
            "axis,value,seed,aa,bwt,fwt",
            &csv_rows,
        )?;
    }
    Ok(rows)
}

fn apply_axis(cfg: &mut ExperimentConfig, axis: &str, value: f64) -> Result<()> {
    let as_count = |value: f64| -> Result<usize> {
        if value < 0.0 || value.fract() != 0.0 {
            return Err(CoreError::config(format!(
                "axis value {value} must be a nonnegative integer"
            )));
        }
        Ok(value as usize)
    };
    match axis {
        "beta" => cfg.beta = value,
        "n_clients" => cfg.n_clients = as_count(value)?,
        "s_0" => cfg.warmup_steps = as_count(value)?,
        "k_bar" => cfg.k_bar = as_count(value)?,
        "opposition" => cfg.opposition = value,
        other => {
            return Err(CoreError::config(format!(
                "unknown sweep axis '{other}' (expected beta | n_clients | s_0 | k_bar | opposition)"
            )))
        }
    }
    Ok(())
}
