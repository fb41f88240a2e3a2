//! Server side of the federation: FedAvg parameter aggregation and the
//! end-of-task subspace union that folds weighted client covariance factors
//! into each protection basis.

use nalgebra::DMatrix;

use crate::error::{CoreError, Result};
use crate::model::MoeLoraModel;
use crate::subspace::{thin_svd_union, CovarianceFactor, ProtectionBasis};

/// Protection bases per adapted-layer position, either one per expert or one
/// shared per layer (the monolithic ablation/baseline).
#[derive(Debug, Clone)]
pub struct BasisBank {
    d: usize,
    shared: bool,
    entries: Vec<Vec<ProtectionBasis>>,
    /// Incremented on every union; the broadcast marker clients sync against.
    pub broadcast_round: usize,
}

impl BasisBank {
    pub fn per_expert(d: usize, n_layers: usize, n_experts: usize) -> Self {
        Self {
            d,
            shared: false,
            entries: vec![
                (0..n_experts).map(|_| ProtectionBasis::empty(d)).collect();
                n_layers
            ],
            broadcast_round: 0,
        }
    }

    pub fn shared(d: usize, n_layers: usize) -> Self {
        Self {
            d,
            shared: true,
            entries: vec![vec![ProtectionBasis::empty(d)]; n_layers],
            broadcast_round: 0,
        }
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn ambient_dim(&self) -> usize {
        self.d
    }

    pub fn n_layers(&self) -> usize {
        self.entries.len()
    }

    /// The basis governing projection for (layer position, expert); the
    /// shared variant ignores the expert index.
    pub fn basis_for(&self, layer_pos: usize, expert: usize) -> &ProtectionBasis {
        if self.shared {
            &self.entries[layer_pos][0]
        } else {
            &self.entries[layer_pos][expert]
        }
    }

    /// Slots per layer: experts, or 1 when shared.
    pub fn slots_per_layer(&self) -> usize {
        self.entries.first().map_or(0, Vec::len)
    }

    pub fn entry(&self, layer_pos: usize, slot: usize) -> &ProtectionBasis {
        &self.entries[layer_pos][slot]
    }

    /// Largest null-space consumption k/d over all slots.
    pub fn max_consumption(&self) -> f64 {
        self.entries
            .iter()
            .flatten()
            .map(|p| p.rank() as f64 / self.d as f64)
            .fold(0.0, f64::max)
    }

    #[doc(hidden)]
    pub fn set_for_test(&mut self, layer_pos: usize, slot: usize, basis: crate::subspace::OrthonormalBasis) {
        self.entries[layer_pos][slot] = ProtectionBasis {
            basis,
            spectrum: crate::subspace::Spectrum::empty(),
        };
    }
}

/// Global state the server carries across rounds and tasks.
#[derive(Debug, Clone)]
pub struct GlobalState {
    pub model: MoeLoraModel,
    pub bank: BasisBank,
    pub round: usize,
}

fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| *w < 0.0) {
        return Err(CoreError::contract("FedAvg weights must be nonnegative"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(CoreError::contract(format!(
            "FedAvg weights must sum to 1 within 1e-12, got {sum}"
        )));
    }
    Ok(())
}

/// Elementwise weighted mean of client parameters, summed in ascending
/// client order. The summation order is part of the determinism contract.
pub fn fedavg_aggregate(clients: &[MoeLoraModel], weights: &[f64]) -> Result<MoeLoraModel> {
    if clients.is_empty() || clients.len() != weights.len() {
        return Err(CoreError::contract(
            "need one weight per client model and at least one client",
        ));
    }
    validate_weights(weights)?;
    let first = clients[0].trainable_params();
    let mut acc = vec![0.0; first.len()];
    for (c, model) in clients.iter().enumerate() {
        let params = model.trainable_params();
        if params.len() != first.len() {
            return Err(CoreError::contract(format!(
                "client {c} parameter shape mismatch: {} vs {}",
                params.len(),
                first.len()
            )));
        }
        let w = weights[c];
        for (a, p) in acc.iter_mut().zip(params.iter()) {
            *a += w * p;
        }
    }
    let mut out = clients[0].clone();
    out.set_trainable_params(&acc);
    Ok(out)
}

/// Weighted mean of raw matrices in ascending index order; the same reduce
/// the model aggregation uses, exposed for gradient-level checks.
pub fn weighted_mean_matrix(mats: &[DMatrix<f64>], weights: &[f64]) -> Result<DMatrix<f64>> {
    if mats.is_empty() || mats.len() != weights.len() {
        return Err(CoreError::contract("need one weight per matrix"));
    }
    validate_weights(weights)?;
    let mut acc = DMatrix::<f64>::zeros(mats[0].nrows(), mats[0].ncols());
    for (m, w) in mats.iter().zip(weights) {
        if m.shape() != acc.shape() {
            return Err(CoreError::contract("matrix shape mismatch"));
        }
        acc += m * *w;
    }
    Ok(acc)
}

/// End-of-task subspace union: for every (layer, slot), merge the carry-over
/// eigenpair with the weighted client factors through one thin SVD, growing
/// the retained rank by at most the per-layer budget `k_l` per task (capped
/// at the ambient dimension). Experts whose factors are all empty and whose
/// carry is empty stay empty.
pub fn pefosu_update(
    bank: &mut BasisBank,
    uploads: &[Vec<Vec<CovarianceFactor>>],
    weights: &[f64],
    k_per_layer: &[usize],
) -> Result<()> {
    validate_weights(weights)?;
    if uploads.len() != weights.len() {
        return Err(CoreError::contract("need one upload per client"));
    }
    for (c, up) in uploads.iter().enumerate() {
        if up.len() != bank.n_layers() {
            return Err(CoreError::contract(format!(
                "client {c} uploaded {} layers, expected {}",
                up.len(),
                bank.n_layers()
            )));
        }
    }
    if k_per_layer.len() != bank.n_layers() {
        return Err(CoreError::contract("budget entries must match layers"));
    }

    let d = bank.d;
    for pos in 0..bank.n_layers() {
        let k_l = k_per_layer[pos];
        if bank.shared {
            // One shared basis per layer: each client contributes the
            // concatenation of all its experts' factors at its own weight.
            // The per-task rank increment is E * k_l, the same per-layer
            // total the per-expert bank can spend across its E slots.
            let n_experts = uploads.first().map_or(1, |up| up[pos].len());
            let mut factors = Vec::new();
            for (c, up) in uploads.iter().enumerate() {
                let total: usize = up[pos].iter().map(|f| f.rank_cols()).sum();
                let mut combined = DMatrix::<f64>::zeros(d, total);
                let mut col = 0;
                for f in &up[pos] {
                    for j in 0..f.rank_cols() {
                        combined.set_column(col, &f.matrix().column(j));
                        col += 1;
                    }
                }
                factors.push((weights[c], CovarianceFactor::new(combined)?));
            }
            update_slot(bank, pos, 0, factors, k_l * n_experts)?;
        } else {
            let n_experts = bank.slots_per_layer();
            for e in 0..n_experts {
                let factors = uploads
                    .iter()
                    .enumerate()
                    .map(|(c, up)| (weights[c], up[pos][e].clone()))
                    .collect();
                update_slot(bank, pos, e, factors, k_l)?;
            }
        }
    }
    bank.broadcast_round += 1;
    Ok(())
}

fn update_slot(
    bank: &mut BasisBank,
    pos: usize,
    slot: usize,
    factors: Vec<(f64, CovarianceFactor)>,
    increment: usize,
) -> Result<()> {
    // A client that never routed to this expert uploads an empty factor; it
    // keeps its FedAvg weight in the union but contributes no columns. With
    // no new mass at all, the basis is unchanged (never-routed neutrality).
    if factors.iter().all(|(_, f)| f.is_empty()) {
        return Ok(());
    }
    let carry = &bank.entries[pos][slot];
    let k_out = (carry.rank() + increment).min(bank.d);
    let out = thin_svd_union(&carry.basis, &carry.spectrum, &factors, k_out)?;
    bank.entries[pos][slot] = ProtectionBasis {
        basis: out.basis,
        spectrum: out.spectrum,
    };
    Ok(())
}
