//! Frozen-backbone network with MoE-LoRA adapters at configurable layers.
//!
//! The backbone is a stack of frozen random affine layers with `tanh` between
//! them and a frozen linear readout to class logits. At each adapted layer a
//! softmax router with top-K gating mixes per-expert low-rank updates into
//! the layer output:
//!
//! `y = W x + b + sum_{e in S_K} pi_e(x) * scaling * B_e A_e x`
//!
//! Forward records the per-sample quantities the protection machinery needs
//! (input activation `h`, routing weights `pi`, active set); backward fills
//! the output-side error `delta` and per-expert sensitivity `s_e = ||B_e^T
//! delta||^2` and returns exact gradients for the active experts' factors
//! and, while unfrozen, the router.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Shape parameters for model construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelShape {
    /// Ambient width of every hidden layer.
    pub d: usize,
    /// LoRA rank.
    pub r: usize,
    /// Number of experts per adapted layer.
    pub experts: usize,
    /// Active experts per sample.
    pub top_k: usize,
    /// Number of classes (readout rows).
    pub classes: usize,
    /// Number of hidden layers.
    pub layers: usize,
    /// Indices of layers that carry MoE-LoRA adapters.
    pub adapted_layers: Vec<usize>,
}

/// LoRA scaling factor applied to every expert contribution.
pub const LORA_SCALING: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct FrozenBackbone {
    layers: Vec<(DMatrix<f64>, DVector<f64>)>,
    readout: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraExpert {
    /// r x d input-side factor.
    pub a_factor: DMatrix<f64>,
    /// d x r output-side factor; zero at task start so the adapter is inert.
    pub b_factor: DMatrix<f64>,
    pub scaling: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterState {
    /// E x d gating weights over the layer input.
    pub weight: DMatrix<f64>,
    /// Once set, the router weight never changes again within a run.
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct AdaptedLayer {
    pub experts: Vec<LoraExpert>,
    pub router: RouterState,
}

#[derive(Debug, Clone)]
pub struct MoeLoraModel {
    shape: ModelShape,
    backbone: FrozenBackbone,
    /// One entry per hidden layer; `None` for layers without adapters.
    adapters: Vec<Option<AdaptedLayer>>,
    /// When set, every expert is active regardless of `top_k` (dense gating).
    pub dense_routing: bool,
}

/// Per-sample record at one adapted layer.
#[derive(Debug, Clone)]
pub struct AdaptedLayerTrace {
    pub layer: usize,
    /// Input activation h at this layer.
    pub input: DVector<f64>,
    /// Full softmax routing vector over E experts; sums to 1.
    pub routing: DVector<f64>,
    /// Active expert indices, ascending.
    pub active: Vec<usize>,
    /// Output-side error at this layer; filled by backward.
    pub delta: Option<DVector<f64>>,
    /// (expert, s_e) for active experts; filled by backward.
    pub sensitivities: Vec<(usize, f64)>,
}

/// Everything forward records for one sample, enough for an exact backward.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    /// h_0 .. h_L: the input and every post-activation hidden state.
    pub hidden: Vec<DVector<f64>>,
    pub logits: DVector<f64>,
    pub adapted: Vec<AdaptedLayerTrace>,
}

/// Traces for a batch of samples.
#[derive(Debug, Clone, Default)]
pub struct BatchTrace {
    pub samples: Vec<SampleTrace>,
}

#[derive(Debug, Clone)]
pub struct ExpertGrad {
    pub grad_a: DMatrix<f64>,
    pub grad_b: DMatrix<f64>,
}

/// Exact loss gradients for one sample: per adapted layer, per expert
/// (inactive experts are `None`), plus the router gradient while unfrozen.
#[derive(Debug, Clone)]
pub struct SampleGradients {
    /// Indexed parallel to `ModelShape::adapted_layers`.
    pub layers: Vec<Vec<Option<ExpertGrad>>>,
    pub router: Vec<Option<DMatrix<f64>>>,
}

impl FrozenBackbone {
    fn init<R: Rng>(shape: &ModelShape, rng: &mut R) -> Self {
        let scale = 1.0 / (shape.d as f64).sqrt();
        let layers = (0..shape.layers)
            .map(|_| {
                let w = DMatrix::from_fn(shape.d, shape.d, |_, _| {
                    rng.sample::<f64, _>(StandardNormal) * scale
                });
                // The bias scale controls how far the backbone sits from an
                // odd function; sign-flipped inputs must not produce
                // sign-flipped hidden states or opposed tasks collapse onto
                // the same activation lines.
                let b = DVector::from_fn(shape.d, |_, _| {
                    rng.sample::<f64, _>(StandardNormal) * 0.35
                });
                (w, b)
            })
            .collect();
        // Orthonormal readout rows keep the class directions well separated
        // for every seed; the matrix stays frozen like the rest.
        let gauss = DMatrix::<f64>::from_fn(shape.d, shape.classes, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let readout = gauss
            .qr()
            .q()
            .columns(0, shape.classes)
            .transpose()
            .into_owned();
        Self { layers, readout }
    }
}

impl LoraExpert {
    fn init<R: Rng>(d: usize, r: usize, rng: &mut R) -> Self {
        let mut expert = Self {
            a_factor: DMatrix::zeros(r, d),
            b_factor: DMatrix::zeros(d, r),
            scaling: LORA_SCALING,
        };
        expert.redraw_a(rng);
        expert
    }

    /// Uniform in [-1/sqrt(d), 1/sqrt(d)], the standard A-side init.
    fn redraw_a<R: Rng>(&mut self, rng: &mut R) {
        let d = self.a_factor.ncols();
        let bound = 1.0 / (d as f64).sqrt();
        for v in self.a_factor.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }
}

/// Softmax routing weights and the top-K active set for one input.
/// Ties are broken toward the lower expert index.
pub fn select_topk(router: &RouterState, h: &DVector<f64>, k: usize) -> (DVector<f64>, Vec<usize>) {
    let e = router.weight.nrows();
    assert!(k >= 1 && k <= e, "top-k must satisfy 1 <= K <= E");
    let logits = &router.weight * h;
    let pi = softmax(&logits);
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|&i, &j| pi[j].partial_cmp(&pi[i]).unwrap().then(i.cmp(&j)));
    let mut active: Vec<usize> = order.into_iter().take(k).collect();
    active.sort_unstable();
    (pi, active)
}

fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: DVector<f64> = logits.map(|v| (v - max).exp());
    let sum: f64 = exp.iter().sum();
    exp / sum
}

/// Softmax cross-entropy loss over class logits.
pub fn cross_entropy(logits: &DVector<f64>, label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Gradient of the cross-entropy loss in the logits: `softmax - onehot`.
pub fn cross_entropy_grad(logits: &DVector<f64>, label: usize) -> DVector<f64> {
    let mut g = softmax(logits);
    g[label] -= 1.0;
    g
}

/// Argmax prediction; ties resolve to the lowest index.
pub fn predict(logits: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best
}

impl MoeLoraModel {
    pub fn init<R: Rng>(shape: ModelShape, rng: &mut R) -> Self {
        assert!(shape.r <= shape.d, "LoRA rank must not exceed d");
        assert!(
            shape.top_k >= 1 && shape.top_k <= shape.experts,
            "top-k must satisfy 1 <= K <= E"
        );
        assert!(
            shape.adapted_layers.iter().all(|l| *l < shape.layers),
            "adapted layer index out of range"
        );
        let backbone = FrozenBackbone::init(&shape, rng);
        let router_scale = 2.0 / (shape.d as f64).sqrt();
        let mut adapters = vec![None; shape.layers];
        for &l in &shape.adapted_layers {
            let experts = (0..shape.experts)
                .map(|_| LoraExpert::init(shape.d, shape.r, rng))
                .collect();
            let weight = DMatrix::from_fn(shape.experts, shape.d, |_, _| {
                rng.sample::<f64, _>(StandardNormal) * router_scale
            });
            adapters[l] = Some(AdaptedLayer {
                experts,
                router: RouterState {
                    weight,
                    frozen: false,
                },
            });
        }
        Self {
            shape,
            backbone,
            adapters,
            dense_routing: false,
        }
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn adapted_positions(&self) -> &[usize] {
        &self.shape.adapted_layers
    }

    pub fn adapter(&self, layer: usize) -> Option<&AdaptedLayer> {
        self.adapters[layer].as_ref()
    }

    pub fn adapter_mut(&mut self, layer: usize) -> Option<&mut AdaptedLayer> {
        self.adapters[layer].as_mut()
    }

    /// Freeze every router; irreversible within a run.
    pub fn freeze_router(&mut self) {
        for adapter in self.adapters.iter_mut().flatten() {
            adapter.router.frozen = true;
        }
    }

    pub fn router_frozen(&self) -> bool {
        self.adapters
            .iter()
            .flatten()
            .all(|a| a.router.frozen)
    }

    /// Task-start reset: every B factor to zero, every A factor re-drawn,
    /// routers untouched.
    pub fn reset_for_task<R: Rng>(&mut self, rng: &mut R) {
        for adapter in self.adapters.iter_mut().flatten() {
            for expert in &mut adapter.experts {
                expert.b_factor.fill(0.0);
                expert.redraw_a(rng);
            }
        }
    }

    /// Flatten every trainable parameter in a fixed order: per adapted layer
    /// (ascending), per expert, A then B entries, then the router weight
    /// while it is unfrozen. A frozen router is not a trainable parameter.
    pub fn trainable_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for &l in &self.shape.adapted_layers {
            let adapter = self.adapters[l].as_ref().expect("adapted layer");
            for expert in &adapter.experts {
                out.extend(expert.a_factor.iter());
                out.extend(expert.b_factor.iter());
            }
            if !adapter.router.frozen {
                out.extend(adapter.router.weight.iter());
            }
        }
        out
    }

    /// Write back a parameter vector produced by `trainable_params` on a
    /// model of identical shape and freeze state.
    pub fn set_trainable_params(&mut self, params: &[f64]) {
        let mut cursor = 0;
        for &l in &self.shape.adapted_layers.clone() {
            let adapter = self.adapters[l].as_mut().expect("adapted layer");
            for expert in &mut adapter.experts {
                for v in expert.a_factor.iter_mut() {
                    *v = params[cursor];
                    cursor += 1;
                }
                for v in expert.b_factor.iter_mut() {
                    *v = params[cursor];
                    cursor += 1;
                }
            }
            if !adapter.router.frozen {
                for v in adapter.router.weight.iter_mut() {
                    *v = params[cursor];
                    cursor += 1;
                }
            }
        }
        assert_eq!(cursor, params.len(), "parameter vector length mismatch");
    }

    fn active_set(&self, adapter: &AdaptedLayer, h: &DVector<f64>) -> (DVector<f64>, Vec<usize>) {
        if self.dense_routing {
            let logits = &adapter.router.weight * h;
            let pi = softmax(&logits);
            (pi, (0..self.shape.experts).collect())
        } else {
            select_topk(&adapter.router, h, self.shape.top_k)
        }
    }

    /// Forward pass for one sample; records the trace backward needs.
    pub fn forward(&self, x: &DVector<f64>) -> (DVector<f64>, SampleTrace) {
        assert_eq!(x.len(), self.shape.d, "input dimension mismatch");
        let mut hidden = Vec::with_capacity(self.shape.layers + 1);
        let mut adapted_traces = Vec::new();
        let mut h = x.clone();
        hidden.push(h.clone());
        for (l, (w, b)) in self.backbone.layers.iter().enumerate() {
            let mut z = w * &h + b;
            if let Some(adapter) = &self.adapters[l] {
                let (pi, active) = self.active_set(adapter, &h);
                for &e in &active {
                    let expert = &adapter.experts[e];
                    let ax = &expert.a_factor * &h;
                    z += &expert.b_factor * ax * (pi[e] * expert.scaling);
                }
                adapted_traces.push(AdaptedLayerTrace {
                    layer: l,
                    input: h.clone(),
                    routing: pi,
                    active,
                    delta: None,
                    sensitivities: Vec::new(),
                });
            }
            h = z.map(f64::tanh);
            hidden.push(h.clone());
        }
        let logits = &self.backbone.readout * &h;
        (
            logits.clone(),
            SampleTrace {
                hidden,
                logits,
                adapted: adapted_traces,
            },
        )
    }

    /// Forward pass ignoring all adapters; the frozen-function reference.
    pub fn backbone_forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut h = x.clone();
        for (w, b) in &self.backbone.layers {
            h = (w * &h + b).map(f64::tanh);
        }
        &self.backbone.readout * &h
    }

    /// Exact gradients of a scalar loss with gradient `loss_grad` in the
    /// logits, w.r.t. active experts' factors and (while unfrozen) routers.
    /// Fills `delta` and the per-expert sensitivities in the trace.
    pub fn backward(&self, trace: &mut SampleTrace, loss_grad: &DVector<f64>) -> SampleGradients {
        assert_eq!(
            trace.hidden.len(),
            self.shape.layers + 1,
            "trace does not match model depth"
        );
        assert_eq!(loss_grad.len(), self.shape.classes, "loss grad dimension");

        let n_adapted = self.shape.adapted_layers.len();
        let mut grads = SampleGradients {
            layers: vec![vec![None; self.shape.experts]; n_adapted],
            router: vec![None; n_adapted],
        };

        // dl/dh_L through the readout.
        let mut v = self.backbone.readout.transpose() * loss_grad;

        let mut adapted_slot = trace.adapted.len();
        for l in (0..self.shape.layers).rev() {
            // dl/dz_l through tanh: h_{l+1} = tanh(z_l).
            let h_next = &trace.hidden[l + 1];
            let delta = DVector::from_fn(self.shape.d, |i, _| v[i] * (1.0 - h_next[i] * h_next[i]));
            let (w, _) = &self.backbone.layers[l];
            let mut v_prev = w.transpose() * &delta;

            if let Some(adapter) = &self.adapters[l] {
                adapted_slot -= 1;
                let layer_trace = &mut trace.adapted[adapted_slot];
                assert_eq!(layer_trace.layer, l, "trace does not match adapted layer");
                let h = layer_trace.input.clone();
                let pi = layer_trace.routing.clone();
                let pos = self
                    .shape
                    .adapted_layers
                    .iter()
                    .position(|&p| p == l)
                    .expect("adapted layer position");

                // dl/dpi_e for active experts, for the router path.
                let mut dl_dpi = vec![0.0; self.shape.experts];
                let mut sensitivities = Vec::with_capacity(layer_trace.active.len());
                for &e in &layer_trace.active {
                    let expert = &adapter.experts[e];
                    let q = expert.b_factor.transpose() * &delta; // r-vector
                    let ax = &expert.a_factor * &h; // r-vector
                    let coeff = pi[e] * expert.scaling;
                    let grad_a = &q * h.transpose() * coeff;
                    let grad_b = &delta * ax.transpose() * coeff;
                    dl_dpi[e] = expert.scaling * q.dot(&ax);
                    sensitivities.push((e, q.norm_squared()));
                    // Adapter path into the layer input.
                    v_prev += expert.a_factor.transpose() * q * coeff;
                    grads.layers[pos][e] = Some(ExpertGrad { grad_a, grad_b });
                }

                // Softmax Jacobian: dl/dlogit_j = pi_j (dl_dpi_j - sum_e dl_dpi_e pi_e),
                // with gradient flowing through the soft pi of selected experts only.
                let weighted: f64 = layer_trace
                    .active
                    .iter()
                    .map(|&e| dl_dpi[e] * pi[e])
                    .sum();
                let mut dl_dlogit = DVector::zeros(self.shape.experts);
                for j in 0..self.shape.experts {
                    dl_dlogit[j] = pi[j] * (dl_dpi[j] - weighted);
                }
                // The routing weights depend on the layer input whether or not
                // the router is trainable.
                v_prev += adapter.router.weight.transpose() * &dl_dlogit;
                if !adapter.router.frozen {
                    grads.router[pos] = Some(&dl_dlogit * h.transpose());
                }

                layer_trace.delta = Some(delta.clone());
                layer_trace.sensitivities = sensitivities;
            }
            v = v_prev;
        }
        grads
    }
}
