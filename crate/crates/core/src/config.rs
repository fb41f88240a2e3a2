//! Experiment configuration: a flat key-value file format with sections,
//! strict validation, and the desk-scale defaults.
//!
//! ```text
//! [run]
//! seed = 7
//! method = prism
//!
//! [model]
//! d = 32
//! adapted_layers = 2,3
//! ```
//!
//! Section headers are organizational; keys are unique across the whole
//! file and unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::ModelShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Per-expert routing-weighted gradient-subspace protection.
    Prism,
    /// Plain FedAvg MoE-LoRA with no protection.
    #[serde(rename = "none")]
    NoProtection,
    /// One shared basis per layer at the same per-task budget.
    Monolithic,
    /// Per-expert bases from unweighted activation covariance.
    Activation,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prism" => Ok(Method::Prism),
            "none" => Ok(Method::NoProtection),
            "monolithic" => Ok(Method::Monolithic),
            "activation" => Ok(Method::Activation),
            other => Err(CoreError::config(format!(
                "unknown method '{other}' (expected prism | none | monolithic | activation)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Prism => "prism",
            Method::NoProtection => "none",
            Method::Monolithic => "monolithic",
            Method::Activation => "activation",
        }
    }

    /// Whether this method maintains protection bases at all.
    pub fn protected(&self) -> bool {
        !matches!(self, Method::NoProtection)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Per-client independent bases instead of the server union.
    pub no_pefosu: bool,
    /// Collapse to one shared basis per layer.
    pub no_per_expert: bool,
    /// Drop the routing weight from covariance accumulation (keep s_i).
    pub no_routing_weight: bool,
    /// Keep training the router after the first task.
    pub no_router_freeze: bool,
    /// Uniform per-layer budgets instead of the water-filling split.
    pub no_scheduling: bool,
    /// Full-strength projection from step zero (s_0 = 0).
    pub no_warmup: bool,
    /// Project the A factor only.
    pub a_only_projection: bool,
}

impl AblationFlags {
    pub fn any_protection_flag(&self) -> bool {
        self.no_pefosu
            || self.no_per_expert
            || self.no_routing_weight
            || self.no_scheduling
            || self.no_warmup
            || self.a_only_projection
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    /// Ambient width of every hidden layer.
    pub d: usize,
    /// LoRA rank.
    pub r: usize,
    /// Experts per adapted layer.
    pub experts: usize,
    /// Active experts per sample.
    pub top_k: usize,
    /// Number of classes.
    pub classes: usize,
    /// Hidden layers in the backbone.
    pub layers: usize,
    /// Which layers carry adapters.
    pub adapted_layers: Vec<usize>,
    pub n_tasks: usize,
    pub samples_per_task: usize,
    /// Inter-task gradient opposition in [0, 1].
    pub opposition: f64,
    pub n_clients: usize,
    /// Dirichlet concentration of the label-skew partition.
    pub beta: f64,
    pub rounds_per_task: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Total per-expert protection budget split across adapted layers.
    pub k_bar: usize,
    /// Warmup length s_0 in batch steps; 0 disables the anneal.
    pub warmup_steps: usize,
    /// Route densely (all experts active) during the first task.
    pub dense_router_warmup: bool,
    pub ablation: AblationFlags,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: the standard 4-task scenario. The warmup length
    /// is one epoch-equivalent of batch steps at these sizes
    /// (600 samples / 3 clients / batch 16, rounded up).
    fn default() -> Self {
        Self {
            seed: 7,
            method: Method::Prism,
            d: 32,
            r: 4,
            experts: 4,
            top_k: 1,
            classes: 4,
            layers: 4,
            adapted_layers: vec![2, 3],
            n_tasks: 4,
            samples_per_task: 600,
            opposition: 1.0,
            n_clients: 3,
            beta: 0.3,
            rounds_per_task: 1,
            local_epochs: 1,
            batch_size: 16,
            learning_rate: 2.0,
            k_bar: 12,
            warmup_steps: 13,
            dense_router_warmup: false,
            ablation: AblationFlags::default(),
        }
    }
}

const SECTIONS: &[&str] = &[
    "run",
    "model",
    "tasks",
    "federation",
    "optim",
    "protection",
    "ablation",
];

impl ExperimentConfig {
    /// Parse the key-value format over the defaults. An empty file yields
    /// the default configuration.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(section) = line.strip_prefix('[') {
                let name = section.strip_suffix(']').ok_or_else(|| {
                    CoreError::config(format!("line {}: malformed section header", ln + 1))
                })?;
                if !SECTIONS.contains(&name.trim()) {
                    return Err(CoreError::config(format!(
                        "line {}: unknown section '{}'",
                        ln + 1,
                        name.trim()
                    )));
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::config(format!("line {}: expected key = value", ln + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(CoreError::config(format!(
                    "line {}: duplicate key '{key}'",
                    ln + 1
                )));
            }
            cfg.apply(key, value)
                .map_err(|e| CoreError::config(format!("line {}: {e}", ln + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| CoreError::config(format!("bad value for {key}: {e}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "method" => self.method = Method::parse(value)?,
            "d" => self.d = num(key, value)?,
            "r" => self.r = num(key, value)?,
            "experts" => self.experts = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "adapted_layers" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(|v| v.trim().parse::<usize>()).collect();
                self.adapted_layers = parsed
                    .map_err(|e| CoreError::config(format!("bad adapted_layers: {e}")))?;
            }
            "n_tasks" => self.n_tasks = num(key, value)?,
            "samples_per_task" => self.samples_per_task = num(key, value)?,
            "opposition" => self.opposition = num(key, value)?,
            "n_clients" => self.n_clients = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "rounds_per_task" => self.rounds_per_task = num(key, value)?,
            "local_epochs" => self.local_epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "k_bar" => self.k_bar = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "dense_router_warmup" => self.dense_router_warmup = num(key, value)?,
            "no_pefosu" => self.ablation.no_pefosu = num(key, value)?,
            "no_per_expert" => self.ablation.no_per_expert = num(key, value)?,
            "no_routing_weight" => self.ablation.no_routing_weight = num(key, value)?,
            "no_router_freeze" => self.ablation.no_router_freeze = num(key, value)?,
            "no_scheduling" => self.ablation.no_scheduling = num(key, value)?,
            "no_warmup" => self.ablation.no_warmup = num(key, value)?,
            "a_only_projection" => self.ablation.a_only_projection = num(key, value)?,
            other => {
                return Err(CoreError::config(format!("unknown key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::config(msg));
        if self.d < 2 {
            return fail(format!("d must be at least 2, got {}", self.d));
        }
        if self.r == 0 || self.r > self.d {
            return fail(format!("r must satisfy 1 <= r <= d, got {}", self.r));
        }
        if self.experts == 0 {
            return fail("experts must be positive".into());
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return fail(format!(
                "top_k must satisfy 1 <= K <= E, got {} with E = {}",
                self.top_k, self.experts
            ));
        }
        if self.classes < 2 || self.classes > self.d {
            return fail(format!(
                "classes must satisfy 2 <= m <= d, got {}",
                self.classes
            ));
        }
        if self.layers == 0 {
            return fail("layers must be positive".into());
        }
        if self.adapted_layers.is_empty() {
            return fail("at least one adapted layer is required".into());
        }
        let mut sorted = self.adapted_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.adapted_layers.len() || sorted != self.adapted_layers {
            return fail("adapted_layers must be strictly increasing".into());
        }
        if *sorted.last().unwrap() >= self.layers {
            return fail(format!(
                "adapted layer {} out of range for {} layers",
                sorted.last().unwrap(),
                self.layers
            ));
        }
        if self.n_tasks == 0 {
            return fail("n_tasks must be positive".into());
        }
        if self.samples_per_task < self.classes {
            return fail("samples_per_task must cover every class".into());
        }
        if self.n_clients == 0 || self.n_clients > self.samples_per_task {
            return fail(format!(
                "n_clients must satisfy 1 <= C <= samples_per_task, got {}",
                self.n_clients
            ));
        }
        if !(self.beta > 0.0) {
            return fail(format!("beta must be positive, got {}", self.beta));
        }
        if self.rounds_per_task == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return fail("rounds_per_task, local_epochs, batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..=1.0).contains(&self.opposition) {
            return fail(format!(
                "opposition must lie in [0, 1], got {}",
                self.opposition
            ));
        }
        if self.method.protected() {
            if self.k_bar == 0 {
                return fail("k_bar must be positive for protected methods".into());
            }
            if self.k_bar < self.adapted_layers.len() {
                return fail(format!(
                    "k_bar = {} cannot give {} adapted layers at least one rank each",
                    self.k_bar,
                    self.adapted_layers.len()
                ));
            }
        }
        if self.ablation.any_protection_flag() && self.method != Method::Prism {
            return fail(format!(
                "protection ablation flags require method = prism, got {}",
                self.method.as_str()
            ));
        }
        if self.ablation.no_per_expert && self.experts == 1 {
            // Degenerate but coherent: a single expert is already monolithic.
        }
        Ok(())
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            d: self.d,
            r: self.r,
            experts: self.experts,
            top_k: self.top_k,
            classes: self.classes,
            layers: self.layers,
            adapted_layers: self.adapted_layers.clone(),
        }
    }

    /// Effective warmup length after the no-warmup ablation.
    pub fn effective_warmup(&self) -> usize {
        if self.ablation.no_warmup {
            0
        } else {
            self.warmup_steps
        }
    }

    /// The ten-task small-width stress scenario used for long-horizon
    /// capacity comparisons.
    pub fn long_sequence() -> Self {
        Self {
            d: 20,
            r: 2,
            classes: 4,
            n_tasks: 10,
            samples_per_task: 400,
            k_bar: 6,
            warmup_steps: 0,
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn sections_and_comments_parse() {
        let text = "
# experiment
[run]
seed = 11
method = monolithic

[model]
d = 16
r = 2
adapted_layers = 1,3
classes = 3

[federation]
n_clients = 2
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.method, Method::Monolithic);
        assert_eq!(cfg.d, 16);
        assert_eq!(cfg.adapted_layers, vec![1, 3]);
        assert_eq!(cfg.n_clients, 2);
        // Untouched keys keep defaults.
        assert_eq!(cfg.batch_size, 16);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(ExperimentConfig::parse("mystery = 1").is_err());
        assert!(ExperimentConfig::parse("[weird]\n").is_err());
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(ExperimentConfig::parse("seed").is_err());
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(ExperimentConfig::parse("top_k = 9").is_err());
        assert!(ExperimentConfig::parse("opposition = 1.5").is_err());
        assert!(ExperimentConfig::parse("beta = 0").is_err());
        assert!(ExperimentConfig::parse("adapted_layers = 9").is_err());
        assert!(ExperimentConfig::parse("r = 99").is_err());
        assert!(ExperimentConfig::parse("learning_rate = -0.5").is_err());
    }

    #[test]
    fn ablations_require_prism() {
        assert!(ExperimentConfig::parse("method = none\nno_warmup = true").is_err());
        assert!(ExperimentConfig::parse("method = none\nno_router_freeze = true").is_ok());
        assert!(ExperimentConfig::parse("no_pefosu = true").is_ok());
    }

    #[test]
    fn method_strings_round_trip() {
        for m in [
            Method::Prism,
            Method::NoProtection,
            Method::Monolithic,
            Method::Activation,
        ] {
            assert_eq!(Method::parse(m.as_str()).unwrap(), m);
        }
    }

    #[test]
    fn config_serializes_round_trip() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
