//! Experiment configuration, read from JSON. Every field has a default, so
//! `{}` is a complete config describing the 200-dimensional synthetic run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_IMPORTANT_THRESHOLD, DEFAULT_UNIMPORTANT_THRESHOLD};
use crate::model::{RoutingConfig, RoutingMode};
use crate::pruning::{Criterion, Grouping};
use crate::synthdata::PatternMode;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub d: usize,
    /// Tokens per sample.
    pub n: usize,
    pub pattern_mode: PatternMode,
    /// Seeds patterns, initialization and all datasets.
    pub seed: u64,
    /// Size of the fixed training set cycled in epoch mode; 0 trains on
    /// fresh samples every step.
    pub train_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            d: 200,
            n: 100,
            pattern_mode: PatternMode::StandardBasis,
            seed: 0,
            train_samples: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Zero-mean Gaussian with the configured standard deviations.
    #[default]
    Random,
    /// Gaussian plus a task-pattern component on the first
    /// `planted_per_group` experts of each sign group.
    Planted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of experts.
    pub k: usize,
    /// Hidden neurons per expert.
    pub m: usize,
    pub routing: RoutingMode,
    pub l: usize,
    /// Experts `0..positive_experts` get head `+1`, the rest `-1`.
    pub positive_experts: usize,
    pub init: InitMode,
    pub planted_per_group: usize,
    /// Component added along the task pattern to planted routers.
    pub plant_router: f64,
    /// Component added along the task pattern to every neuron of a planted
    /// expert.
    pub plant_neuron: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 20,
            m: 10,
            routing: RoutingMode::ExpertChoice,
            l: 5,
            positive_experts: 10,
            init: InitMode::Random,
            planted_per_group: 2,
            plant_router: 1.0,
            plant_neuron: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn route(&self) -> RoutingConfig {
        RoutingConfig {
            mode: self.routing,
            l: self.l,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Expert-pruning ratios; `run` takes exactly one, `sweep` any number.
    pub rho: Vec<f64>,
    pub grouping: Grouping,
    pub criterion: Criterion,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            rho: vec![0.5],
            grouping: Grouping::BySignGroup,
            criterion: Criterion::Delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fresh balanced samples for test accuracy.
    pub eval_samples: usize,
    /// Monte Carlo samples per class for proficiency.
    pub proficiency_samples: usize,
    pub important_threshold: f64,
    pub unimportant_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eval_samples: 10_000,
            proficiency_samples: 1000,
            important_threshold: DEFAULT_IMPORTANT_THRESHOLD,
            unimportant_threshold: DEFAULT_UNIMPORTANT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Overrides every seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let (d, m) = (&self.data, &self.model);
        if d.d < 4 {
            return Err(Error::InvalidDimension(format!("d = {} must be >= 4", d.d)));
        }
        if d.n == 0 || d.n > d.d {
            return Err(Error::Config(format!("n = {} must lie in 1..=d ({})", d.n, d.d)));
        }
        if m.k < 2 || m.m == 0 {
            return Err(Error::Config("need k >= 2 experts and m >= 1 neurons".into()));
        }
        if m.positive_experts == 0 || m.positive_experts >= m.k {
            return Err(Error::Config(format!(
                "positive_experts = {} must leave both sign groups non-empty (k = {})",
                m.positive_experts, m.k
            )));
        }
        m.route().validate(m.k, d.n)?;
        if m.init == InitMode::Planted {
            let smaller = m.positive_experts.min(m.k - m.positive_experts);
            if m.planted_per_group == 0 || m.planted_per_group > smaller {
                return Err(Error::Config(format!(
                    "planted_per_group = {} must lie in 1..={smaller}",
                    m.planted_per_group
                )));
            }
            if !(m.plant_router.is_finite() && m.plant_neuron.is_finite()) {
                return Err(Error::Config("plant strengths must be finite".into()));
            }
        }
        self.train.validate()?;
        if self.prune.rho.is_empty() {
            return Err(Error::Config("prune.rho needs at least one value".into()));
        }
        if let Some(r) = self.prune.rho.iter().find(|r| !r.is_finite()) {
            return Err(Error::Config(format!("rho = {r} is not finite")));
        }
        let e = &self.eval;
        if e.eval_samples == 0 || e.proficiency_samples == 0 {
            return Err(Error::Config("eval_samples and proficiency_samples must be >= 1".into()));
        }
        let valid = |t: f64| t > 0.0 && t < 1.0;
        if !valid(e.important_threshold) || !valid(e.unimportant_threshold) || e.important_threshold <= e.unimportant_threshold {
            return Err(Error::Config("thresholds must satisfy 0 < unimportant < important < 1".into()));
        }
        Ok(())
    }
}

/// Parses a comma-separated list of ratios such as `0,0.25,0.5`.
pub fn parse_rho_list(text: &str) -> Result<Vec<f64>> {
    let values = text
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| Error::Config(format!("bad rho value '{t}'"))))
        .collect::<Result<Vec<f64>>>()?;
    if values.is_empty() {
        return Err(Error::Config("empty rho list".into()));
    }
    Ok(values)
}
