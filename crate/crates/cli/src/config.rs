//! Run configuration files and the built-in presets.

use std::path::{Path, PathBuf};

use fimspec::activation::Activation;
use fimspec::dynamics::LossKind;
use fimspec::gauss::DEFAULT_ORDER;
use fimspec::meanfield::NetworkConfig;
use fimspec::theory::GramKind;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Everything a run needs. Parsed strictly: unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub depth: usize,
    pub width: usize,
    pub outputs: usize,
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    /// One activation for every hidden layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<String>,
    /// One activation per hidden layer; excludes `activation`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activations: Option<Vec<String>>,
    /// `α_0..α_{L-1}`; all ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_ratios: Option<Vec<f64>>,

    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<String>,
    #[serde(default = "default_order")]
    pub quadrature_order: usize,

    /// Width sweep for `compare`, and the `N = M` sweep for `ntk-scaling`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    /// Sample-size sweep for `ntk-scaling`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_sizes: Option<Vec<usize>>,

    /// `"cross_entropy"` or `"mse"`.
    #[serde(default = "default_loss")]
    pub loss: String,
    /// Absolute learning rate; excludes `eta_scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Learning rate as a multiple of `1/λ_max(F)` at initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_scale: Option<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_loss: Option<f64>,
    /// Seed of the frozen network that labels the inputs; `seed + 1` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_seed: Option<u64>,
    /// Also run gradient descent on the weights next to the kernel simulation.
    #[serde(default = "default_true")]
    pub reference: bool,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn default_samples() -> usize {
    100
}

fn default_trials() -> usize {
    1
}

fn default_kinds() -> Vec<String> {
    vec!["fim_mse".into()]
}

fn default_order() -> usize {
    DEFAULT_ORDER
}

fn default_loss() -> String {
    "cross_entropy".into()
}

fn default_steps() -> usize {
    1000
}

fn default_true() -> bool {
    true
}

pub const PRESETS: &[(&str, &str)] = &[
    ("fig3a", include_str!("../presets/fig3a.toml")),
    ("fig3b", include_str!("../presets/fig3b.toml")),
    ("fig4-tanh", include_str!("../presets/fig4-tanh.toml")),
    ("fig4-relu", include_str!("../presets/fig4-relu.toml")),
    ("fig4-linear", include_str!("../presets/fig4-linear.toml")),
    ("fig5", include_str!("../presets/fig5.toml")),
    ("fig6", include_str!("../presets/fig6.toml")),
    ("fig7", include_str!("../presets/fig7.toml")),
];

pub fn preset_text(name: &str) -> Result<&'static str, CliError> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            CliError::Usage(format!("unknown preset {name:?}; available: {}", names.join(", ")))
        })
}

pub fn read_config_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), message: e.to_string() })
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, col)
}

impl ExperimentConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = match e.span() {
                Some(span) => {
                    let (l, c) = line_col(text, span.start);
                    (Some(l), Some(c))
                }
                None => (None, None),
            };
            CliError::Config { file: source.to_string(), message: e.message().to_string(), line, column }
        })?;
        cfg.check(source)?;
        Ok(cfg)
    }

    fn invalid(source: &str, message: impl Into<String>) -> CliError {
        CliError::Config { file: source.to_string(), message: message.into(), line: None, column: None }
    }

    /// Consistency checks that the format alone cannot express.
    pub fn check(&self, source: &str) -> Result<(), CliError> {
        if self.activation.is_some() == self.activations.is_some() {
            return Err(Self::invalid(source, "set exactly one of `activation` and `activations`"));
        }
        if self.eta.is_some() && self.eta_scale.is_some() {
            return Err(Self::invalid(source, "`eta` and `eta_scale` exclude each other"));
        }
        if self.trials == 0 || self.samples == 0 {
            return Err(Self::invalid(source, "`trials` and `samples` must be positive"));
        }
        self.loss_kind().map_err(|m| Self::invalid(source, m))?;
        self.network().map_err(|e| Self::invalid(source, e.to_string()))?;
        self.gram_kinds().map_err(|e| Self::invalid(source, e.to_string()))?;
        Ok(())
    }

    pub fn network(&self) -> fimspec::error::Result<NetworkConfig> {
        let tags: Vec<String> = match (&self.activation, &self.activations) {
            (Some(a), _) => vec![a.clone(); self.depth.saturating_sub(1)],
            (None, Some(v)) => v.clone(),
            (None, None) => Vec::new(),
        };
        let activations = tags.iter().map(|t| t.parse::<Activation>()).collect::<Result<Vec<_>, _>>()?;
        let cfg = NetworkConfig {
            depth: self.depth,
            width: self.width,
            width_ratios: self.width_ratios.clone().unwrap_or_else(|| vec![1.0; self.depth]),
            outputs: self.outputs,
            sigma_w2: self.sigma_w2,
            sigma_b2: self.sigma_b2,
            activations,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn gram_kinds(&self) -> fimspec::error::Result<Vec<GramKind>> {
        self.kinds
            .iter()
            .map(|s| {
                let k: GramKind = s.parse()?;
                k.validate(self.depth)?;
                Ok(k)
            })
            .collect()
    }

    pub fn loss_kind(&self) -> Result<LossKind, String> {
        match self.loss.as_str() {
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            "mse" => Ok(LossKind::Mse),
            other => Err(format!("unknown loss {other:?}; use \"cross_entropy\" or \"mse\"")),
        }
    }

    pub fn teacher_seed(&self) -> u64 {
        self.teacher_seed.unwrap_or(self.seed.wrapping_add(1))
    }

    /// Fully resolved form; reproduces the run on its own.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
