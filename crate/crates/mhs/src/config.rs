//! Module configuration: hyperparameters of the multi-head scan, parsed from
//! JSON. Validation reports every offending key at once rather than stopping
//! at the first.

use crate::error::{Error, Result};
use crate::esf::{CvGate, EsfScheme};
use crate::routes::ScanPattern;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Fusion scheme selector as it appears in config files. The `_sigmoid`
/// variants swap the thresholded-ReLU gate for a sigmoid; they are a library
/// alternative and not covered by golden files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EsfSchemeName {
    Sum,
    MixturePooling,
    CvScaling,
    MixpoolCv,
    CvScalingSigmoid,
    MixpoolCvSigmoid,
}

/// The `esf` config block: scheme plus its hyperparameters. `w` is the
/// initial pooling mix; the live copy lives in the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsfSettings {
    pub scheme: EsfSchemeName,
    #[serde(default = "default_t")]
    pub t: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_w")]
    pub w: [f64; 2],
}

impl Default for EsfSettings {
    fn default() -> Self {
        EsfSettings {
            scheme: EsfSchemeName::CvScaling,
            t: default_t(),
            eps: default_eps(),
            w: default_w(),
        }
    }
}

impl EsfSettings {
    /// Build the live scheme, with the pooling mix taken from these settings.
    pub fn scheme(&self) -> EsfScheme {
        let w = Tensor::new([1, 2], self.w.to_vec()).expect("fixed-size mix");
        match self.scheme {
            EsfSchemeName::Sum => EsfScheme::Sum,
            EsfSchemeName::MixturePooling => EsfScheme::MixturePooling { w },
            EsfSchemeName::CvScaling => EsfScheme::CvScaling {
                t: self.t,
                eps: self.eps,
                gate: CvGate::ThresholdRelu,
            },
            EsfSchemeName::MixpoolCv => EsfScheme::MixPoolCv {
                w,
                t: self.t,
                eps: self.eps,
                gate: CvGate::ThresholdRelu,
            },
            EsfSchemeName::CvScalingSigmoid => EsfScheme::CvScaling {
                t: self.t,
                eps: self.eps,
                gate: CvGate::Sigmoid,
            },
            EsfSchemeName::MixpoolCvSigmoid => EsfScheme::MixPoolCv {
                w,
                t: self.t,
                eps: self.eps,
                gate: CvGate::Sigmoid,
            },
        }
    }

    pub fn uses_pool_weights(&self) -> bool {
        matches!(
            self.scheme,
            EsfSchemeName::MixturePooling
                | EsfSchemeName::MixpoolCv
                | EsfSchemeName::MixpoolCvSigmoid
        )
    }

    /// Whether the scheme gates by the coefficient of variation, which is
    /// undefined for a single section.
    pub fn uses_cv(&self) -> bool {
        !matches!(
            self.scheme,
            EsfSchemeName::Sum | EsfSchemeName::MixturePooling
        )
    }
}

/// The `ssm` config block: per-head sequence-block dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsmSettings {
    /// State size N of each channel's diagonal system.
    #[serde(default = "default_state_dim")]
    pub state_dim: usize,
    /// Inner width multiplier: the block widens S channels to expansion * S.
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    /// Tap count of the depthwise causal convolution.
    #[serde(default = "default_conv_width")]
    pub conv_width: usize,
    /// Whether the convolution stage runs at all.
    #[serde(default = "default_conv_on")]
    pub conv_on: bool,
}

impl Default for SsmSettings {
    fn default() -> Self {
        SsmSettings {
            state_dim: default_state_dim(),
            expansion: default_expansion(),
            conv_width: default_conv_width(),
            conv_on: default_conv_on(),
        }
    }
}

/// Full module configuration. Grid extents are not part of the config; they
/// arrive with each input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MhsConfig {
    /// Input and output channel count.
    pub c_l: usize,
    /// Number of scan heads.
    pub n_heads: usize,
    /// Subspace width S of each head.
    pub subspace_dim: usize,
    /// Routes per head (1 to 4 starting corners).
    #[serde(default = "default_k_routes")]
    pub k_routes: usize,
    /// One pattern per head. May be omitted for 3 heads (snake, diagonal,
    /// spiral) and 4 heads (all four patterns).
    #[serde(default)]
    pub patterns: Option<Vec<ScanPattern>>,
    #[serde(default)]
    pub esf: EsfSettings,
    /// Whether the concatenated heads are projected back to `c_l`. May only
    /// be disabled when n_heads * subspace_dim == c_l.
    #[serde(default = "default_tail")]
    pub tail_projection: bool,
    #[serde(default)]
    pub ssm: SsmSettings,
    /// Weight-initialization seed.
    #[serde(default)]
    pub seed: u64,
}

fn default_t() -> f64 {
    0.5
}

fn default_eps() -> f64 {
    1e-6
}

fn default_w() -> [f64; 2] {
    [0.5, 0.5]
}

fn default_state_dim() -> usize {
    16
}

fn default_expansion() -> usize {
    2
}

fn default_conv_width() -> usize {
    3
}

fn default_conv_on() -> bool {
    true
}

fn default_k_routes() -> usize {
    4
}

fn default_tail() -> bool {
    true
}

impl Default for MhsConfig {
    fn default() -> Self {
        MhsConfig {
            c_l: 96,
            n_heads: 3,
            subspace_dim: 32,
            k_routes: 4,
            patterns: None,
            esf: EsfSettings::default(),
            tail_projection: true,
            ssm: SsmSettings::default(),
            seed: 0,
        }
    }
}

impl MhsConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: MhsConfig = serde_json::from_str(text)
            .map_err(|e| Error::Validation(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Inner width of each head's sequence block.
    pub fn inner_dim(&self) -> usize {
        self.ssm.expansion * self.subspace_dim
    }

    /// Channel count after head concatenation.
    pub fn fused_channels(&self) -> usize {
        self.n_heads * self.subspace_dim
    }

    /// The pattern of each head, applying the documented defaults when the
    /// `patterns` key is omitted.
    pub fn pattern_assignment(&self) -> Result<Vec<ScanPattern>> {
        if let Some(patterns) = &self.patterns {
            if patterns.len() != self.n_heads {
                return Err(Error::Validation(format!(
                    "patterns lists {} entries for {} heads",
                    patterns.len(),
                    self.n_heads
                )));
            }
            return Ok(patterns.clone());
        }
        match self.n_heads {
            3 => Ok(vec![
                ScanPattern::Snake,
                ScanPattern::Diagonal,
                ScanPattern::Spiral,
            ]),
            4 => Ok(ScanPattern::ALL.to_vec()),
            n => Err(Error::Validation(format!(
                "no default pattern assignment for {n} heads; set the patterns key"
            ))),
        }
    }

    /// Check every structural constraint, reporting all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        if self.c_l == 0 {
            problems.push("c_l must be positive".into());
        }
        if self.n_heads == 0 {
            problems.push("n_heads must be positive".into());
        }
        if self.subspace_dim == 0 {
            problems.push("subspace_dim must be positive".into());
        }
        if !(1..=4).contains(&self.k_routes) {
            problems.push(format!("k_routes must be 1..=4, got {}", self.k_routes));
        }
        if self.k_routes < 2 && self.esf.uses_cv() {
            problems.push(format!(
                "esf scheme {:?} needs route variation (k_routes >= 2), got k_routes = {}",
                self.esf.scheme, self.k_routes
            ));
        }
        if !self.tail_projection && self.fused_channels() != self.c_l {
            problems.push(format!(
                "tail_projection may only be disabled when n_heads * subspace_dim == c_l \
                 ({} * {} != {})",
                self.n_heads, self.subspace_dim, self.c_l
            ));
        }
        if let Err(e) = self.pattern_assignment() {
            problems.push(e.to_string());
        }
        if self.esf.t < 0.0 {
            problems.push(format!("esf.t must be >= 0, got {}", self.esf.t));
        }
        if self.esf.eps <= 0.0 {
            problems.push(format!("esf.eps must be > 0, got {}", self.esf.eps));
        }
        if self.ssm.state_dim == 0 {
            problems.push("ssm.state_dim must be positive".into());
        }
        if self.ssm.expansion == 0 {
            problems.push("ssm.expansion must be positive".into());
        }
        if self.ssm.conv_on && self.ssm.conv_width == 0 {
            problems.push("ssm.conv_width must be positive when ssm.conv_on".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }
}
