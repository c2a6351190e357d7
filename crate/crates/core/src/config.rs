//! Hyperparameters. Every default here is this implementation's choice; none is
//! prescribed by the method itself.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffengine::AdamConfig;
use crate::encoder::AttentionDims;
use crate::error::{Error, Result};
use crate::maskext::{SparsityPrior, TemperatureSchedule};
use crate::signal::{AmplitudeKind, Band, NodeFeatureKind, SequenceOptions, WindowingSpec};

/// Table-style ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Edge logits from one learned bias instead of endpoint embeddings.
    Cwise,
    /// No Laplacian positional encoding.
    Pe,
    /// No sparsity regularizer (KL weight 0).
    Sr,
    /// Raw windowed samples as node features instead of spectra.
    Fft,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Cwise, Ablation::Pe, Ablation::Sr, Ablation::Fft];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Cwise => "cwise",
            Ablation::Pe => "pe",
            Ablation::Sr => "sr",
            Ablation::Fft => "fft",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown ablation switch '{s}' (cwise|pe|sr|fft)")))
    }
}

/// Which pipeline stages are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub cwise: bool,
    pub pe: bool,
    pub sr: bool,
    pub fft: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Switches {
            cwise: true,
            pe: true,
            sr: true,
            fft: true,
        }
    }
}

impl Switches {
    pub fn disable(&mut self, a: Ablation) {
        match a {
            Ablation::Cwise => self.cwise = false,
            Ablation::Pe => self.pe = false,
            Ablation::Sr => self.sr = false,
            Ablation::Fft => self.fft = false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Attention model width D.
    pub model_dim: usize,
    pub heads: usize,
    pub d_pe: usize,
    pub gat_layers: usize,
    pub gat_hidden: usize,
    pub retention: f64,
    pub kl_epsilon: f64,
    pub lambda_kl: f64,
    pub tau_start: f64,
    pub tau_min: f64,
    pub tau_decay: f64,
    /// Temperature of the deterministic evaluation mask.
    pub eval_tau: f64,
    pub zero_threshold: f64,
    /// Export-only pruning of gated edges; never affects the loss.
    pub eval_threshold: f64,
    pub window_seconds: f64,
    pub stride_seconds: f64,
    pub band: Band,
    pub amplitude: AmplitudeKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub switches: Switches,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            model_dim: 32,
            heads: 4,
            d_pe: 4,
            gat_layers: 2,
            gat_hidden: 32,
            retention: 0.15,
            kl_epsilon: 1e-8,
            lambda_kl: 1.0,
            tau_start: 5.0,
            tau_min: 0.5,
            tau_decay: 0.9,
            eval_tau: 1.0,
            zero_threshold: 1e-8,
            eval_threshold: 0.0,
            window_seconds: 1.0,
            stride_seconds: 0.5,
            band: Band::Broadband,
            amplitude: AmplitudeKind::Raw,
            learning_rate: 1e-3,
            epochs: 60,
            batch_size: 8,
            switches: Switches::default(),
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("gat_layers", self.gat_layers),
            ("gat_hidden", self.gat_hidden),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.switches.pe && self.d_pe == 0 {
            return Err(Error::Config("d_pe must be positive when positional encoding is on".into()));
        }
        self.prior().validate()?;
        self.schedule().validate()?;
        if !(self.eval_tau > 0.0) {
            return Err(Error::Config("eval_tau must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.window_seconds > 0.0 && self.stride_seconds > 0.0) {
            return Err(Error::Config("window and stride durations must be positive".into()));
        }
        if self.zero_threshold < 0.0 || self.eval_threshold < 0.0 {
            return Err(Error::Config("thresholds must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn with_ablation(&self, a: Ablation) -> ModelConfig {
        let mut c = self.clone();
        c.switches.disable(a);
        c
    }

    /// Positional-encoding width after ablation.
    pub fn effective_d_pe(&self) -> usize {
        if self.switches.pe {
            self.d_pe
        } else {
            0
        }
    }

    pub fn effective_lambda_kl(&self) -> f64 {
        if self.switches.sr {
            self.lambda_kl
        } else {
            0.0
        }
    }

    /// Node width entering the mask extractor and the first GAT layer.
    pub fn node_width(&self) -> usize {
        self.model_dim + self.effective_d_pe()
    }

    pub fn attention_dims(&self) -> Result<AttentionDims> {
        AttentionDims::new(self.model_dim, self.heads)
    }

    pub fn prior(&self) -> SparsityPrior {
        SparsityPrior {
            retention: self.retention,
            epsilon: self.kl_epsilon,
            weight: self.effective_lambda_kl(),
        }
    }

    pub fn schedule(&self) -> TemperatureSchedule {
        TemperatureSchedule {
            start: self.tau_start,
            min: self.tau_min,
            decay: self.tau_decay,
        }
    }


    pub fn windowing(&self, sample_rate_hz: f64) -> Result<WindowingSpec> {
        let window = (self.window_seconds * sample_rate_hz).round() as usize;
        let stride = ((self.stride_seconds * sample_rate_hz).round() as usize).max(1);
        WindowingSpec::new(window, stride)
    }

    pub fn sequence_options(&self) -> SequenceOptions {
        SequenceOptions {
            node_features: if self.switches.fft {
                NodeFeatureKind::Spectral
            } else {
                NodeFeatureKind::RawSamples
            },
            amplitude: self.amplitude,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}
