//! Model, PEFT and run configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Float mode for parameters and computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[derive(Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}


/// Acoustic model dimensions. Defaults are desk-scale: CPU-trainable in
/// minutes while exercising every code path.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Odd kernel width of the convolutional feed-forward blocks.
    pub conv_kernel: usize,
    pub mel_dim: usize,
    pub d_spk: usize,
    pub max_frames: usize,
    pub precision: Precision,
    /// Hidden width of the feed-forward convolutions.
    pub d_ff: usize,
    /// Style-token count of the reference encoder.
    pub gst_tokens: usize,
    /// Attention heads over the style tokens.
    pub gst_heads: usize,
    /// Channel width of the reference-encoder convolutions.
    pub gst_channels: usize,
    /// Shared projection width of the aligner branches.
    pub aligner_dim: usize,
    /// Layer-norm epsilon.
    pub ln_eps: f64,
    /// Beta-binomial prior sharpness.
    pub prior_omega: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 40,
            d_model: 64,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            conv_kernel: 3,
            mel_dim: 20,
            d_spk: 64,
            max_frames: 512,
            precision: Precision::F32,
            d_ff: 64,
            gst_tokens: 8,
            gst_heads: 2,
            gst_channels: 32,
            aligner_dim: 32,
            ln_eps: 1e-5,
            prior_omega: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_heads == 0
            || self.n_enc_layers == 0
            || self.n_dec_layers == 0
            || self.vocab_size == 0
            || self.d_spk == 0
            || self.max_frames == 0
            || self.d_ff == 0
            || self.gst_tokens == 0
            || self.gst_heads == 0
            || self.gst_channels == 0
            || self.aligner_dim == 0
        {
            return Err(Error::Config("all counts must be >= 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_spk.is_multiple_of(self.gst_heads) {
            return Err(Error::Config(format!(
                "d_spk {} not divisible by gst_heads {}",
                self.d_spk, self.gst_heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        if self.mel_dim < 2 {
            return Err(Error::Config(format!(
                "mel_dim must be >= 2, got {}",
                self.mel_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which parameter subset an adaptation run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[derive(Default)]
pub enum Strategy {
    #[default]
    None,
    Adapter,
    Lora,
    Prefix,
    Bitfit,
    Full,
}


impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Strategy::None),
            "adapter" => Ok(Strategy::Adapter),
            "lora" => Ok(Strategy::Lora),
            "prefix" => Ok(Strategy::Prefix),
            "bitfit" => Ok(Strategy::Bitfit),
            "full" => Ok(Strategy::Full),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::None => "none",
            Strategy::Adapter => "adapter",
            Strategy::Lora => "lora",
            Strategy::Prefix => "prefix",
            Strategy::Bitfit => "bitfit",
            Strategy::Full => "full",
        };
        f.write_str(s)
    }
}

/// Parameter-efficient tuning configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeftConfig {
    pub strategy: Strategy,
    /// Adapter bottleneck width.
    pub adapter_bottleneck: usize,
    pub adapter_dropout: f64,
    /// Internal layer norm in front of the adapter bottleneck.
    pub adapter_layernorm: bool,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// Also target the value projection (the default targets query and key).
    pub lora_include_value: bool,
    pub prefix_len: usize,
    /// Place adapters after the predictor conv blocks.
    pub adapt_predictors: bool,
    /// Place adapters after the aligner conv branches.
    pub adapt_aligner: bool,
    /// Train the mixing logits over the pretrained speaker table.
    pub train_mix_weights: bool,
    /// Unfreeze the conditional layer-norm projections.
    pub train_cln: bool,
}

impl Default for PeftConfig {
    fn default() -> Self {
        PeftConfig {
            strategy: Strategy::None,
            adapter_bottleneck: 8,
            adapter_dropout: 0.1,
            adapter_layernorm: true,
            lora_rank: 4,
            lora_scale: 8.0,
            lora_include_value: false,
            prefix_len: 4,
            adapt_predictors: true,
            adapt_aligner: true,
            train_mix_weights: true,
            train_cln: false,
        }
    }
}

impl PeftConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        PeftConfig {
            strategy,
            ..PeftConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::Adapter if self.adapter_bottleneck == 0 => {
                Err(Error::Config("adapter_bottleneck must be >= 1".into()))
            }
            Strategy::Lora if self.lora_rank == 0 => {
                Err(Error::Config("lora_rank must be >= 1".into()))
            }
            Strategy::Prefix if self.prefix_len == 0 => {
                Err(Error::Config("prefix_len must be >= 1".into()))
            }
            _ => {
                if !(0.0..1.0).contains(&self.adapter_dropout) {
                    return Err(Error::Config("adapter_dropout must be in [0, 1)".into()));
                }
                Ok(())
            }
        }
    }
}

/// Loss term weights: mel MSE + α·pitch + β·duration + γ·alignment.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Train the aligner with the forward-sum loss.
    pub align_loss: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            align_loss: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Keep the forward-sum loss active during adaptation.
    pub align_loss: bool,
    /// Use Viterbi durations from the aligner instead of corpus durations.
    pub viterbi_durations: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            steps: 1500,
            batch_size: 8,
            lr: 2e-4,
            align_loss: false,
            viterbi_durations: false,
        }
    }
}

/// Top-level run configuration mirrored by the CLI `--config` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub peft: PeftConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.peft.validate()
    }

    pub fn from_json(json: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
