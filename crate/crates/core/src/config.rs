//! Run configuration: one JSON file drives every stage.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GenerateOptions;
use crate::diffusion::DenoiserConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub temporal_width: usize,
    pub heads: usize,
    pub depth: usize,
    pub unet_widths: [usize; 2],
    pub attn_width: usize,
    pub attn_heads: usize,
    pub time_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            temporal_width: 128,
            heads: 8,
            depth: 2,
            unet_widths: [16, 32],
            attn_width: 32,
            attn_heads: 4,
            time_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    /// Epochs fitting the full denoiser on text-anchor conditions before
    /// selective finetuning.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// SNR weighting exponent while fitting the base denoiser.
    pub pretrain_gamma: f64,
    pub pretrain_drop_prob: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub drop_prob: f64,
    /// SNR weighting exponent.
    pub gamma: f64,
    pub schedule_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            pretrain_epochs: 300,
            pretrain_lr: 1e-3,
            pretrain_gamma: 0.0,
            pretrain_drop_prob: 0.1,
            epochs: 300,
            batch_size: 32,
            lr: 1e-4,
            drop_prob: 0.1,
            gamma: 0.5,
            schedule_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    /// Chains drawn per conditioning window.
    pub per_item: usize,
    pub sweep: Vec<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 7.5,
            per_item: 2,
            sweep: vec![3.0, 5.0, 7.0, 9.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: GenerateOptions,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: AdamConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: GenerateOptions::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: AdamConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Replaces the run seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.data.channels,
            samples: self.data.samples,
            tokens: self.data.tokens,
            width: self.data.width,
            temporal_width: self.model.temporal_width,
            heads: self.model.heads,
            depth: self.model.depth,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent: self.data.latent,
            widths: self.model.unet_widths,
            attn_width: self.model.attn_width,
            heads: self.model.attn_heads,
            time_dim: self.model.time_dim,
            cond_tokens: self.data.tokens,
            cond_width: self.data.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder().validate()?;
        self.denoiser().validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.loss.contrastive > 0.0 && self.stage1.batch_size < 2 {
            return Err(Error::Config(
                "contrastive loss needs a batch size of at least 2".into(),
            ));
        }
        if self.stage1.batch_size < 2 || self.stage2.batch_size == 0 {
            return Err(Error::Config(
                "stage 1 batch size must be at least 2 (batch norm)".into(),
            ));
        }
        for p in [self.stage2.drop_prob, self.stage2.pretrain_drop_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "drop probability {p} outside [0, 1]"
                )));
            }
        }
        let lrs = [self.stage1.lr, self.stage2.lr, self.stage2.pretrain_lr];
        if lrs.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.stage2.schedule_steps {
            return Err(Error::Config(
                "sampler steps must lie in [1, schedule steps]".into(),
            ));
        }
        if self.sampler.per_item == 0 {
            return Err(Error::Config("sampler per_item must be positive".into()));
        }
        let scales = std::iter::once(&self.sampler.guidance).chain(&self.sampler.sweep);
        if scales.into_iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config(
                "guidance scales must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}
