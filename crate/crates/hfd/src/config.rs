//! Run configuration: a flat TOML table, every key optional, unknown keys
//! rejected. Command-line flags override file values.

use std::path::Path;

use hfd_core::codec::CodecConfig;
use hfd_core::denoise::{LossKind, NetConfig, TimeInput, TrainConfig};
use hfd_core::diffusion::Sampler;
use hfd_core::NoiseSchedule;
use serde::{Deserialize, Serialize};

use crate::error::{io_at, HfdError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ddpm,
    Ddim,
    Rectflow,
}

impl Method {
    pub fn loss_kind(self) -> LossKind {
        match self {
            Method::Rectflow => LossKind::RectFlow,
            _ => LossKind::Diffusion,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetProfile {
    Desk,
    Demo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    // Stage one.
    pub downsample: usize,
    pub delta: f64,
    pub hfd_plus: bool,
    // Schedule.
    pub eta: f64,
    pub logsnr_min: f64,
    pub logsnr_max: f64,
    // Sampling.
    pub method: Method,
    pub steps: usize,
    pub gamma: f64,
    pub stages: usize,
    pub checkpoint: Option<String>,
    // Training.
    pub net: NetProfile,
    pub attention: bool,
    pub train_steps: u64,
    pub lr: f64,
    pub warmup: u64,
    pub halflife: f64,
    pub ema: f64,
    pub batch: usize,
    pub crop: usize,
    pub border: usize,
    pub rf_amplitude: f64,
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let c = CodecConfig::default();
        Self {
            seed: 0,
            downsample: c.downsample,
            delta: c.delta,
            hfd_plus: false,
            eta: 0.5,
            logsnr_min: -15.0,
            logsnr_max: 15.0,
            method: Method::Ddpm,
            steps: 250,
            gamma: 0.1,
            stages: 6,
            checkpoint: None,
            net: NetProfile::Desk,
            attention: true,
            train_steps: 2000,
            lr: t.lr,
            warmup: t.warmup,
            halflife: t.halflife,
            ema: t.ema,
            batch: t.batch,
            crop: 128,
            border: 16,
            rf_amplitude: t.rf_amplitude,
            log_every: 50,
        }
    }
}

fn cfg_err(e: impl std::fmt::Display) -> HfdError {
    HfdError::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(cfg_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Checks every field; called before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.codec().validate().map_err(cfg_err)?;
        self.schedule()?;
        self.sampler().validate().map_err(cfg_err)?;
        self.train_config().validate().map_err(cfg_err)?;
        if self.steps == 0 {
            return Err(cfg_err("steps must be positive"));
        }
        if self.stages == 0 || self.stages > self.steps {
            return Err(cfg_err("stages must be in 1..=steps"));
        }
        if self.crop == 0 || !self.crop.is_multiple_of(8) {
            return Err(cfg_err("crop must be a positive multiple of 8"));
        }
        if self.train_steps == 0 || self.log_every == 0 {
            return Err(cfg_err("train_steps and log_every must be positive"));
        }
        Ok(())
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            downsample: self.downsample,
            delta: self.delta,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::with_bounds(self.eta, self.logsnr_min, self.logsnr_max).map_err(cfg_err)
    }

    /// Diffusion sampler; meaningless for rectified flow.
    pub fn sampler(&self) -> Sampler {
        match self.method {
            Method::Ddim => Sampler::Ddim,
            _ => Sampler::Ddpm { gamma: self.gamma },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            warmup: self.warmup,
            halflife: self.halflife,
            ema: self.ema,
            batch: self.batch,
            sched: NoiseSchedule::with_bounds(self.eta, self.logsnr_min, self.logsnr_max).unwrap_or_default(),
            rf_amplitude: self.rf_amplitude,
            ..TrainConfig::default()
        }
    }

    /// Network for `channels` image channels; the context holds the
    /// stage-one image plus one residual-energy channel under HFD+.
    pub fn net_config(&self, channels: usize) -> Result<NetConfig> {
        let ctx = channels + self.hfd_plus as usize;
        let mut net = match self.net {
            NetProfile::Desk => NetConfig::desk(channels, ctx),
            NetProfile::Demo => NetConfig::demo(channels, ctx),
        };
        net.attention = self.attention;
        net.time_input = match self.method.loss_kind() {
            LossKind::Diffusion => TimeInput::LogSnr(self.schedule()?),
            LossKind::RectFlow => TimeInput::Linear,
        };
        net.validate().map_err(cfg_err)?;
        Ok(net)
    }
}
