//! Stage one (transform codec) and stage two (tiled generative refinement).

use hfd_core::codec::{self, Bitstream, CodecConfig, ResidualEnergyMap, ENERGY_MAX};
use hfd_core::denoise::{LossKind, TinyCondNet};
use hfd_core::diffusion::Sampler;
use hfd_core::exec::Executor;
use hfd_core::rectflow::DEFAULT_AMPLITUDE;
use hfd_core::tiler::{plan, run_tiled, run_tiled_flow, TileLayout, TiledSampler, PATCH_SIZE};
use hfd_core::{Dims, ImageBuffer, NoiseSchedule, SeededStream};

use crate::config::{Method, RunConfig};
use crate::error::Result;

pub fn compress(img: &ImageBuffer, cfg: &CodecConfig, hfd_plus: bool) -> Result<Bitstream> {
    Ok(if hfd_plus {
        codec::encode_with_energy(img, cfg)?
    } else {
        codec::encode(img, cfg)?
    })
}

/// Stage-one reconstruction clamped to `[0, 1]`.
pub fn stage_one(bs: &Bitstream) -> Result<ImageBuffer> {
    Ok(codec::decode(bs)?.clamped())
}

/// Residual energy as a single planar channel scaled to `[0, 1]`.
pub fn energy_channel(map: &ResidualEnergyMap, height: usize, width: usize) -> Vec<f64> {
    map.upsample(height, width).into_iter().map(|v| v / ENERGY_MAX).collect()
}

/// Network context for a planar stage-one image in `[0, 1]`: the image in
/// the model's data domain, followed by the energy channel if any.
pub fn context(kind: LossKind, x_mse: &[f64], energy: Option<&[f64]>) -> Vec<f64> {
    let mut ctx: Vec<f64> = match kind {
        LossKind::Diffusion => x_mse.iter().map(|v| 2.0 * v - 1.0).collect(),
        LossKind::RectFlow => x_mse.to_vec(),
    };
    if let Some(e) = energy {
        ctx.extend_from_slice(e);
    }
    ctx
}

/// Training and sampling targets live in `[-1, 1]` for diffusion and in
/// pixel units for rectified flow.
pub fn to_data_domain(kind: LossKind, x: &[f64]) -> Vec<f64> {
    match kind {
        LossKind::Diffusion => x.iter().map(|v| 2.0 * v - 1.0).collect(),
        LossKind::RectFlow => x.to_vec(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineSettings {
    pub method: Method,
    pub steps: usize,
    pub stages: usize,
    pub gamma: f64,
    pub sched: NoiseSchedule,
    pub seed: u64,
    pub rf_amplitude: f64,
}

impl RefineSettings {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            method: cfg.method,
            steps: cfg.steps,
            stages: cfg.stages,
            gamma: cfg.gamma,
            sched: cfg.schedule()?,
            seed: cfg.seed,
            rf_amplitude: cfg.rf_amplitude,
        })
    }
}

impl Default for RefineSettings {
    fn default() -> Self {
        Self {
            method: Method::Ddpm,
            steps: 250,
            stages: 6,
            gamma: 0.1,
            sched: NoiseSchedule::default(),
            seed: 0,
            rf_amplitude: DEFAULT_AMPLITUDE,
        }
    }
}

/// Replicates the last row/column of a planar field up to `(h2, w2)`.
fn pad_planar(v: &[f64], channels: usize, (h, w): (usize, usize), (h2, w2): (usize, usize)) -> Vec<f64> {
    let mut out = Vec::with_capacity(channels * h2 * w2);
    for c in 0..channels {
        for y in 0..h2 {
            let row = &v[c * h * w + y.min(h - 1) * w..][..w];
            out.extend((0..w2).map(|x| row[x.min(w - 1)]));
        }
    }
    out
}

fn crop_planar(v: &[f64], channels: usize, (h2, w2): (usize, usize), (h, w): (usize, usize)) -> Vec<f64> {
    let mut out = Vec::with_capacity(channels * h * w);
    for c in 0..channels {
        for y in 0..h {
            out.extend_from_slice(&v[c * h2 * w2 + y * w2..][..w]);
        }
    }
    out
}

/// Refines a stage-one image. Images of at least one window in both
/// dimensions are tiled; smaller ones run as a single window, padded to the
/// network's downsampling factor.
pub fn refine<E: Executor>(
    net: &TinyCondNet,
    x_mse: &ImageBuffer,
    energy: Option<&[f64]>,
    settings: &RefineSettings,
    exec: &E,
) -> Result<ImageBuffer> {
    let dims = x_mse.dims();
    let (h, w) = (dims.height, dims.width);
    let kind = settings.method.loss_kind();
    let x = x_mse.to_planar();
    let (layout, (h2, w2)) = if h >= PATCH_SIZE && w >= PATCH_SIZE {
        (plan(w, h)?, (h, w))
    } else {
        let f = net.config().downsample_factor();
        let padded = (h.div_ceil(f) * f, w.div_ceil(f) * f);
        (TileLayout::single(padded.1, padded.0)?, padded)
    };
    let pdims = Dims::new(dims.channels, h2, w2);
    let x = pad_planar(&x, dims.channels, (h, w), (h2, w2));
    let energy = energy.map(|e| pad_planar(e, 1, (h, w), (h2, w2)));
    let stream = SeededStream::new(settings.seed);
    let out = match kind {
        LossKind::Diffusion => {
            let ctx = context(kind, &x, energy.as_deref());
            let sampler = match settings.method {
                Method::Ddim => Sampler::Ddim,
                _ => Sampler::Ddpm { gamma: settings.gamma },
            };
            let cfg = TiledSampler {
                steps: settings.steps,
                stages: settings.stages,
                sampler,
                sched: settings.sched,
            };
            let z = run_tiled(net, &layout, pdims, &ctx, &cfg, &stream, exec, Some((-1.0, 1.0)))?;
            z.iter().map(|v| (v + 1.0) / 2.0).collect()
        }
        LossKind::RectFlow => {
            let extra = energy.unwrap_or_default();
            run_tiled_flow(net, &layout, pdims, &x, &extra, settings.steps, settings.stages, settings.rf_amplitude, &stream, exec)?
        }
    };
    let out = crop_planar(&out, dims.channels, (h2, w2), (h, w));
    Ok(ImageBuffer::from_planar(dims, &out)?)
}

/// Full decoder: stage one, then refinement with the bitstream's energy
/// map if present and the model expects one.
pub fn decompress<E: Executor>(bs: &Bitstream, net: &TinyCondNet, settings: &RefineSettings, exec: &E) -> Result<ImageBuffer> {
    let x_mse = stage_one(bs)?;
    let energy = match bs.residual_energy()? {
        Some(m) if net.config().context_channels > x_mse.channels() => Some(energy_channel(&m, x_mse.height(), x_mse.width())),
        _ => None,
    };
    refine(net, &x_mse, energy.as_deref(), settings, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hfd_core::denoise::NetConfig;
    use hfd_core::exec::Sequential;

    #[test]
    fn pad_then_crop_is_identity() {
        let v: Vec<f64> = (0..2 * 3 * 5).map(|i| i as f64).collect();
        let p = pad_planar(&v, 2, (3, 5), (4, 8));
        assert_eq!(p.len(), 2 * 32);
        assert_eq!(p[7], 4.0);
        assert_eq!(crop_planar(&p, 2, (4, 8), (3, 5)), v);
    }

    #[test]
    fn small_images_refine_as_one_window() {
        let img = crate::synth::synthetic_image(30, 22, 1);
        let bs = compress(&img, &CodecConfig::default(), false).unwrap();
        let x_mse = stage_one(&bs).unwrap();
        let mut cfg = NetConfig::gradcheck(3, 3);
        cfg.zero_init_output = true;
        let net = TinyCondNet::new(cfg, &SeededStream::new(1)).unwrap();
        let s = RefineSettings {
            method: Method::Rectflow,
            steps: 4,
            stages: 2,
            rf_amplitude: 0.0,
            ..RefineSettings::default()
        };
        // A zero velocity field leaves the stage-one image untouched.
        let out = refine(&net, &x_mse, None, &s, &Sequential).unwrap();
        assert_eq!(out, x_mse);
        let d = RefineSettings {
            method: Method::Ddim,
            steps: 3,
            stages: 1,
            ..RefineSettings::default()
        };
        let out = refine(&net, &x_mse, None, &d, &Sequential).unwrap();
        assert_eq!(out.dims(), x_mse.dims());
    }
}
