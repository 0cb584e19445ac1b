//! Training data and the training loop.
//!
//! Every image goes through the stage-one codec once; training examples are
//! random crops of (original, reconstruction[, energy]) taken away from the
//! image border, where the codec's boundary artefacts would otherwise be
//! over-represented.

use std::path::Path;

use hfd_core::codec::CodecConfig;
use hfd_core::denoise::train::Batch;
use hfd_core::denoise::{LossKind, NetConfig, TinyCondNet, TrainConfig, TrainState};
use hfd_core::exec::Executor;
use hfd_core::{Dims, ImageBuffer, SeededStream};

use crate::error::{io_at, HfdError, Result};
use crate::imageio::load_image;
use crate::pipeline::{compress, context, energy_channel, stage_one, to_data_domain};

pub struct Example {
    pub x: Vec<f64>,
    pub x_mse: Vec<f64>,
    pub energy: Option<Vec<f64>>,
    pub height: usize,
    pub width: usize,
}

pub struct Dataset {
    pub channels: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn from_images(images: &[ImageBuffer], codec: &CodecConfig, hfd_plus: bool) -> Result<Self> {
        let channels = images.first().ok_or_else(|| HfdError::Data("empty dataset".into()))?.channels();
        let mut examples = Vec::with_capacity(images.len());
        for img in images {
            if img.channels() != channels {
                return Err(HfdError::Data("images differ in channel count".into()));
            }
            let bs = compress(img, codec, hfd_plus)?;
            let x_mse = stage_one(&bs)?;
            let energy = bs.residual_energy()?.map(|m| energy_channel(&m, img.height(), img.width()));
            examples.push(Example {
                x: img.to_planar(),
                x_mse: x_mse.to_planar(),
                energy,
                height: img.height(),
                width: img.width(),
            });
        }
        Ok(Self { channels, examples })
    }

    /// All PNG/PPM/PGM files in `dir`, in file-name order.
    pub fn load_dir(dir: &Path, codec: &CodecConfig, hfd_plus: bool) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io_at(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                    Some("png" | "ppm" | "pgm")
                )
            })
            .collect();
        paths.sort();
        let images = paths.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
        Self::from_images(&images, codec, hfd_plus)
    }

    /// A batch of `n` random crops for `kind`. Crop positions keep `border`
    /// pixels away from every image edge.
    pub fn batch(&self, kind: LossKind, crop: usize, border: usize, n: usize, stream: &SeededStream) -> Result<Batch> {
        let c = self.channels;
        let (mut xs, mut ctxs) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for j in 0..n as u64 {
            let r = stream.substream(j);
            let ex = &self.examples[(r.u64_at(0) % self.examples.len() as u64) as usize];
            let span = |len: usize| -> Result<usize> {
                len.checked_sub(crop + 2 * border)
                    .map(|s| s + 1)
                    .ok_or_else(|| HfdError::Data("image smaller than crop plus border".into()))
            };
            let y0 = border + (r.u64_at(1) % span(ex.height)? as u64) as usize;
            let x0 = border + (r.u64_at(2) % span(ex.width)? as u64) as usize;
            let cut = |v: &[f64], ch: usize| -> Vec<f64> {
                let mut out = Vec::with_capacity(ch * crop * crop);
                for k in 0..ch {
                    for y in y0..y0 + crop {
                        out.extend_from_slice(&v[k * ex.height * ex.width + y * ex.width + x0..][..crop]);
                    }
                }
                out
            };
            let e = ex.energy.as_ref().map(|e| cut(e, 1));
            xs.push(to_data_domain(kind, &cut(&ex.x, c)));
            ctxs.push(context(kind, &cut(&ex.x_mse, c), e.as_deref()));
        }
        Ok(Batch::new(Dims::new(c, crop, crop), xs, ctxs)?)
    }
}

pub struct TrainJob<'a> {
    pub kind: LossKind,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub crop: usize,
    pub border: usize,
    pub seed: u64,
    pub dataset: &'a Dataset,
}

impl TrainJob<'_> {
    /// Fresh optimizer state with weights drawn from the seed.
    pub fn init_state(&self) -> Result<TrainState> {
        let net = TinyCondNet::new(self.net.clone(), &SeededStream::new(self.seed).substream(0))?;
        Ok(TrainState::new(net.into_params(), self.train.clone())?)
    }

    /// Advances `state` to step `until`. Step `k` draws its batch and its
    /// loss noise from substreams of `(seed, 1, k)`, so a resumed run
    /// matches an uninterrupted one exactly.
    pub fn run<E: Executor>(&self, state: &mut TrainState, until: u64, exec: &E, mut log: impl FnMut(u64, f64, f64)) -> Result<()> {
        let net = TinyCondNet::new(self.net.clone(), &SeededStream::new(0))?;
        let root = SeededStream::new(self.seed).substream(1);
        while state.step < until {
            let s = root.substream(state.step);
            let batch = self.dataset.batch(self.kind, self.crop, self.border, self.train.batch, &s.substream(0))?;
            let lr = self.train.effective_lr(state.step + 1);
            let loss = state.train_step(&net, &batch, self.kind, &s.substream(1), exec)?;
            log(state.step, loss, lr);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_image;
    use hfd_core::exec::Sequential;

    fn tiny() -> (Dataset, NetConfig) {
        let imgs: Vec<ImageBuffer> = (0..2).map(|i| synthetic_image(40, 48, i)).collect();
        let ds = Dataset::from_images(&imgs, &CodecConfig::default(), true).unwrap();
        (ds, NetConfig::gradcheck(3, 4))
    }

    #[test]
    fn crops_respect_border_and_shape() {
        let (ds, _) = tiny();
        let b = ds.batch(LossKind::Diffusion, 16, 8, 5, &SeededStream::new(1)).unwrap();
        assert_eq!(b.len(), 5);
        assert_eq!(b.context[0].len(), 4 * 256);
        assert!(b.x[0].iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(ds.batch(LossKind::RectFlow, 32, 8, 1, &SeededStream::new(1)).is_err());
        assert!(Dataset::from_images(&[], &CodecConfig::default(), false).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (ds, net) = tiny();
        let job = TrainJob {
            kind: LossKind::RectFlow,
            net,
            train: TrainConfig {
                batch: 2,
                warmup: 2,
                ..TrainConfig::default()
            },
            crop: 16,
            border: 4,
            seed: 9,
            dataset: &ds,
        };
        let mut a = job.init_state().unwrap();
        job.run(&mut a, 6, &Sequential, |_, _, _| {}).unwrap();
        let mut b = job.init_state().unwrap();
        job.run(&mut b, 3, &Sequential, |_, _, _| {}).unwrap();
        let ck = crate::checkpoint::Checkpoint::from_state(job.kind, job.net.clone(), &b, true);
        let mut b = crate::checkpoint::Checkpoint::from_bytes(&ck.to_bytes()).unwrap().resume_state().unwrap();
        assert_eq!(b.step, 3);
        job.run(&mut b, 6, &Sequential, |_, _, _| {}).unwrap();
        assert_eq!(a, b);
    }
}
