//! Paired rectified flow from the stage-one reconstruction to the image.
//!
//! Works in the pixel domain `[0, 1]`. Time runs from the source
//! (`t = 0`, the dequantized reconstruction) to the target (`t = 1`).

use alloc::vec::Vec;

use crate::denoise::VelocityField;
use crate::error::{check_len, invalid, Error, Result};
use crate::image::Dims;
use crate::rng::SeededStream;

pub const DEFAULT_AMPLITUDE: f64 = 1.0 / 255.0;

/// A dequantized training pair and its straight-line velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPair {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowPair {
    pub fn new(x: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        check_len(x.len(), z.len())?;
        let v = x.iter().zip(&z).map(|(a, b)| a - b).collect();
        Ok(Self { x, z, v })
    }

    /// `t x + (1 - t) z`.
    pub fn interpolate(&self, t: f64) -> Vec<f64> {
        self.x.iter().zip(&self.z).map(|(x, z)| t * x + (1.0 - t) * z).collect()
    }
}

/// Adds `U(-amplitude/2, amplitude/2)` noise per element.
pub fn rf_dequantize(img: &[f64], amplitude: f64, stream: &SeededStream) -> Result<Vec<f64>> {
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(invalid("dequantization amplitude must be finite and >= 0"));
    }
    Ok(img
        .iter()
        .enumerate()
        .map(|(i, &p)| p + amplitude * (stream.uniform_at(i as u64) - 0.5))
        .collect())
}

/// `t = 1 - u^2` for `u ~ U(0, 1)`.
pub fn rf_time_from_uniform(u: f64) -> f64 {
    1.0 - u * u
}

pub fn rf_time_sample(stream: &SeededStream) -> f64 {
    rf_time_from_uniform(stream.uniform_at(0))
}

/// Dequantizes both ends of a pair with independent noise.
pub fn rf_pair(x: &[f64], x_mse: &[f64], amplitude: f64, stream: &SeededStream) -> Result<FlowPair> {
    FlowPair::new(
        rf_dequantize(x, amplitude, &stream.substream(0))?,
        rf_dequantize(x_mse, amplitude, &stream.substream(1))?,
    )
}

/// Per-pair draw used by the loss and the trainer: time from substream 0.
pub(crate) fn rf_example_time(stream: &SeededStream, i: usize) -> f64 {
    rf_time_sample(&stream.substream(i as u64).substream(0))
}

/// Squared error and its gradient with respect to the model output.
pub(crate) fn rf_example_loss(v: &[f64], f: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = v
        .iter()
        .zip(f)
        .map(|(v, f)| {
            let r = f - v;
            loss += r * r;
            2.0 * r
        })
        .collect();
    (loss, grad)
}

/// Mean over pairs of `||v - f(t x + (1 - t) z, t, z)||^2`; the model
/// receives the source `z` as context.
pub fn rf_loss<M: VelocityField + ?Sized>(pairs: &[FlowPair], dims: Dims, model: &M, stream: &SeededStream) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("loss needs a nonempty batch"));
    }
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        check_len(dims.len(), p.x.len())?;
        let t = rf_example_time(stream, i);
        let y = p.interpolate(t);
        let f = model.velocity(&y, dims, t, &p.z)?;
        check_len(y.len(), f.len())?;
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model output"));
        }
        total += rf_example_loss(&p.v, &f).0;
    }
    Ok(total / pairs.len() as f64)
}

/// Euler integration from the dequantized reconstruction (`t = 0`) to
/// `t = 1`, clamped to `[0, 1]` at the end.
pub fn rf_sample<M: VelocityField + ?Sized>(
    model: &M,
    x_mse: &[f64],
    dims: Dims,
    steps: usize,
    amplitude: f64,
    stream: &SeededStream,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(invalid("rectified flow needs at least one step"));
    }
    check_len(dims.len(), x_mse.len())?;
    let y0 = rf_dequantize(x_mse, amplitude, &source_stream(stream))?;
    let mut y = y0.clone();
    let h = 1.0 / steps as f64;
    for k in 0..steps {
        let f = model.velocity(&y, dims, k as f64 * h, &y0)?;
        euler_update(&mut y, &f, h)?;
    }
    for v in &mut y {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(y)
}

/// Stream for the source dequantization noise of `rf_sample`.
pub fn source_stream(stream: &SeededStream) -> SeededStream {
    stream.substream(0)
}

pub(crate) fn euler_update(y: &mut [f64], f: &[f64], h: f64) -> Result<()> {
    check_len(y.len(), f.len())?;
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model output"));
    }
    for (y, f) in y.iter_mut().zip(f) {
        *y += h * f;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::{ConstantDenoiser, ConstantVelocity};
    use crate::math;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn dequantize_bounds_and_mean() {
        let s = SeededStream::new(1);
        let img = vec![0.5; 1_000_000];
        assert_eq!(rf_dequantize(&img, 0.0, &s).unwrap(), img);
        let d = rf_dequantize(&img, 1.0 / 255.0, &s).unwrap();
        assert!(d.iter().all(|v| (v - 0.5).abs() <= 1.0 / 510.0));
        let shift = d.iter().map(|v| v - 0.5).sum::<f64>() / d.len() as f64;
        assert!(shift.abs() < 1e-4, "{shift}");
        assert!(rf_dequantize(&img[..2], -1.0, &s).is_err());
    }

    #[test]
    fn time_sampler_law() {
        assert_eq!(rf_time_from_uniform(0.0), 1.0);
        assert_eq!(rf_time_from_uniform(1.0), 0.0);
        let n = 1_000_000;
        let root = SeededStream::new(9);
        let ts: Vec<f64> = (0..n).map(|i| rf_time_sample(&root.substream(i))).collect();
        let mean = ts.iter().sum::<f64>() / n as f64;
        assert!((mean - 2.0 / 3.0).abs() < 0.002, "{mean}");
        let above = ts.iter().filter(|&&t| t > 0.75).count() as f64 / n as f64;
        assert!((above - 0.5).abs() < 0.003, "{above}");
        // Chi-square against the CDF F(t) = 1 - sqrt(1 - t) on 20 bins.
        let bins = 20;
        let mut counts = vec![0usize; bins];
        for &t in &ts {
            counts[((t * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let cdf = |t: f64| 1.0 - math::sqrt(1.0 - t);
        let chi2: f64 = (0..bins)
            .map(|b| {
                let p = cdf((b + 1) as f64 / bins as f64) - cdf(b as f64 / bins as f64);
                let e = p * n as f64;
                (counts[b] as f64 - e).powi(2) / e
            })
            .sum();
        // 19 degrees of freedom; 0.1% critical value is about 43.8.
        assert!(chi2 < 43.8, "chi2 = {chi2}");
    }

    #[test]
    fn constant_velocity_is_exact_in_one_step() {
        let x = vec![0.9, 0.1, 0.4, 0.6];
        let z = vec![0.5, 0.3, 0.4, 0.2];
        let v: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a - b).collect();
        let m = ConstantVelocity { v };
        let dims = Dims::flat(4);
        let s = SeededStream::new(3);
        let one = rf_sample(&m, &z, dims, 1, 0.0, &s).unwrap();
        for (a, b) in one.iter().zip(&x) {
            assert!((a - b).abs() < 1e-15);
        }
        let many = rf_sample(&m, &z, dims, 100, 0.0, &s).unwrap();
        for (a, b) in one.iter().zip(&many) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn zero_model_returns_dequantized_source() {
        let z = vec![0.2, 0.7, 0.5];
        let s = SeededStream::new(8);
        let out = rf_sample(&ConstantDenoiser::zero(), &z, Dims::flat(3), 7, DEFAULT_AMPLITUDE, &s).unwrap();
        assert_eq!(out, rf_dequantize(&z, DEFAULT_AMPLITUDE, &source_stream(&s)).unwrap());
        assert!(rf_sample(&ConstantDenoiser::zero(), &z, Dims::flat(3), 0, 0.0, &s).is_err());
    }

    struct Oracle;
    impl VelocityField for Oracle {
        // Exact for pairs whose source is the context: v = (y - z) / t, and
        // at t = 0 the velocity of the only pair through z.
        fn velocity(&self, y: &[f64], _: Dims, t: f64, z: &[f64]) -> Result<Vec<f64>> {
            Ok(y.iter().zip(z).map(|(y, z)| if t > 0.0 { (y - z) / t } else { 0.25 }).collect())
        }
    }

    #[test]
    fn loss_is_zero_at_oracle_and_closed_form_for_constants() {
        let x = vec![0.25 + 0.1, 0.25 + 0.3];
        let z = vec![0.1, 0.3];
        let p = FlowPair::new(x, z.clone()).unwrap();
        let dims = Dims::flat(2);
        let s = SeededStream::new(2);
        let l = rf_loss(core::slice::from_ref(&p), dims, &Oracle, &s).unwrap();
        assert!(l < 1e-20, "{l}");
        let c = 0.1;
        let l = rf_loss(core::slice::from_ref(&p), dims, &ConstantDenoiser::new(c), &s).unwrap();
        let want: f64 = p.v.iter().map(|v| (v - c) * (v - c)).sum();
        assert!((l - want).abs() < 1e-15);
        // Identity codec: v = 0, zero model.
        let same = FlowPair::new(z.clone(), z).unwrap();
        assert_eq!(rf_loss(&[same], dims, &ConstantDenoiser::zero(), &s).unwrap(), 0.0);
        assert!(rf_loss(&[], dims, &Oracle, &s).is_err());
        assert!(rf_loss(&[p], dims, &ConstantDenoiser::new(f64::NAN), &s).is_err());
    }

    proptest! {
        #[test]
        fn oracle_trajectories_are_straight(steps in 1usize..40, seed in any::<u64>()) {
            let s = SeededStream::new(seed);
            let z = s.substream(1).uniforms(5);
            let x = s.substream(2).uniforms(5);
            let v: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a - b).collect();
            let out = rf_sample(&ConstantVelocity { v }, &z, Dims::flat(5), steps, 0.0, &s).unwrap();
            for (a, b) in out.iter().zip(&x) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn pair_velocity_is_difference(seed in any::<u64>()) {
            let s = SeededStream::new(seed);
            let p = rf_pair(&s.uniforms(6), &s.substream(5).uniforms(6), DEFAULT_AMPLITUDE, &s).unwrap();
            for i in 0..6 {
                prop_assert_eq!(p.v[i], p.x[i] - p.z[i]);
            }
        }
    }
}
