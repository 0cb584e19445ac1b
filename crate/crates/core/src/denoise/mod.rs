//! Denoiser abstraction, analytic oracles, the tiny conditional network and
//! its trainer.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, invalid, Error, Result};
use crate::image::Dims;
use crate::math;
use crate::schedule::NoiseSchedule;

pub mod graph;
pub mod net;
pub mod train;

pub use graph::Tensor;
pub use net::{NetConfig, TimeInput, TinyCondNet};
pub use train::{LossKind, TrainConfig, TrainState};

/// A v-prediction model `f(z_t, t, context)`.
///
/// `z` is planar (`dims`), `context` is planar with the same spatial size
/// (any channel count, possibly empty). The output has the shape of `z`.
pub trait Denoiser {
    fn predict_v(&self, z: &[f64], dims: Dims, t: f64, context: &[f64]) -> Result<Vec<f64>>;
}

/// A velocity model for rectified flow, `f(y_t, t, context)`.
pub trait VelocityField {
    fn velocity(&self, y: &[f64], dims: Dims, t: f64, context: &[f64]) -> Result<Vec<f64>>;
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn predict_v(&self, z: &[f64], dims: Dims, t: f64, context: &[f64]) -> Result<Vec<f64>> {
        (**self).predict_v(z, dims, t, context)
    }
}

impl<T: VelocityField + ?Sized> VelocityField for &T {
    fn velocity(&self, y: &[f64], dims: Dims, t: f64, context: &[f64]) -> Result<Vec<f64>> {
        (**self).velocity(y, dims, t, context)
    }
}

/// Gaussian data prior `x ~ N(mean0, diag(var0))` with its exact posterior
/// mean as the denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOracleDenoiser {
    mean0: Vec<f64>,
    var0: Vec<f64>,
    sched: NoiseSchedule,
}

impl GaussianOracleDenoiser {
    /// `var0` may contain zeros (a point mass on that coordinate).
    pub fn new(mean0: Vec<f64>, var0: Vec<f64>) -> Result<Self> {
        check_len(mean0.len(), var0.len())?;
        if mean0.is_empty() {
            return Err(invalid("empty oracle prior"));
        }
        if mean0.iter().any(|m| !m.is_finite()) || var0.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("oracle prior must be finite with var0 >= 0"));
        }
        Ok(Self {
            mean0,
            var0,
            sched: NoiseSchedule::default(),
        })
    }

    pub fn isotropic(n: usize, mean: f64, var: f64) -> Result<Self> {
        Self::new(vec![mean; n], vec![var; n])
    }

    pub fn with_schedule(mut self, sched: NoiseSchedule) -> Self {
        self.sched = sched;
        self
    }

    pub fn mean0(&self) -> &[f64] {
        &self.mean0
    }

    pub fn var0(&self) -> &[f64] {
        &self.var0
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// `E[x | z_t]` per coordinate.
    pub fn posterior_mean(&self, z: &[f64], t: f64, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        check_len(self.mean0.len(), z.len())?;
        let (a, s) = sched.alpha_sigma(t);
        Ok(z.iter()
            .zip(self.mean0.iter().zip(&self.var0))
            .map(|(&z, (&m, &v))| (a * v * z + s * s * m) / (a * a * v + s * s))
            .collect())
    }
}

/// Closed-form v-prediction of the Gaussian oracle under `sched`.
pub fn oracle_predict_v(den: &GaussianOracleDenoiser, z: &[f64], t: f64, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(invalid("oracle time must lie in (0, 1]"));
    }
    let (a, s) = sched.alpha_sigma(t);
    if s == 0.0 {
        return Err(Error::InvalidArgument("sigma_t = 0".into()));
    }
    let x = den.posterior_mean(z, t, sched)?;
    Ok(z.iter()
        .zip(&x)
        .map(|(&z, &x)| {
            let eps = (z - a * x) / s;
            a * eps - s * x
        })
        .collect())
}

impl Denoiser for GaussianOracleDenoiser {
    fn predict_v(&self, z: &[f64], _dims: Dims, t: f64, _context: &[f64]) -> Result<Vec<f64>> {
        oracle_predict_v(self, z, t, &self.sched)
    }
}

/// Gaussian oracle whose prior mean is the first `dims.channels` channels of
/// the context, with a shared variance. Useful where the conditioning image
/// changes per call (patch-wise refinement).
#[derive(Clone, Debug, PartialEq)]
pub struct ContextMeanOracle {
    pub var0: f64,
    pub sched: NoiseSchedule,
}

impl ContextMeanOracle {
    pub fn new(var0: f64) -> Result<Self> {
        if !(var0 >= 0.0 && var0.is_finite()) {
            return Err(invalid("var0 must be finite and >= 0"));
        }
        Ok(Self {
            var0,
            sched: NoiseSchedule::default(),
        })
    }
}

impl Denoiser for ContextMeanOracle {
    fn predict_v(&self, z: &[f64], dims: Dims, t: f64, context: &[f64]) -> Result<Vec<f64>> {
        check_len(dims.len(), z.len())?;
        if context.len() < z.len() {
            return Err(Error::ShapeMismatch {
                expected: z.len(),
                got: context.len(),
            });
        }
        let (a, s) = self.sched.alpha_sigma(t);
        if s == 0.0 {
            return Err(Error::InvalidArgument("sigma_t = 0".into()));
        }
        let v0 = self.var0;
        Ok(z.iter()
            .zip(context)
            .map(|(&z, &m)| {
                let x = (a * v0 * z + s * s * m) / (a * a * v0 + s * s);
                a * (z - a * x) / s - s * x
            })
            .collect())
    }
}

/// Returns the same value at every coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantDenoiser {
    pub value: f64,
}

impl ConstantDenoiser {
    pub fn new(value: f64) -> Self {
        Self { value }
    }

    pub fn zero() -> Self {
        Self::new(0.0)
    }
}

impl Denoiser for ConstantDenoiser {
    fn predict_v(&self, z: &[f64], _dims: Dims, _t: f64, _context: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![self.value; z.len()])
    }
}

impl VelocityField for ConstantDenoiser {
    fn velocity(&self, y: &[f64], _dims: Dims, _t: f64, _context: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![self.value; y.len()])
    }
}

/// A fixed velocity field independent of state and time.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantVelocity {
    pub v: Vec<f64>,
}

impl VelocityField for ConstantVelocity {
    fn velocity(&self, y: &[f64], _dims: Dims, _t: f64, _context: &[f64]) -> Result<Vec<f64>> {
        check_len(self.v.len(), y.len())?;
        Ok(self.v.clone())
    }
}

/// Expected per-coordinate value of `‖ε − ε̂‖²` under the oracle at time `t`:
/// `α² σ0² / (α² σ0² + σ²)`.
pub fn oracle_eps_mse(var0: f64, t: f64, sched: &NoiseSchedule) -> f64 {
    let (a, s) = sched.alpha_sigma(t);
    let num = a * a * var0;
    num / (num + s * s)
}

pub(crate) fn sinusoidal_embedding(x: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = if half > 1 {
            math::exp(-math::ln(1000.0) * i as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out[i] = math::sin(freq * x);
        out[half + i] = math::cos(freq * x);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::diffusion_loss;
    use crate::rng::SeededStream;

    #[test]
    fn dirac_prior_ignores_z() {
        let d = GaussianOracleDenoiser::new(vec![0.3, -0.1], vec![0.0, 0.0]).unwrap();
        let s = NoiseSchedule::default();
        for &t in &[0.1, 0.5, 0.99] {
            let x = d.posterior_mean(&[5.0, -7.0], t, &s).unwrap();
            assert!((x[0] - 0.3).abs() < 1e-15 && (x[1] + 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_mean_matches_quadrature() {
        // x ~ N(0, 1); at logsnr = 0 alpha = sigma = sqrt(1/2).
        let s = NoiseSchedule::default();
        // Find t with log_snr(t) = 0 by bisection.
        let (mut lo, mut hi) = (1e-6, 1.0 - 1e-6);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if s.log_snr(mid) > 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        let t = 0.5 * (lo + hi);
        let (a, sg) = s.alpha_sigma(t);
        assert!((a - sg).abs() < 1e-12);
        let d = GaussianOracleDenoiser::isotropic(1, 0.0, 1.0).unwrap();
        for &z in &[-2.0, -0.3, 0.0, 0.8, 3.1] {
            let (mut num, mut den) = (0.0, 0.0);
            let h = 1e-3;
            let mut x = -12.0;
            while x <= 12.0 {
                let w = math::exp(-0.5 * x * x - 0.5 * (z - a * x) * (z - a * x) / (sg * sg));
                num += w * x;
                den += w;
                x += h;
            }
            let quad = num / den;
            let got = d.posterior_mean(&[z], t, &s).unwrap()[0];
            assert!((got - quad).abs() < 1e-6, "z={z}: {got} vs {quad}");
        }
    }

    #[test]
    fn oracle_loss_matches_analytic_minimum() {
        let s = NoiseSchedule::default();
        let n = 1;
        let var0 = 0.7;
        let mu = 0.2;
        let d = GaussianOracleDenoiser::isotropic(n, mu, var0).unwrap();
        let m = 100_000;
        let xs: Vec<Vec<f64>> = SeededStream::new(3)
            .normals(m)
            .into_iter()
            .map(|e| vec![mu + math::sqrt(var0) * e])
            .collect();
        let ctx = vec![Vec::new(); m];
        let loss = diffusion_loss(&xs, &ctx, Dims::flat(n), &d, &s, &SeededStream::new(4)).unwrap();
        // E_t over U(0,1) by midpoint quadrature.
        let k = 200_000;
        let analytic: f64 =
            (0..k).map(|i| oracle_eps_mse(var0, (i as f64 + 0.5) / k as f64, &s)).sum::<f64>() / k as f64;
        assert!((loss - analytic).abs() < 0.01 * analytic, "{loss} vs {analytic}");
    }

    #[test]
    fn oracle_errors_at_t_zero() {
        let d = GaussianOracleDenoiser::isotropic(2, 0.0, 1.0).unwrap();
        assert!(oracle_predict_v(&d, &[0.0, 0.0], 0.0, &NoiseSchedule::default()).is_err());
        assert!(GaussianOracleDenoiser::new(vec![0.0], vec![-1.0]).is_err());
    }

    #[test]
    fn context_oracle_agrees_with_fixed_oracle() {
        let mean = vec![0.1, -0.4, 0.9];
        let d = GaussianOracleDenoiser::new(mean.clone(), vec![0.05; 3]).unwrap();
        let c = ContextMeanOracle::new(0.05).unwrap();
        let z = [0.3, 0.2, -1.0];
        let a = d.predict_v(&z, Dims::flat(3), 0.4, &[]).unwrap();
        let b = c.predict_v(&z, Dims::flat(3), 0.4, &mean).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn embedding_is_bounded_and_distinct() {
        let a = sinusoidal_embedding(-3.0, 16);
        let b = sinusoidal_embedding(4.0, 16);
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 0.1));
    }
}
