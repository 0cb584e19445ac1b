//! Variance-preserving noise schedule on the shifted alpha-cosine log-SNR
//! curve, plus the Markov transition and single-example posterior moments
//! used by the ancestral sampler.
//!
//! `log_snr(t) = clamp(-2 (ln tan(pi t / 2) + ln eta), min, max)` and
//! `alpha_t^2 = sigmoid(log_snr)`, `sigma_t^2 = sigmoid(-log_snr)`.

use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use crate::error::{check_len, invalid, Result};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoiseSchedule {
    /// Shift: values below one move the whole curve towards less noise.
    pub eta: f64,
    pub logsnr_min: f64,
    pub logsnr_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            eta: 0.5,
            logsnr_min: -15.0,
            logsnr_max: 15.0,
        }
    }
}

impl NoiseSchedule {
    /// Schedule with the default `[-15, 15]` clamp.
    pub fn new(eta: f64) -> Result<Self> {
        Self::with_bounds(eta, -15.0, 15.0)
    }

    pub fn with_bounds(eta: f64, logsnr_min: f64, logsnr_max: f64) -> Result<Self> {
        let s = Self {
            eta,
            logsnr_min,
            logsnr_max,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(invalid("eta must be a positive finite number"));
        }
        if !(self.logsnr_min.is_finite() && self.logsnr_max.is_finite() && self.logsnr_min < self.logsnr_max) {
            return Err(invalid("log-SNR bounds must be finite with min < max"));
        }
        Ok(())
    }

    /// Clamped log-SNR at time `t`; the endpoints map onto the clamp.
    pub fn log_snr(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let raw = if t <= 0.0 {
            f64::INFINITY
        } else if t >= 1.0 {
            f64::NEG_INFINITY
        } else {
            -2.0 * (math::ln(math::tan(FRAC_PI_2 * t)) + math::ln(self.eta))
        };
        raw.clamp(self.logsnr_min, self.logsnr_max)
    }

    /// `(alpha_t, sigma_t)`.
    pub fn alpha_sigma(&self, t: f64) -> (f64, f64) {
        vp_params(self.log_snr(t))
    }

    /// Transition `q(z_t | z_s)`: `(alpha_ts, sigma_ts^2)`.
    ///
    /// The variance is evaluated as `sigma_t^2 (1 - SNR_t / SNR_s)`, which is
    /// algebraically `sigma_t^2 - alpha_ts^2 sigma_s^2` but has no
    /// cancellation when `s` approaches `t`. It is floored at zero.
    pub fn transition_params(&self, s: f64, t: f64) -> Result<(f64, f64)> {
        check_times(s, t)?;
        let (ls, lt) = (self.log_snr(s), self.log_snr(t));
        let alpha_ts = math::sqrt(math::sigmoid(lt) / math::sigmoid(ls));
        let var_ts = (math::sigmoid(-lt) * -math::expm1(lt - ls)).max(0.0);
        Ok((alpha_ts, var_ts))
    }

    /// Variance of the single-example denoising posterior `q(z_s | z_t, x)`:
    /// `sigma_ts^2 sigma_s^2 / sigma_t^2`.
    pub fn posterior_variance(&self, s: f64, t: f64) -> Result<f64> {
        check_times(s, t)?;
        let (ls, lt) = (self.log_snr(s), self.log_snr(t));
        Ok((math::sigmoid(-ls) * -math::expm1(lt - ls)).max(0.0))
    }

    /// Mean and variance of `q(z_s | z_t, x)`.
    pub fn posterior_moments(&self, s: f64, t: f64, z_t: &[f64], x: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_len(z_t.len(), x.len())?;
        let (cz, cx) = self.posterior_coefficients(s, t)?;
        let mu = z_t.iter().zip(x).map(|(z, x)| cz * z + cx * x).collect();
        Ok((mu, self.posterior_variance(s, t)?))
    }

    /// Weights `(a, b)` with `mu = a z_t + b x`.
    pub fn posterior_coefficients(&self, s: f64, t: f64) -> Result<(f64, f64)> {
        let (alpha_ts, var_ts) = self.transition_params(s, t)?;
        let (alpha_s, sigma_s) = self.alpha_sigma(s);
        let (_, sigma_t) = self.alpha_sigma(t);
        let st2 = sigma_t * sigma_t;
        Ok((alpha_ts * sigma_s * sigma_s / st2, alpha_s * var_ts / st2))
    }

    /// Ancestral-sampler variance, a log-space interpolation between the
    /// transition variance (`gamma = 1`) and the posterior variance
    /// (`gamma = 0`).
    pub fn sampler_variance(&self, s: f64, t: f64, gamma: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(invalid("gamma must lie in [0, 1]"));
        }
        let (_, var_ts) = self.transition_params(s, t)?;
        let post = self.posterior_variance(s, t)?;
        if gamma == 1.0 {
            return Ok(var_ts);
        }
        if gamma == 0.0 {
            return Ok(post);
        }
        if var_ts <= 0.0 || post <= 0.0 {
            return Ok(0.0);
        }
        Ok(math::exp(gamma * math::ln(var_ts) + (1.0 - gamma) * math::ln(post)))
    }
}

/// `(alpha, sigma)` of a variance-preserving process at a given log-SNR.
pub fn vp_params(logsnr: f64) -> (f64, f64) {
    (math::sqrt(math::sigmoid(logsnr)), math::sqrt(math::sigmoid(-logsnr)))
}

fn check_times(s: f64, t: f64) -> Result<()> {
    if !(s > 0.0 && s < t && t <= 1.0) {
        return Err(invalid("transition needs 0 < s < t <= 1"));
    }
    Ok(())
}

/// Descending sampling times `1, 1 - 1/T, ..., 1/T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn steps(&self) -> usize {
        self.times.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Time of grid point `k`; `k == steps()` denotes the clean endpoint 0.
    pub fn time(&self, k: usize) -> f64 {
        self.times.get(k).copied().unwrap_or(0.0)
    }
}

pub fn make_time_grid(steps: usize) -> Result<TimeGrid> {
    if steps == 0 {
        return Err(invalid("time grid needs at least one step"));
    }
    let n = steps as f64;
    Ok(TimeGrid {
        times: (0..steps).map(|k| (steps - k) as f64 / n).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededStream;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn symmetry_point_and_shift() {
        let s1 = NoiseSchedule::new(1.0).unwrap();
        assert!(s1.log_snr(0.5).abs() < 1e-15);
        let s05 = NoiseSchedule::new(0.5).unwrap();
        assert!(close(s05.log_snr(0.5), 1.386_294_361_119_890_6, 1e-12));
    }

    #[test]
    fn endpoints_hit_the_clamp() {
        for eta in [0.25, 0.5, 1.0, 4.0] {
            let s = NoiseSchedule::new(eta).unwrap();
            assert_eq!(s.log_snr(0.0), 15.0);
            assert_eq!(s.log_snr(1.0), -15.0);
        }
    }

    #[test]
    fn vp_params_values() {
        let (a, s) = vp_params(0.0);
        assert!(close(a, 0.5f64.sqrt(), 1e-15) && close(s, 0.5f64.sqrt(), 1e-15));
        // sigmoid(15) = 1 / (1 + e^-15)
        let (a, s) = vp_params(15.0);
        let e = (-15.0f64).exp();
        assert!(close(a, (1.0 / (1.0 + e)).sqrt(), 1e-15));
        assert!(close(a, 0.999_999_847, 1e-9));
        assert!(close(s, (e / (1.0 + e)).sqrt(), 1e-18));
        assert!(close(s, 5.53e-4, 1e-6));
    }

    #[test]
    fn variance_preserving_on_random_logsnr() {
        let st = SeededStream::new(1);
        for i in 0..100 {
            let l = 40.0 * st.uniform_at(i) - 20.0;
            let (a, s) = vp_params(l);
            assert!((a * a + s * s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grids() {
        assert_eq!(make_time_grid(1).unwrap().times(), &[1.0]);
        assert_eq!(make_time_grid(4).unwrap().times(), &[1.0, 0.75, 0.5, 0.25]);
        let g = make_time_grid(250).unwrap();
        assert_eq!(g.steps(), 250);
        assert!(close(*g.times().last().unwrap(), 0.004, 1e-15));
        for w in g.times().windows(2) {
            assert!(close(w[0] - w[1], 1.0 / 250.0, 1e-12));
        }
        assert_eq!(g.time(250), 0.0);
        assert!(make_time_grid(0).is_err());
    }

    #[test]
    fn transition_degenerates_to_identity() {
        let s = NoiseSchedule::new(1.0).unwrap();
        let t = 0.6;
        let (a, v) = s.transition_params(t - 1e-9, t).unwrap();
        assert!(close(a, 1.0, 1e-8));
        assert!(v.abs() < 1e-8);
        assert!(s.transition_params(0.5, 0.5).is_err());
        assert!(s.transition_params(0.6, 0.5).is_err());
        assert!(s.transition_params(0.0, 0.5).is_err());
    }

    #[test]
    fn transition_against_marginal_definition() {
        // Brute force from the marginals: alpha_ts = alpha_t / alpha_s,
        // var_ts = sigma_t^2 - alpha_ts^2 sigma_s^2.
        let sch = NoiseSchedule::new(1.0).unwrap();
        let (s, t) = (0.25, 0.75);
        let ls = -2.0 * (std::f64::consts::PI * s / 2.0).tan().ln();
        let lt = -2.0 * (std::f64::consts::PI * t / 2.0).tan().ln();
        let a_s = (1.0 / (1.0 + (-ls).exp())).sqrt();
        let a_t = (1.0 / (1.0 + (-lt).exp())).sqrt();
        let s2_s = 1.0 / (1.0 + ls.exp());
        let s2_t = 1.0 / (1.0 + lt.exp());
        let alpha_ts = a_t / a_s;
        let var_ts = s2_t - alpha_ts * alpha_ts * s2_s;
        let (a, v) = sch.transition_params(s, t).unwrap();
        assert!(close(a, alpha_ts, 1e-12));
        assert!(close(v, var_ts, 1e-12));
    }

    #[test]
    fn posterior_limits() {
        let sch = NoiseSchedule::new(1.0).unwrap();
        let z = [0.3, -1.2];
        let x = [0.9, 0.1];
        let t = 0.7;
        let (mu, var) = sch.posterior_moments(t - 1e-10, t, &z, &x).unwrap();
        assert!(var < 1e-8);
        for (m, z) in mu.iter().zip(&z) {
            assert!(close(*m, *z, 1e-7));
        }
        // Noiseless z_t = alpha_t x and a tiny s gives mu ~ alpha_s x.
        let (a_t, _) = sch.alpha_sigma(t);
        let zt: Vec<f64> = x.iter().map(|x| a_t * x).collect();
        let s = 1e-4;
        let (a_s, _) = sch.alpha_sigma(s);
        let (mu, _) = sch.posterior_moments(s, t, &zt, &x).unwrap();
        for (m, x) in mu.iter().zip(&x) {
            assert!(close(*m, a_s * x, 1e-12));
        }
        assert!(sch.posterior_moments(0.2, t, &z, &x[..1]).is_err());
    }

    #[test]
    fn sampler_variance_endpoints() {
        let sch = NoiseSchedule::default();
        let (s, t) = (0.3, 0.45);
        let (_, var_ts) = sch.transition_params(s, t).unwrap();
        let post = sch.posterior_variance(s, t).unwrap();
        assert_eq!(sch.sampler_variance(s, t, 1.0).unwrap(), var_ts);
        assert_eq!(sch.sampler_variance(s, t, 0.0).unwrap(), post);
        let mid = sch.sampler_variance(s, t, 0.1).unwrap();
        assert!(mid > post && mid < var_ts);
        assert!(close(mid, var_ts.powf(0.1) * post.powf(0.9), 1e-15));
        assert!(sch.sampler_variance(s, t, 1.1).is_err());
        assert!(sch.sampler_variance(s, t, -0.1).is_err());
    }

    #[test]
    fn invalid_schedules() {
        assert!(NoiseSchedule::new(0.0).is_err());
        assert!(NoiseSchedule::new(f64::NAN).is_err());
        assert!(NoiseSchedule::with_bounds(1.0, 5.0, 5.0).is_err());
    }

    proptest! {
        #[test]
        fn shift_law(t in 0.05f64..0.95, eta in 0.2f64..3.0) {
            let wide = |e| NoiseSchedule::with_bounds(e, -100.0, 100.0).unwrap();
            let d = wide(eta).log_snr(t) - wide(1.0).log_snr(t);
            prop_assert!((d + 2.0 * eta.ln()).abs() < 1e-12);
        }

        #[test]
        fn strictly_decreasing_in_interior(t in 0.001f64..0.998, dt in 1e-4f64..1e-3) {
            let s = NoiseSchedule::with_bounds(0.5, -100.0, 100.0).unwrap();
            prop_assert!(s.log_snr(t + dt) < s.log_snr(t));
        }

        #[test]
        fn non_increasing_with_clamp(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let s = NoiseSchedule::default();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(s.log_snr(hi) <= s.log_snr(lo));
        }

        #[test]
        fn kernel_consistency(s in 0.01f64..0.98, gap in 0.001f64..0.5, eta in 0.3f64..2.0) {
            let t = (s + gap).min(1.0);
            let sch = NoiseSchedule::new(eta).unwrap();
            let (a, v) = sch.transition_params(s, t).unwrap();
            let (a_s, s_s) = sch.alpha_sigma(s);
            let (a_t, s_t) = sch.alpha_sigma(t);
            prop_assert!((a * a_s - a_t).abs() < 1e-12);
            prop_assert!((a * a * s_s * s_s + v - s_t * s_t).abs() < 1e-12);
            prop_assert!(v >= 0.0);
        }

        #[test]
        fn unit_total_variance(t in 0.0f64..=1.0) {
            let (a, s) = NoiseSchedule::default().alpha_sigma(t);
            prop_assert!((a * a + s * s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_composition_monte_carlo() {
        // For a fixed x: z_t ~ q(z_t|x), then z_s ~ q(z_s|z_t, x) must be
        // distributed as q(z_s|x) = N(alpha_s x, sigma_s^2).
        let sch = NoiseSchedule::new(1.0).unwrap();
        let (s, t) = (0.35, 0.8);
        let (a_s, s_s) = sch.alpha_sigma(s);
        let (a_t, s_t) = sch.alpha_sigma(t);
        let root = SeededStream::new(77);
        let n = 100_000;
        let x = 0.7;
        let (cz, cx) = sch.posterior_coefficients(s, t).unwrap();
        let pv = sch.posterior_variance(s, t).unwrap();
        let zs: Vec<f64> = (0..n as u64)
            .map(|i| {
                let zt = a_t * x + s_t * root.substream(1).normal_at(i);
                cz * zt + cx * x + pv.sqrt() * root.substream(2).normal_at(i)
            })
            .collect();
        let m = zs.iter().sum::<f64>() / n as f64;
        let v = zs.iter().map(|z| (z - m) * (z - m)).sum::<f64>() / (n as f64 - 1.0);
        assert!((m / (a_s * x) - 1.0).abs() < 0.01, "mean {m} vs {}", a_s * x);
        assert!((v / (s_s * s_s) - 1.0).abs() < 0.01, "var {v} vs {}", s_s * s_s);
    }
}
