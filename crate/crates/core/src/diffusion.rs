//! Forward corruption, prediction algebra, the epsilon-MSE training loss and
//! the ancestral (DDPM) and deterministic (DDIM) reverse samplers.
//!
//! All samplers operate on flat planar vectors. Randomness is taken from
//! fixed substreams so that a tiled run can reproduce exactly the noise of an
//! untiled run: the initial state comes from [`init_stream`] and the noise
//! of reverse step `k` from [`step_stream`], both indexed by flat position.

use alloc::vec::Vec;

use crate::denoise::Denoiser;
use crate::error::{check_len, invalid, Error, Result};
use crate::image::Dims;
use crate::math;
use crate::rng::SeededStream;
use crate::schedule::{make_time_grid, NoiseSchedule};

/// What a prediction estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PredictionKind {
    X,
    Eps,
    V,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub kind: PredictionKind,
    pub value: Vec<f64>,
}

/// A noisy latent `z_t` at continuous time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub z: Vec<f64>,
    pub t: f64,
}

/// Reverse-process update rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampler {
    /// Ancestral sampling with noise level `gamma` in `[0, 1]`.
    Ddpm { gamma: f64 },
    Ddim,
}

impl Sampler {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Sampler::Ddpm { gamma } if !(0.0..=1.0).contains(&gamma) => {
                Err(invalid("gamma must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

/// Substream holding the initial `z_1 ~ N(0, I)`.
pub fn init_stream(stream: &SeededStream) -> SeededStream {
    stream.substream(0)
}

/// Substream holding the fresh noise injected by reverse step `k`.
pub fn step_stream(stream: &SeededStream, k: usize) -> SeededStream {
    stream.substream(1).substream(k as u64)
}

/// `z_t = alpha_t x + sigma_t eps` with `eps` drawn from `stream`.
pub fn forward_sample(x: &[f64], t: f64, sched: &NoiseSchedule, stream: &SeededStream) -> DiffusionState {
    let (a, s) = sched.alpha_sigma(t);
    let z = x
        .iter()
        .enumerate()
        .map(|(i, &x)| a * x + s * stream.normal_at(i as u64))
        .collect();
    DiffusionState { z, t }
}

/// Re-express `pred` as `target` using `z = alpha x + sigma eps` and
/// `v = alpha eps - sigma x`.
pub fn convert_prediction(
    pred: &Prediction,
    state: &DiffusionState,
    sched: &NoiseSchedule,
    target: PredictionKind,
) -> Result<Prediction> {
    use PredictionKind::*;
    check_len(state.z.len(), pred.value.len())?;
    let (a, s) = sched.alpha_sigma(state.t);
    let f: fn(f64, f64, f64, f64) -> f64 = match (pred.kind, target) {
        (k, j) if k == j => |_, _, _, p| p,
        (V, X) => |a, s, z, v| a * z - s * v,
        (V, Eps) => |a, s, z, v| s * z + a * v,
        (X, Eps) => |a, s, z, x| (z - a * x) / s,
        (X, V) => |a, s, z, x| (a * z - x) / s,
        (Eps, X) => |a, s, z, e| (z - s * e) / a,
        (Eps, V) => |a, s, z, e| (e - s * z) / a,
        _ => unreachable!(),
    };
    let value = state
        .z
        .iter()
        .zip(&pred.value)
        .map(|(&z, &p)| f(a, s, z, p))
        .collect();
    Ok(Prediction { kind: target, value })
}

/// `(x_hat, eps_hat)` from a v-prediction at `(z, t)`.
pub fn x_eps_from_v(z: &[f64], v: &[f64], t: f64, sched: &NoiseSchedule) -> (Vec<f64>, Vec<f64>) {
    let (a, s) = sched.alpha_sigma(t);
    z.iter()
        .zip(v)
        .map(|(&z, &v)| (a * z - s * v, s * z + a * v))
        .unzip()
}

pub(crate) fn ensure_finite(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Per-example randomness of the diffusion loss: `t ~ U(0, 1)` and
/// `eps ~ N(0, I)`.
pub fn draw_loss_example(n: usize, stream: &SeededStream) -> (f64, Vec<f64>) {
    (stream.substream(0).uniform_at(0), stream.substream(1).normals(n))
}

/// One example of the loss: returns `(loss, dloss/dv_hat)` given the drawn
/// `eps`, `t` and the model's `v_hat`.
pub(crate) fn diffusion_example_loss(
    x: &[f64],
    eps: &[f64],
    t: f64,
    v_hat: &[f64],
    sched: &NoiseSchedule,
) -> (f64, Vec<f64>) {
    let (a, s) = sched.alpha_sigma(t);
    let mut loss = 0.0;
    let grad = x
        .iter()
        .zip(eps)
        .zip(v_hat)
        .map(|((&x, &e), &v)| {
            let z = a * x + s * e;
            let r = s * z + a * v - e;
            loss += r * r;
            2.0 * a * r
        })
        .collect();
    (loss, grad)
}

/// Noisy input for one loss example.
pub(crate) fn noisy_input(x: &[f64], eps: &[f64], t: f64, sched: &NoiseSchedule) -> Vec<f64> {
    let (a, s) = sched.alpha_sigma(t);
    x.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect()
}

fn check_batch(x_batch: &[Vec<f64>], contexts: &[Vec<f64>], dims: Dims) -> Result<()> {
    if x_batch.is_empty() {
        return Err(invalid("loss needs a nonempty batch"));
    }
    check_len(x_batch.len(), contexts.len())?;
    for x in x_batch {
        check_len(dims.len(), x.len())?;
    }
    Ok(())
}

/// Mean over the batch of `||eps - eps_hat||^2` with uniform `t` per example
/// and `eps_hat` derived from the denoiser's v-prediction (`w(t) = 1`).
pub fn diffusion_loss<D: Denoiser + ?Sized>(
    x_batch: &[Vec<f64>],
    contexts: &[Vec<f64>],
    dims: Dims,
    denoiser: &D,
    sched: &NoiseSchedule,
    stream: &SeededStream,
) -> Result<f64> {
    check_batch(x_batch, contexts, dims)?;
    let mut total = 0.0;
    for (i, (x, ctx)) in x_batch.iter().zip(contexts).enumerate() {
        let (t, eps) = draw_loss_example(x.len(), &stream.substream(i as u64));
        let z = noisy_input(x, &eps, t, sched);
        let v = denoiser.predict_v(&z, dims, t, ctx)?;
        check_len(z.len(), v.len())?;
        ensure_finite(&v, "denoiser output")?;
        total += diffusion_example_loss(x, &eps, t, &v, sched).0;
    }
    Ok(total / x_batch.len() as f64)
}

fn check_step(t: f64, s: f64) -> Result<()> {
    if !(s < t) || s < 0.0 {
        return Err(invalid("reverse step needs 0 <= s < t"));
    }
    Ok(())
}

/// Posterior-mean update with explicit noise: `z_s = mu(z_t, x_hat) + std * noise`.
pub fn ddpm_update(
    state: &DiffusionState,
    s: f64,
    x_hat: &[f64],
    gamma: f64,
    sched: &NoiseSchedule,
    noise: &[f64],
) -> Result<DiffusionState> {
    check_step(state.t, s)?;
    check_len(state.z.len(), x_hat.len())?;
    if s <= 0.0 {
        return Ok(DiffusionState {
            z: x_hat.to_vec(),
            t: 0.0,
        });
    }
    check_len(state.z.len(), noise.len())?;
    let (cz, cx) = sched.posterior_coefficients(s, state.t)?;
    let std = math::sqrt(sched.sampler_variance(s, state.t, gamma)?);
    let z = state
        .z
        .iter()
        .zip(x_hat)
        .zip(noise)
        .map(|((&z, &x), &n)| cz * z + cx * x + std * n)
        .collect();
    Ok(DiffusionState { z, t: s })
}

/// Deterministic update `z_s = alpha_s x_hat + sigma_s eps_hat`.
pub fn ddim_update(state: &DiffusionState, s: f64, v_hat: &[f64], sched: &NoiseSchedule) -> Result<DiffusionState> {
    check_step(state.t, s)?;
    check_len(state.z.len(), v_hat.len())?;
    let (x_hat, eps_hat) = x_eps_from_v(&state.z, v_hat, state.t, sched);
    if s <= 0.0 {
        return Ok(DiffusionState { z: x_hat, t: 0.0 });
    }
    let (a, sg) = sched.alpha_sigma(s);
    let z = x_hat.iter().zip(&eps_hat).map(|(x, e)| a * x + sg * e).collect();
    Ok(DiffusionState { z, t: s })
}

/// Apply `sampler` given an already computed v-prediction. `noise` is only
/// called for ancestral steps that land above `t = 0`.
pub fn reverse_update(
    sampler: Sampler,
    state: &DiffusionState,
    s: f64,
    v_hat: &[f64],
    sched: &NoiseSchedule,
    noise: impl FnOnce() -> Vec<f64>,
) -> Result<DiffusionState> {
    match sampler {
        Sampler::Ddim => ddim_update(state, s, v_hat, sched),
        Sampler::Ddpm { gamma } => {
            check_step(state.t, s)?;
            check_len(state.z.len(), v_hat.len())?;
            let (a, sg) = sched.alpha_sigma(state.t);
            let x_hat: Vec<f64> = state.z.iter().zip(v_hat).map(|(z, v)| a * z - sg * v).collect();
            if s <= 0.0 {
                return Ok(DiffusionState { z: x_hat, t: 0.0 });
            }
            ddpm_update(state, s, &x_hat, gamma, sched, &noise())
        }
    }
}

fn predict<D: Denoiser + ?Sized>(
    denoiser: &D,
    state: &DiffusionState,
    dims: Dims,
    context: &[f64],
) -> Result<Vec<f64>> {
    check_len(dims.len(), state.z.len())?;
    let v = denoiser.predict_v(&state.z, dims, state.t, context)?;
    check_len(state.z.len(), v.len())?;
    ensure_finite(&v, "denoiser output")?;
    Ok(v)
}

/// One ancestral step from `state.t` to `s`. Stepping to `s = 0` returns
/// the denoised estimate without injecting noise.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_step<D: Denoiser + ?Sized>(
    state: &DiffusionState,
    s: f64,
    denoiser: &D,
    dims: Dims,
    context: &[f64],
    gamma: f64,
    sched: &NoiseSchedule,
    stream: &SeededStream,
) -> Result<DiffusionState> {
    check_step(state.t, s)?;
    let v = predict(denoiser, state, dims, context)?;
    reverse_update(Sampler::Ddpm { gamma }, state, s, &v, sched, || stream.normals(state.z.len()))
}

/// One deterministic step; consumes no randomness.
pub fn ddim_step<D: Denoiser + ?Sized>(
    state: &DiffusionState,
    s: f64,
    denoiser: &D,
    dims: Dims,
    context: &[f64],
    sched: &NoiseSchedule,
) -> Result<DiffusionState> {
    check_step(state.t, s)?;
    let v = predict(denoiser, state, dims, context)?;
    ddim_update(state, s, &v, sched)
}

/// Run the reverse process from `z_1 ~ N(0, I)` over `make_time_grid(steps)`.
/// The last step returns the denoised estimate, optionally clamped.
#[allow(clippy::too_many_arguments)]
pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    dims: Dims,
    context: &[f64],
    steps: usize,
    sampler: Sampler,
    sched: &NoiseSchedule,
    stream: &SeededStream,
    clamp: Option<(f64, f64)>,
) -> Result<Vec<f64>> {
    sampler.validate()?;
    let grid = make_time_grid(steps)?;
    let mut state = DiffusionState {
        z: init_stream(stream).normals(dims.len()),
        t: 1.0,
    };
    for k in 0..steps {
        let s = grid.time(k + 1);
        let v = predict(denoiser, &state, dims, context)?;
        let noise = step_stream(stream, k);
        state = reverse_update(sampler, &state, s, &v, sched, || noise.normals(dims.len()))?;
    }
    let mut out = state.z;
    if let Some((lo, hi)) = clamp {
        for v in &mut out {
            *v = v.clamp(lo, hi);
        }
    }
    Ok(out)
}
