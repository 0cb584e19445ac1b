//! Adam with warmup and half-life decay, plus a parameter EMA.

use alloc::vec;
use alloc::vec::Vec;

use super::graph::Tensor;
use super::net::TinyCondNet;
use crate::diffusion::{diffusion_example_loss, draw_loss_example, noisy_input};
use crate::error::{check_len, invalid, Error, Result};
use crate::exec::Executor;
use crate::image::Dims;
use crate::math;
use crate::rectflow::{rf_example_loss, rf_example_time, rf_pair, DEFAULT_AMPLITUDE};
use crate::rng::SeededStream;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum LossKind {
    /// v-prediction diffusion on data in `[-1, 1]`; context is the
    /// conditioning image.
    Diffusion,
    /// Paired rectified flow on data in `[0, 1]`; context is the source.
    RectFlow,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup: u64,
    pub halflife: f64,
    pub ema: f64,
    pub batch: usize,
    pub sched: NoiseSchedule,
    pub rf_amplitude: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            warmup: 10_000,
            halflife: 400_000.0,
            ema: 0.9999,
            batch: 8,
            sched: NoiseSchedule::default(),
            rf_amplitude: DEFAULT_AMPLITUDE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.halflife > 0.0
            && (0.0..=1.0).contains(&self.ema)
            && self.batch > 0
            && self.rf_amplitude >= 0.0;
        if !ok {
            return Err(invalid("invalid training configuration"));
        }
        self.sched.validate()
    }

    /// `lr * min(1, step / warmup) * 0.5^(step / halflife)`; a zero warmup
    /// means no warmup.
    pub fn effective_lr(&self, step: u64) -> f64 {
        let warm = if self.warmup == 0 {
            1.0
        } else {
            (step as f64 / self.warmup as f64).min(1.0)
        };
        self.lr * warm * math::pow(0.5, step as f64 / self.halflife)
    }
}

/// A batch of examples: targets and per-example context (same spatial size).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub dims: Dims,
    pub x: Vec<Vec<f64>>,
    pub context: Vec<Vec<f64>>,
}

impl Batch {
    pub fn new(dims: Dims, x: Vec<Vec<f64>>, context: Vec<Vec<f64>>) -> Result<Self> {
        if x.is_empty() {
            return Err(invalid("batch must be nonempty"));
        }
        check_len(x.len(), context.len())?;
        for v in &x {
            check_len(dims.len(), v.len())?;
        }
        Ok(Self { dims, x, context })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Mean loss over the batch and its gradient with respect to `params`.
///
/// Example `i` draws its randomness from `stream.substream(i)`; per-example
/// gradients are summed in index order whatever the executor.
pub fn loss_and_grad<E: Executor>(
    net: &TinyCondNet,
    params: &[Tensor],
    batch: &Batch,
    kind: LossKind,
    cfg: &TrainConfig,
    stream: &SeededStream,
    exec: &E,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(invalid("batch must be nonempty"));
    }
    let dims = batch.dims;
    let per = exec.map(batch.len(), |i| -> Result<(f64, Vec<Vec<f64>>)> {
        let x = &batch.x[i];
        let sub = stream.substream(i as u64);
        let (input, t, ctx, target) = match kind {
            LossKind::Diffusion => {
                let (t, eps) = draw_loss_example(x.len(), &sub);
                (noisy_input(x, &eps, t, &cfg.sched), t, batch.context[i].clone(), Target::Eps(eps))
            }
            LossKind::RectFlow => {
                // The source comes first; any further context channels
                // (e.g. residual energy) pass through unchanged.
                let ctx = &batch.context[i];
                if ctx.len() < x.len() {
                    return Err(Error::ShapeMismatch {
                        expected: x.len(),
                        got: ctx.len(),
                    });
                }
                let pair = rf_pair(x, &ctx[..x.len()], cfg.rf_amplitude, &sub.substream(1))?;
                let t = rf_example_time(stream, i);
                let mut model_ctx = pair.z.clone();
                model_ctx.extend_from_slice(&ctx[x.len()..]);
                (pair.interpolate(t), t, model_ctx, Target::Velocity(pair.v))
            }
        };
        let (g, out) = net.forward(params, &input, dims, t, &ctx)?;
        let f = g.value(out);
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output"));
        }
        let (loss, dout) = match &target {
            Target::Eps(eps) => diffusion_example_loss(x, eps, t, f, &cfg.sched),
            Target::Velocity(v) => rf_example_loss(v, f),
        };
        let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        g.backward(out, dout, &mut grads);
        Ok((loss, grads))
    });
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    for r in per {
        let (l, g) = r?;
        total += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
    }
    for g in &mut grads {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok((loss, grads))
}

enum Target {
    Eps(Vec<f64>),
    Velocity(Vec<f64>),
}

/// Optimizer state: raw parameters, Adam moments and the EMA.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: Vec<Tensor>,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub ema: Vec<Tensor>,
    pub config: TrainConfig,
}

impl TrainState {
    pub fn new(params: Vec<Tensor>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Ok(Self {
            step: 0,
            ema: params.clone(),
            params,
            adam_m: zeros.clone(),
            adam_v: zeros,
            config,
        })
    }

    /// Checks that moment and EMA shapes match the parameters.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let n = self.params.len();
        check_len(n, self.ema.len())?;
        check_len(n, self.adam_m.len())?;
        check_len(n, self.adam_v.len())?;
        for i in 0..n {
            let len = self.params[i].len();
            if self.ema[i].shape != self.params[i].shape {
                return Err(Error::ShapeMismatch {
                    expected: len,
                    got: self.ema[i].len(),
                });
            }
            check_len(len, self.adam_m[i].len())?;
            check_len(len, self.adam_v[i].len())?;
        }
        Ok(())
    }

    /// Applies one Adam update with the given gradients, then the EMA.
    ///
    /// The update for the state at `step` uses the learning rate and bias
    /// correction for step `step + 1`.
    pub fn apply_gradients(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        check_len(self.params.len(), grads.len())?;
        for (p, g) in self.params.iter().zip(grads) {
            check_len(p.len(), g.len())?;
        }
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        let c = &self.config;
        let n = self.step + 1;
        let lr = c.effective_lr(n);
        let bc1 = 1.0 - math::pow(c.beta1, n as f64);
        let bc2 = 1.0 - math::pow(c.beta2, n as f64);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.adam_m[i], &mut self.adam_v[i]);
            let p = &mut self.params[i].data;
            let e = &mut self.ema[i].data;
            for j in 0..g.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (math::sqrt(vh) + c.adam_eps);
                e[j] = c.ema * e[j] + (1.0 - c.ema) * p[j];
            }
        }
        self.step = n;
        Ok(())
    }

    /// One optimization step on `batch`; returns the pre-update loss. The
    /// state is left untouched on error.
    pub fn train_step<E: Executor>(
        &mut self,
        net: &TinyCondNet,
        batch: &Batch,
        kind: LossKind,
        stream: &SeededStream,
        exec: &E,
    ) -> Result<f64> {
        let (loss, grads) = loss_and_grad(net, &self.params, batch, kind, &self.config, stream, exec)?;
        self.apply_gradients(&grads)?;
        Ok(loss)
    }

    /// Parameters used for evaluation (the EMA).
    pub fn eval_params(&self) -> &[Tensor] {
        &self.ema
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::net::NetConfig;
    use crate::exec::{Permuted, Sequential};

    fn small_net(kind: LossKind, seed: u64) -> TinyCondNet {
        let mut cfg = NetConfig::gradcheck(1, 1);
        if kind == LossKind::RectFlow {
            cfg.time_input = crate::denoise::TimeInput::Linear;
        }
        TinyCondNet::new(cfg, &SeededStream::new(seed)).unwrap()
    }

    fn toy_batch(seed: u64) -> Batch {
        let dims = Dims::new(1, 8, 8);
        let s = SeededStream::new(seed);
        let x = (0..2).map(|i| s.substream(i).uniforms(64)).collect();
        let c = (0..2).map(|i| s.substream(10 + i).uniforms(64)).collect();
        Batch::new(dims, x, c).unwrap()
    }

    #[test]
    fn lr_schedule_values() {
        let c = TrainConfig::default();
        assert_eq!(c.effective_lr(0), 0.0);
        let want = 1e-4 * math::pow(0.5, 10_000.0 / 400_000.0);
        assert!((c.effective_lr(10_000) - want).abs() < 1e-18);
        assert!((c.effective_lr(5_000) - 0.5 * 1e-4 * math::pow(0.5, 5_000.0 / 400_000.0)).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in (10_000..2_000_000).step_by(50_000) {
            let l = c.effective_lr(s);
            assert!(l <= prev);
            prev = l;
        }
        // Continuous at the end of warmup.
        assert!((c.effective_lr(9_999) - c.effective_lr(10_000)).abs() < 2e-8);
    }

    #[test]
    fn ema_follows_recurrence_and_lags() {
        let net = small_net(LossKind::Diffusion, 1);
        let mut st = TrainState::new(net.params().to_vec(), TrainConfig::default()).unwrap();
        assert_eq!(st.eval_params(), net.params());
        let grads: Vec<Vec<f64>> = st.params.iter().map(|p| vec![1.0; p.len()]).collect();
        let mut prev_gap = 0.0;
        for _ in 0..5 {
            let prev_ema = st.ema.clone();
            st.apply_gradients(&grads).unwrap();
            for (e, (pe, p)) in st.ema.iter().zip(prev_ema.iter().zip(&st.params)) {
                for j in 0..e.len() {
                    assert_eq!(e.data[j], 0.9999 * pe.data[j] + (1.0 - 0.9999) * p.data[j]);
                }
            }
            // Parameters move down monotonically; the EMA stays above.
            let gap = st.ema[0].data[0] - st.params[0].data[0];
            assert!(gap >= prev_gap);
            prev_gap = gap;
        }
        let mut cfg = TrainConfig::default();
        cfg.ema = 0.0;
        let mut st = TrainState::new(net.params().to_vec(), cfg).unwrap();
        st.apply_gradients(&grads).unwrap();
        assert_eq!(st.ema, st.params);
    }

    #[test]
    fn nonfinite_gradients_leave_state_untouched() {
        let net = small_net(LossKind::Diffusion, 1);
        let mut st = TrainState::new(net.params().to_vec(), TrainConfig::default()).unwrap();
        let before = st.clone();
        let mut grads: Vec<Vec<f64>> = st.params.iter().map(|p| vec![1.0; p.len()]).collect();
        grads[0][0] = f64::NAN;
        assert!(st.apply_gradients(&grads).is_err());
        assert_eq!(st, before);
    }

    /// Finite-difference check of the full training loss for both kinds.
    fn grad_check(kind: LossKind) {
        let net = small_net(kind, 3);
        assert!(net.param_count() <= 1000);
        let batch = toy_batch(4);
        let cfg = TrainConfig::default();
        let stream = SeededStream::new(5);
        let params = net.params().to_vec();
        let (_, grads) = loss_and_grad(&net, &params, &batch, kind, &cfg, &stream, &Sequential).unwrap();
        // Fourth-order central stencil at h = 1e-3.
        let h = 1e-3;
        let at = |i: usize, j: usize, d: f64| {
            let mut p = params.clone();
            p[i].data[j] += d;
            loss_and_grad(&net, &p, &batch, kind, &cfg, &stream, &Sequential).unwrap().0
        };
        let mut worst: f64 = 0.0;
        for (i, p) in params.iter().enumerate() {
            for j in 0..p.len() {
                let fd = (at(i, j, -2.0 * h) - 8.0 * at(i, j, -h) + 8.0 * at(i, j, h) - at(i, j, 2.0 * h)) / (12.0 * h);
                let an = grads[i][j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "{kind:?}: worst relative error {worst}");
    }

    #[test]
    fn rectflow_passes_extra_context_through() {
        let mut cfg = NetConfig::gradcheck(1, 2);
        cfg.time_input = crate::denoise::TimeInput::Linear;
        let net = TinyCondNet::new(cfg, &SeededStream::new(2)).unwrap();
        let b = toy_batch(4);
        let wide: Vec<Vec<f64>> = b.context.iter().map(|c| c.iter().chain(c.iter()).map(|v| v * 0.5).collect()).collect();
        let ok = Batch::new(b.dims, b.x.clone(), wide).unwrap();
        let s = SeededStream::new(1);
        let cfg = TrainConfig::default();
        assert!(loss_and_grad(&net, net.params(), &ok, LossKind::RectFlow, &cfg, &s, &Sequential).is_ok());
        let short = Batch::new(b.dims, b.x.clone(), vec![vec![0.0; 10]; 2]).unwrap();
        assert!(loss_and_grad(&net, net.params(), &short, LossKind::RectFlow, &cfg, &s, &Sequential).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_diffusion() {
        grad_check(LossKind::Diffusion);
    }

    #[test]
    fn gradients_match_finite_differences_rectflow() {
        grad_check(LossKind::RectFlow);
    }

    #[test]
    fn gradient_is_linear_and_zero_for_unused_params() {
        let net = small_net(LossKind::Diffusion, 3);
        let batch = toy_batch(4);
        let cfg = TrainConfig::default();
        let s = SeededStream::new(5);
        let (_, g) = loss_and_grad(&net, net.params(), &batch, LossKind::Diffusion, &cfg, &s, &Sequential).unwrap();
        let (_, g1) = loss_and_grad(&net, net.params(), &batch, LossKind::Diffusion, &cfg, &s, &Permuted { seed: 9 }).unwrap();
        assert_eq!(g, g1);
        // An extra tensor the graph never reads gets a zero gradient.
        let mut params = net.params().to_vec();
        params.push(Tensor::zeros(&[3]));
        let (g, out) = net.forward(&params, &batch.x[0], batch.dims, 0.5, &batch.context[0]).unwrap();
        let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        g.backward(out, vec![1.0; 64], &mut grads);
        assert!(grads.last().unwrap().iter().all(|&v| v == 0.0));
        let mut grads2: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        g.backward(out, vec![3.0; 64], &mut grads2);
        for (a, b) in grads.iter().flatten().zip(grads2.iter().flatten()) {
            assert!((3.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let net = small_net(LossKind::Diffusion, 7);
            let mut cfg = TrainConfig::default();
            cfg.warmup = 1;
            cfg.lr = 1e-3;
            let mut st = TrainState::new(net.params().to_vec(), cfg).unwrap();
            let batch = toy_batch(2);
            for k in 0..3 {
                st.train_step(&net, &batch, LossKind::Diffusion, &SeededStream::new(100 + k), &Sequential).unwrap();
            }
            st
        };
        assert_eq!(run(), run());
    }
}
