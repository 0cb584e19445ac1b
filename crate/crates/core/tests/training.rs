use hfd_core::denoise::train::{loss_and_grad, Batch};
use hfd_core::denoise::{LossKind, NetConfig, Tensor, TinyCondNet, TrainConfig, TrainState};
use hfd_core::exec::Sequential;
use hfd_core::{Dims, SeededStream};

fn smooth_image(dims: Dims, seed: u64) -> Vec<f64> {
    let s = SeededStream::new(seed);
    let coef = s.normals(12);
    let mut out = vec![0.0; dims.len()];
    for c in 0..dims.channels {
        for y in 0..dims.height {
            for x in 0..dims.width {
                let (u, v) = (y as f64 / dims.height as f64, x as f64 / dims.width as f64);
                let k = c * 4;
                let val = 0.4 * (coef[k] * (3.0 * u).sin() + coef[k + 1] * (2.0 * v).cos() + coef[k + 2] * (2.5 * (u + v)).sin())
                    + 0.2 * coef[k + 3];
                out[(c * dims.height + y) * dims.width + x] = val.tanh();
            }
        }
    }
    out
}

fn block_mean(x: &[f64], dims: Dims, d: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for c in 0..dims.channels {
        for by in (0..dims.height).step_by(d) {
            for bx in (0..dims.width).step_by(d) {
                let mut s = 0.0;
                for y in by..by + d {
                    for xx in bx..bx + d {
                        s += x[(c * dims.height + y) * dims.width + xx];
                    }
                }
                for y in by..by + d {
                    for xx in bx..bx + d {
                        out[(c * dims.height + y) * dims.width + xx] = s / (d * d) as f64;
                    }
                }
            }
        }
    }
    out
}

fn run(kind: LossKind, steps: u64) -> (f64, f64) {
    let dims = Dims::new(3, 16, 16);
    let xs: Vec<Vec<f64>> = (0..8).map(|i| smooth_image(dims, i)).collect();
    let ctx: Vec<Vec<f64>> = xs.iter().map(|x| block_mean(x, dims, 4)).collect();
    let batch = Batch::new(dims, xs.clone(), ctx.clone()).unwrap();
    let net = TinyCondNet::new(NetConfig::demo(3, 3), &SeededStream::new(1)).unwrap();
    let cfg = TrainConfig {
        lr: 2e-3,
        warmup: 50,
        ..TrainConfig::default()
    };
    let mut st = TrainState::new(net.params().to_vec(), cfg.clone()).unwrap();
    let eval_stream = SeededStream::new(777);
    let eval = |p: &[Tensor]| -> f64 {
        (0..4u64)
            .map(|r| st_loss(&net, p, &batch, kind, &cfg, &eval_stream.substream(r)))
            .sum::<f64>()
            / 4.0
    };
    let l0 = eval(&st.params);
    for k in 0..steps {
        st.train_step(&net, &batch, kind, &SeededStream::new(10_000 + k), &Sequential).unwrap();
    }
    let l1 = eval(&st.params);
    println!("{kind:?}: {l0:.4} -> {l1:.4}");
    (l0, l1)
}

fn st_loss(net: &TinyCondNet, p: &[Tensor], batch: &Batch, kind: LossKind, cfg: &TrainConfig, s: &SeededStream) -> f64 {
    loss_and_grad(net, p, batch, kind, cfg, s, &Sequential).unwrap().0
}

#[test]
fn short_run_reduces_diffusion_loss() {
    let (l0, l1) = run(LossKind::Diffusion, 300);
    assert!(l0 / l1 >= 2.0, "{l0} -> {l1}");
}

#[test]
fn short_run_reduces_flow_loss() {
    let (l0, l1) = run(LossKind::RectFlow, 300);
    assert!(l0 / l1 >= 2.0, "{l0} -> {l1}");
}
