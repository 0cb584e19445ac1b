//! A small conditional encoder-decoder predicting v (or a flow velocity).
//!
//! Input is the channel concatenation of the state and the context; time
//! enters through a sinusoidal embedding and per-block feature modulation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::graph::{Graph, NodeId, ParamId, Tensor};
use super::{sinusoidal_embedding, Denoiser, VelocityField};
use crate::error::{invalid, Error, Result};
use crate::image::Dims;
use crate::math;
use crate::rng::SeededStream;
use crate::schedule::NoiseSchedule;

/// How the scalar time is mapped before the sinusoidal embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TimeInput {
    /// `log_snr(t)` under the given schedule.
    LogSnr(NoiseSchedule),
    /// `30 t - 15`, the same range as a clamped log-SNR.
    Linear,
}

impl TimeInput {
    pub fn feature(&self, t: f64) -> f64 {
        match self {
            TimeInput::LogSnr(s) => s.log_snr(t),
            TimeInput::Linear => 30.0 * t - 15.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NetConfig {
    pub data_channels: usize,
    pub context_channels: usize,
    /// Feature channels per resolution level (highest resolution first).
    pub channels: Vec<usize>,
    /// Residual blocks per resolution level. Above the lowest level the
    /// encoder takes `ceil(b / 2)` and the decoder the rest; the lowest
    /// level holds all of its blocks.
    pub blocks: Vec<usize>,
    /// Self-attention at the lowest resolution.
    pub attention: bool,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub groups: usize,
    pub time_input: TimeInput,
    pub zero_init_output: bool,
}

impl NetConfig {
    /// Three levels, channels (32, 64, 128), two blocks each.
    pub fn desk(data_channels: usize, context_channels: usize) -> Self {
        Self {
            data_channels,
            context_channels,
            channels: vec![32, 64, 128],
            blocks: vec![2, 2, 2],
            attention: true,
            embed_dim: 32,
            hidden_dim: 64,
            groups: 8,
            time_input: TimeInput::LogSnr(NoiseSchedule::default()),
            zero_init_output: true,
        }
    }

    /// A reduced profile that runs at interactive speed on one core.
    pub fn demo(data_channels: usize, context_channels: usize) -> Self {
        Self {
            channels: vec![8, 16, 32],
            blocks: vec![2, 2, 2],
            embed_dim: 16,
            hidden_dim: 32,
            groups: 4,
            ..Self::desk(data_channels, context_channels)
        }
    }

    /// Under a thousand parameters, for finite-difference checks.
    pub fn gradcheck(data_channels: usize, context_channels: usize) -> Self {
        Self {
            channels: vec![2, 4],
            blocks: vec![2, 1],
            embed_dim: 4,
            hidden_dim: 4,
            groups: 1,
            zero_init_output: false,
            ..Self::desk(data_channels, context_channels)
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Spatial sizes must be multiples of this.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_channels == 0 || self.channels.is_empty() || self.channels.len() != self.blocks.len() {
            return Err(invalid("net needs data channels and matching channels/blocks lists"));
        }
        if self.groups == 0 || self.channels.iter().any(|&c| c == 0 || c % self.groups != 0) {
            return Err(invalid("group count must divide every level's channels"));
        }
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) || self.hidden_dim == 0 {
            return Err(invalid("embed_dim must be even and >= 2, hidden_dim > 0"));
        }
        if self.levels() > 16 {
            return Err(invalid("too many levels"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Lin,
    film: Lin,
    norm2: Norm,
    conv2: Lin,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    norm: Norm,
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: Lin,
}

#[derive(Clone, Debug)]
struct Layout {
    emb1: Lin,
    emb2: Lin,
    conv_in: Lin,
    down: Vec<Vec<ResBlock>>,
    down_conv: Vec<Lin>,
    attn: Option<Attn>,
    up_merge: Vec<Lin>,
    up: Vec<Vec<ResBlock>>,
    norm_out: Norm,
    conv_out: Lin,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct Registry {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Registry {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, scale: f64) -> Lin {
        let std = scale / math::sqrt((cin * k * k) as f64);
        let w = self.add(format!("{name}.w"), &[cout, cin, k, k], if scale == 0.0 { Init::Zeros } else { Init::Normal(std) });
        let b = self.add(format!("{name}.b"), &[cout], Init::Zeros);
        Lin { w, b }
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize, scale: f64) -> Lin {
        let std = scale / math::sqrt(cin as f64);
        let w = self.add(format!("{name}.w"), &[cout, cin], if scale == 0.0 { Init::Zeros } else { Init::Normal(std) });
        let b = self.add(format!("{name}.b"), &[cout], Init::Zeros);
        Lin { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let g = self.add(format!("{name}.g"), &[c], Init::Ones);
        let b = self.add(format!("{name}.b"), &[c], Init::Zeros);
        Norm { g, b }
    }

    fn res(&mut self, name: &str, c: usize, hidden: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), c),
            conv1: self.conv(&format!("{name}.conv1"), c, c, 3, 1.0),
            film: self.linear(&format!("{name}.film"), hidden, 2 * c, 0.1),
            norm2: self.norm(&format!("{name}.norm2"), c),
            conv2: self.conv(&format!("{name}.conv2"), c, c, 3, 0.5),
        }
    }
}

fn build_layout(cfg: &NetConfig) -> (Layout, Registry) {
    let mut r = Registry {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let ch = &cfg.channels;
    let l = ch.len();
    let emb1 = r.linear("emb1", cfg.embed_dim, cfg.hidden_dim, 1.0);
    let emb2 = r.linear("emb2", cfg.hidden_dim, cfg.hidden_dim, 1.0);
    let conv_in = r.conv("conv_in", cfg.data_channels + cfg.context_channels, ch[0], 3, 1.0);
    let mut down = Vec::new();
    let mut down_conv = Vec::new();
    for lvl in 0..l {
        let n = if lvl + 1 < l { cfg.blocks[lvl].div_ceil(2) } else { cfg.blocks[lvl] };
        down.push((0..n).map(|b| r.res(&format!("down{lvl}.{b}"), ch[lvl], cfg.hidden_dim)).collect());
        if lvl + 1 < l {
            down_conv.push(r.conv(&format!("down{lvl}.pool"), ch[lvl], ch[lvl + 1], 1, 1.0));
        }
    }
    let attn = cfg.attention.then(|| {
        let c = ch[l - 1];
        let std = 1.0 / math::sqrt(c as f64);
        Attn {
            norm: r.norm("attn.norm", c),
            q: r.add("attn.q".into(), &[c, c], Init::Normal(std)),
            k: r.add("attn.k".into(), &[c, c], Init::Normal(std)),
            v: r.add("attn.v".into(), &[c, c], Init::Normal(std)),
            o: r.linear("attn.o", c, c, 0.5),
        }
    });
    let mut up_merge = vec![None; l.saturating_sub(1)];
    let mut up = vec![Vec::new(); l];
    for lvl in (0..l.saturating_sub(1)).rev() {
        up_merge[lvl] = Some(r.conv(&format!("up{lvl}.merge"), ch[lvl + 1] + ch[lvl], ch[lvl], 1, 1.0));
        up[lvl] = (0..cfg.blocks[lvl] / 2).map(|b| r.res(&format!("up{lvl}.{b}"), ch[lvl], cfg.hidden_dim)).collect();
    }
    let norm_out = r.norm("norm_out", ch[0]);
    let conv_out = r.conv("conv_out", ch[0], cfg.data_channels, 3, if cfg.zero_init_output { 0.0 } else { 1.0 });
    (
        Layout {
            emb1,
            emb2,
            conv_in,
            down,
            down_conv,
            attn,
            up_merge: up_merge.into_iter().map(|m| m.expect("merge conv")).collect(),
            up,
            norm_out,
            conv_out,
        },
        r,
    )
}

/// Network definition plus one parameter set.
#[derive(Clone, Debug)]
pub struct TinyCondNet {
    config: NetConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor>,
}

const GN_EPS: f64 = 1e-5;

impl TinyCondNet {
    /// Fresh parameters drawn from `stream` (one substream per tensor).
    pub fn new(config: NetConfig, stream: &SeededStream) -> Result<Self> {
        config.validate()?;
        let (layout, reg) = build_layout(&config);
        let params = reg
            .shapes
            .iter()
            .zip(&reg.inits)
            .enumerate()
            .map(|(i, (shape, init))| {
                let n: usize = shape.iter().product();
                let data = match *init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal(std) => stream.substream(i as u64).normals(n).into_iter().map(|v| v * std).collect(),
                };
                Tensor::from_vec(shape, data)
            })
            .collect();
        Ok(Self {
            config,
            layout,
            names: reg.names,
            params,
        })
    }

    /// Wraps an existing parameter set, validating shapes against `config`.
    pub fn with_params(config: NetConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let (layout, reg) = build_layout(&config);
        if params.len() != reg.shapes.len() {
            return Err(Error::ShapeMismatch {
                expected: reg.shapes.len(),
                got: params.len(),
            });
        }
        for (p, s) in params.iter().zip(&reg.shapes) {
            if &p.shape != s || p.data.len() != s.iter().product::<usize>() {
                return Err(Error::ShapeMismatch {
                    expected: s.iter().product(),
                    got: p.data.len(),
                });
            }
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("parameter"));
            }
        }
        Ok(Self {
            config,
            layout,
            names: reg.names,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_inputs(&self, z: &[f64], dims: Dims, context: &[f64]) -> Result<()> {
        let cfg = &self.config;
        if dims.channels != cfg.data_channels {
            return Err(Error::ShapeMismatch {
                expected: cfg.data_channels,
                got: dims.channels,
            });
        }
        crate::error::check_len(dims.len(), z.len())?;
        crate::error::check_len(cfg.context_channels * dims.plane(), context.len())?;
        let f = cfg.downsample_factor();
        if !dims.height.is_multiple_of(f) || !dims.width.is_multiple_of(f) || dims.height == 0 || dims.width == 0 {
            return Err(invalid(format!(
                "spatial size {}x{} is not a positive multiple of {f}",
                dims.height, dims.width
            )));
        }
        Ok(())
    }

    /// Records a forward pass with an explicit parameter set.
    pub fn forward<'p>(
        &self,
        params: &'p [Tensor],
        z: &[f64],
        dims: Dims,
        t: f64,
        context: &[f64],
    ) -> Result<(Graph<'p>, NodeId)> {
        self.check_inputs(z, dims, context)?;
        if !t.is_finite() {
            return Err(Error::NonFinite("time"));
        }
        let cfg = &self.config;
        let ly = &self.layout;
        let mut g = Graph::new(params);
        let mut x = Vec::with_capacity(z.len() + context.len());
        x.extend_from_slice(z);
        x.extend_from_slice(context);
        let input = g.input([cfg.data_channels + cfg.context_channels, dims.height, dims.width], x);
        let emb = sinusoidal_embedding(cfg.time_input.feature(t), cfg.embed_dim);
        let e = g.input([1, 1, cfg.embed_dim], emb);
        let e = g.linear(e, ly.emb1.w, ly.emb1.b);
        let e = g.silu(e);
        let e = g.linear(e, ly.emb2.w, ly.emb2.b);
        let e = g.silu(e);

        let mut h = g.conv(input, ly.conv_in.w, ly.conv_in.b);
        let levels = cfg.levels();
        let mut skips = Vec::with_capacity(levels);
        for lvl in 0..levels {
            for rb in &ly.down[lvl] {
                h = res_block(&mut g, h, e, rb, cfg.groups);
            }
            if lvl + 1 < levels {
                skips.push(h);
                let p = g.avg_pool(h);
                h = g.conv(p, ly.down_conv[lvl].w, ly.down_conv[lvl].b);
            }
        }
        if let Some(a) = &ly.attn {
            let n = g.group_norm(h, a.norm.g, a.norm.b, cfg.groups, GN_EPS);
            let o = g.attention(n, a.q, a.k, a.v, a.o.w, a.o.b);
            h = g.add(h, o);
        }
        for lvl in (0..levels.saturating_sub(1)).rev() {
            let u = g.upsample(h);
            let c = g.concat(u, skips[lvl]);
            h = g.conv(c, ly.up_merge[lvl].w, ly.up_merge[lvl].b);
            for rb in &ly.up[lvl] {
                h = res_block(&mut g, h, e, rb, cfg.groups);
            }
        }
        let n = g.group_norm(h, ly.norm_out.g, ly.norm_out.b, cfg.groups, GN_EPS);
        let a = g.silu(n);
        let out = g.conv(a, ly.conv_out.w, ly.conv_out.b);
        Ok((g, out))
    }

    /// Output with an explicit parameter set.
    pub fn predict_with(&self, params: &[Tensor], z: &[f64], dims: Dims, t: f64, context: &[f64]) -> Result<Vec<f64>> {
        let (g, out) = self.forward(params, z, dims, t, context)?;
        let v = g.value(out).to_vec();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("network output"));
        }
        Ok(v)
    }

    /// Output and the gradient of `sum(output * grad_out)` with respect to
    /// every parameter.
    #[allow(clippy::too_many_arguments)]
    pub fn backprop(
        &self,
        params: &[Tensor],
        z: &[f64],
        dims: Dims,
        t: f64,
        context: &[f64],
        grad_out: &[f64],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        crate::error::check_len(z.len(), grad_out.len())?;
        let (g, out) = self.forward(params, z, dims, t, context)?;
        let value = g.value(out).to_vec();
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("network output"));
        }
        let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        g.backward(out, grad_out.to_vec(), &mut grads);
        if grads.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        Ok((value, grads))
    }
}

fn res_block(g: &mut Graph, h: NodeId, e: NodeId, rb: &ResBlock, groups: usize) -> NodeId {
    let a = g.group_norm(h, rb.norm1.g, rb.norm1.b, groups, GN_EPS);
    let a = g.silu(a);
    let a = g.conv(a, rb.conv1.w, rb.conv1.b);
    let a = g.group_norm(a, rb.norm2.g, rb.norm2.b, groups, GN_EPS);
    let f = g.linear(e, rb.film.w, rb.film.b);
    let a = g.film(a, f);
    let a = g.silu(a);
    let a = g.conv(a, rb.conv2.w, rb.conv2.b);
    g.add(h, a)
}

impl Denoiser for TinyCondNet {
    fn predict_v(&self, z: &[f64], dims: Dims, t: f64, context: &[f64]) -> Result<Vec<f64>> {
        self.predict_with(&self.params, z, dims, t, context)
    }
}

impl VelocityField for TinyCondNet {
    fn velocity(&self, y: &[f64], dims: Dims, t: f64, context: &[f64]) -> Result<Vec<f64>> {
        self.predict_with(&self.params, y, dims, t, context)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(n: usize, seed: u64) -> Vec<f64> {
        SeededStream::new(seed).normals(n)
    }

    #[test]
    fn parameter_budgets() {
        let desk = TinyCondNet::new(NetConfig::desk(3, 3), &SeededStream::new(0)).unwrap();
        std::println!("desk parameters: {}", desk.param_count());
        assert!(desk.param_count() <= 1_000_000, "{}", desk.param_count());
        let small = TinyCondNet::new(NetConfig::gradcheck(1, 1), &SeededStream::new(0)).unwrap();
        assert!(small.param_count() <= 1000, "{}", small.param_count());
        assert_eq!(desk.param_names().len(), desk.params().len());
    }

    #[test]
    fn zero_output_at_init() {
        let net = TinyCondNet::new(NetConfig::demo(3, 3), &SeededStream::new(1)).unwrap();
        let dims = Dims::new(3, 8, 8);
        let v = net.predict_v(&rand(dims.len(), 2), dims, 0.4, &rand(dims.len(), 3)).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn resolution_changes_preserve_shape() {
        let mut cfg = NetConfig::demo(3, 3);
        cfg.zero_init_output = false;
        let net = TinyCondNet::new(cfg, &SeededStream::new(1)).unwrap();
        for size in [8usize, 16, 32] {
            let dims = Dims::new(3, size, size * 2);
            let v = net.predict_v(&rand(dims.len(), 2), dims, 0.7, &rand(dims.len(), 3)).unwrap();
            assert_eq!(v.len(), dims.len());
            assert!(v.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn rejects_indivisible_sizes_and_bad_context() {
        let net = TinyCondNet::new(NetConfig::demo(3, 3), &SeededStream::new(1)).unwrap();
        let dims = Dims::new(3, 6, 8);
        assert!(net.predict_v(&rand(dims.len(), 2), dims, 0.5, &rand(dims.len(), 3)).is_err());
        let dims = Dims::new(3, 8, 8);
        assert!(net.predict_v(&rand(dims.len(), 2), dims, 0.5, &rand(5, 3)).is_err());
    }

    #[test]
    fn examples_are_independent() {
        let mut cfg = NetConfig::gradcheck(1, 1);
        cfg.zero_init_output = false;
        let net = TinyCondNet::new(cfg, &SeededStream::new(4)).unwrap();
        let dims = Dims::new(1, 4, 4);
        let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..3).map(|i| (rand(16, 10 + i), rand(16, 20 + i))).collect();
        let fwd: Vec<Vec<f64>> = batch.iter().map(|(z, c)| net.predict_v(z, dims, 0.3, c).unwrap()).collect();
        for &i in &[2usize, 0, 1] {
            let (z, c) = &batch[i];
            assert_eq!(net.predict_v(z, dims, 0.3, c).unwrap(), fwd[i]);
        }
    }

    #[test]
    fn with_params_validates_shapes() {
        let net = TinyCondNet::new(NetConfig::gradcheck(1, 1), &SeededStream::new(4)).unwrap();
        let mut p = net.params().to_vec();
        assert!(TinyCondNet::with_params(NetConfig::gradcheck(1, 1), p.clone()).is_ok());
        p[0].data.pop();
        assert!(TinyCondNet::with_params(NetConfig::gradcheck(1, 1), p).is_err());
    }
}
