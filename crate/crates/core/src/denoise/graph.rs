//! Minimal reverse-mode differentiation over planar `f64` tensors.
//!
//! Parameters are not graph nodes: ops reference them by index into a
//! parameter slice, and `backward` accumulates into a matching gradient set.
//! Every op works on a single example (`[C, H, W]` fields or flat vectors).

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Dense tensor with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub type NodeId = usize;
pub type ParamId = usize;

enum Op {
    Leaf,
    Param(ParamId),
    Conv { x: NodeId, w: ParamId, b: ParamId, k: usize },
    Linear { x: NodeId, w: ParamId, b: ParamId },
    Add(NodeId, NodeId),
    Silu(NodeId),
    GroupNorm { x: NodeId, gamma: ParamId, beta: ParamId, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Film { x: NodeId, f: NodeId },
    AvgPool(NodeId),
    Upsample(NodeId),
    Concat(NodeId, NodeId),
    Attention(AttnCache),
}

struct AttnCache {
    x: NodeId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    mixed: Vec<f64>,
}

struct Node {
    shape: [usize; 3],
    value: Vec<f64>,
    op: Op,
}

/// One recorded forward pass.
pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    math::sigmoid(x)
}

/// `c = a b + beta c` with explicit (row, column) strides for each operand.
#[allow(clippy::too_many_arguments)]
#[allow(unsafe_code)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cc: usize, rs: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs;
    assert!(last(m, n, rsc, csc) < c.len());
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len());
    // SAFETY: the asserts above keep every addressed element inside the
    // three slices, and `c` is borrowed mutably so it cannot alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `out += a b` for row-major `a: [m, k]`, `b: [k, n]`.
fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), 1.0, out, (n, 1));
}

/// Row ranges processed per im2col block, sized to stay cache-resident.
fn conv_chunks(h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let rows = (8192 / w.max(1)).max(1);
    (0..h).step_by(rows).map(move |y0| (y0, (y0 + rows).min(h)))
}

/// Unfolds rows `y0..y1` of `x: [ci, h, w]` into `[ci * k * k, (y1 - y0) * w]`
/// with zero padding.
fn im2col(x: &[f64], [ci, h, w]: [usize; 3], k: usize, y0: usize, y1: usize, col: &mut Vec<f64>) {
    let np = (y1 - y0) * w;
    let r = (k / 2) as isize;
    col.clear();
    col.resize(ci * k * k * np, 0.0);
    for i in 0..ci {
        let src = &x[i * h * w..(i + 1) * h * w];
        for ky in 0..k {
            let dy = ky as isize - r;
            for kx in 0..k {
                let dx = kx as isize - r;
                let (x0, x1) = shifted_range(dx, w);
                let row = &mut col[((i * k + ky) * k + kx) * np..][..np];
                for y in y0..y1 {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = sy as usize * w;
                    let d = (y - y0) * w;
                    row[d + x0..d + x1].copy_from_slice(&src[(s as isize + x0 as isize + dx) as usize..][..x1 - x0]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx`.
fn col2im(col: &[f64], [ci, h, w]: [usize; 3], k: usize, y0: usize, y1: usize, dx: &mut [f64]) {
    let np = (y1 - y0) * w;
    let r = (k / 2) as isize;
    for i in 0..ci {
        let dst = &mut dx[i * h * w..(i + 1) * h * w];
        for ky in 0..k {
            let dy = ky as isize - r;
            for kx in 0..k {
                let ddx = kx as isize - r;
                let (x0, x1) = shifted_range(ddx, w);
                let row = &col[((i * k + ky) * k + kx) * np..][..np];
                for y in y0..y1 {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = (sy as usize * w) as isize + x0 as isize + ddx;
                    let d = (y - y0) * w;
                    for (o, v) in dst[s as usize..][..x1 - x0].iter_mut().zip(&row[d + x0..d + x1]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(&mut out, a, b, m, k, n);
    out
}

/// Valid output range for a shift of `d` along an axis of length `len`.
#[inline]
fn shifted_range(d: isize, len: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(lo as isize) as usize;
    (lo, hi)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, shape: [usize; 3], value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(shape[0] * shape[1] * shape[2], value.len());
        self.nodes.push(Node { shape, value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 3] {
        self.nodes[id].shape
    }

    /// A constant input `[C, H, W]`; flat vectors use `[1, 1, n]`.
    pub fn input(&mut self, shape: [usize; 3], value: Vec<f64>) -> NodeId {
        self.push(shape, value, Op::Leaf)
    }

    /// A parameter used directly as a field (gradients flow to the parameter).
    pub fn param_node(&mut self, p: ParamId, shape: [usize; 3]) -> NodeId {
        let v = self.params[p].data.clone();
        self.push(shape, v, Op::Param(p))
    }

    /// Same-padded, stride-1 convolution with an odd square kernel.
    pub fn conv(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let shape = self.nodes[x].shape;
        let [ci, h, wd] = shape;
        let wt = &self.params[w];
        let (co, k) = (wt.shape[0], wt.shape[2]);
        debug_assert_eq!(wt.shape[1], ci);
        let plane = h * wd;
        let xin = &self.nodes[x].value;
        let mut out = vec![0.0; co * plane];
        for o in 0..co {
            out[o * plane..(o + 1) * plane].fill(self.params[b].data[o]);
        }
        let kk = ci * k * k;
        if k == 1 {
            gemm(co, ci, plane, &wt.data, (ci, 1), xin, (plane, 1), 1.0, &mut out, (plane, 1));
        } else {
            let mut col = Vec::new();
            for (y0, y1) in conv_chunks(h, wd) {
                im2col(xin, shape, k, y0, y1, &mut col);
                let np = (y1 - y0) * wd;
                gemm(co, kk, np, &wt.data, (kk, 1), &col, (np, 1), 1.0, &mut out[y0 * wd..], (plane, 1));
            }
        }
        self.push([co, h, wd], out, Op::Conv { x, w, b, k })
    }

    /// `W x + b` on a flat vector.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let wt = &self.params[w];
        let (m, n) = (wt.shape[0], wt.shape[1]);
        let xv = &self.nodes[x].value;
        debug_assert_eq!(xv.len(), n);
        let out = (0..m)
            .map(|i| {
                self.params[b].data[i]
                    + wt.data[i * n..(i + 1) * n].iter().zip(xv).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        self.push([1, 1, m], out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a].shape, self.nodes[b].shape);
        let out = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].shape;
        self.push(shape, out, Op::Add(a, b))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.nodes[x].shape;
        self.push(shape, out, Op::Silu(x))
    }

    /// Group normalization with a per-channel affine.
    pub fn group_norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId, groups: usize, eps: f64) -> NodeId {
        let [c, h, w] = self.nodes[x].shape;
        debug_assert_eq!(c % groups, 0);
        let per = (c / groups) * h * w;
        let xv = &self.nodes[x].value;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; groups];
        for g in 0..groups {
            let seg = &xv[g * per..(g + 1) * per];
            let mean = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let rs = 1.0 / math::sqrt(var + eps);
            rstd[g] = rs;
            for (o, v) in xhat[g * per..(g + 1) * per].iter_mut().zip(seg) {
                *o = (v - mean) * rs;
            }
        }
        let plane = h * w;
        let (gm, bt) = (&self.params[gamma].data, &self.params[beta].data);
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * gm[i / plane] + bt[i / plane])
            .collect();
        self.push(
            [c, h, w],
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
        )
    }

    /// Feature-wise modulation `x * (1 + f[c]) + f[C + c]`.
    pub fn film(&mut self, x: NodeId, f: NodeId) -> NodeId {
        let [c, h, w] = self.nodes[x].shape;
        let plane = h * w;
        let fv = &self.nodes[f].value;
        debug_assert_eq!(fv.len(), 2 * c);
        let out = self.nodes[x]
            .value
            .iter()
            .enumerate()
            .map(|(i, v)| v * (1.0 + fv[i / plane]) + fv[c + i / plane])
            .collect();
        self.push([c, h, w], out, Op::Film { x, f })
    }

    pub fn avg_pool(&mut self, x: NodeId) -> NodeId {
        let [c, h, w] = self.nodes[x].shape;
        let (h2, w2) = (h / 2, w / 2);
        let xv = &self.nodes[x].value;
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    out[(ch * h2 + y) * w2 + xx] = 0.25 * (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]);
                }
            }
        }
        self.push([c, h2, w2], out, Op::AvgPool(x))
    }

    pub fn upsample(&mut self, x: NodeId) -> NodeId {
        let [c, h, w] = self.nodes[x].shape;
        let xv = &self.nodes[x].value;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = xv[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push([c, h2, w2], out, Op::Upsample(x))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let [ca, h, w] = self.nodes[a].shape;
        let [cb, hb, wb] = self.nodes[b].shape;
        debug_assert_eq!((h, w), (hb, wb));
        let mut out = Vec::with_capacity((ca + cb) * h * w);
        out.extend_from_slice(&self.nodes[a].value);
        out.extend_from_slice(&self.nodes[b].value);
        self.push([ca + cb, h, w], out, Op::Concat(a, b))
    }

    /// Single-head self-attention over spatial positions, with output
    /// projection `wo`/`bo`. Weights are `[C, C]`.
    pub fn attention(&mut self, x: NodeId, wq: ParamId, wk: ParamId, wv: ParamId, wo: ParamId, bo: ParamId) -> NodeId {
        let [c, h, w] = self.nodes[x].shape;
        let n = h * w;
        let xv = &self.nodes[x].value;
        let p = self.params;
        let q = matmul(&p[wq].data, xv, c, c, n);
        let k = matmul(&p[wk].data, xv, c, c, n);
        let v = matmul(&p[wv].data, xv, c, c, n);
        let scale = 1.0 / math::sqrt(c as f64);
        // scores[i, j] = q[:, i] . k[:, j]
        let qt = transpose(&q, c, n);
        let mut probs = matmul(&qt, &k, n, c, n);
        for row in probs.chunks_mut(n) {
            let mut mx = f64::NEG_INFINITY;
            for s in row.iter_mut() {
                *s *= scale;
                mx = mx.max(*s);
            }
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = math::exp(*s - mx);
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
        }
        // mixed[:, i] = sum_j probs[i, j] v[:, j]  ==  v @ probs^T
        let pt = transpose(&probs, n, n);
        let mixed = matmul(&v, &pt, c, n, n);
        let mut out = matmul(&p[wo].data, &mixed, c, c, n);
        for ch in 0..c {
            let b = p[bo].data[ch];
            for o in &mut out[ch * n..(ch + 1) * n] {
                *o += b;
            }
        }
        self.push(
            [c, h, w],
            out,
            Op::Attention(AttnCache {
                x,
                wq,
                wk,
                wv,
                wo,
                bo,
                q,
                k,
                v,
                probs,
                mixed,
            }),
        )
    }

    /// Back-propagate `grad_out` from node `out`, accumulating parameter
    /// gradients into `param_grads` (shaped like the parameter slice).
    pub fn backward(&self, out: NodeId, grad_out: Vec<f64>, param_grads: &mut [Vec<f64>]) {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(grad_out);
        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    for (a, b) in param_grads[*p].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut grads, *a, &g);
                    add_into(&mut grads, *b, &g);
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[*x].value;
                    let d: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| {
                            let s = sigmoid(v);
                            g * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    add_into(&mut grads, *x, &d);
                }
                Op::Linear { x, w, b } => {
                    let wt = &self.params[*w];
                    let (m, n) = (wt.shape[0], wt.shape[1]);
                    let xv = &self.nodes[*x].value;
                    let mut dx = vec![0.0; n];
                    for i in 0..m {
                        let gi = g[i];
                        param_grads[*b][i] += gi;
                        let gw = &mut param_grads[*w][i * n..(i + 1) * n];
                        for j in 0..n {
                            gw[j] += gi * xv[j];
                            dx[j] += gi * wt.data[i * n + j];
                        }
                    }
                    add_into(&mut grads, *x, &dx);
                }
                Op::Conv { x, w, b, k } => {
                    let dx = self.conv_backward(*x, *w, *b, *k, node.shape, &g, param_grads);
                    add_into(&mut grads, *x, &dx);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let [c, h, w] = node.shape;
                    let plane = h * w;
                    let per = (c / groups) * plane;
                    let gm = &self.params[*gamma].data;
                    let mut dx = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        param_grads[*gamma][i / plane] += g[i] * xhat[i];
                        param_grads[*beta][i / plane] += g[i];
                    }
                    for grp in 0..*groups {
                        let r = grp * per..(grp + 1) * per;
                        let dxh: Vec<f64> = r.clone().map(|i| g[i] * gm[i / plane]).collect();
                        let m1 = dxh.iter().sum::<f64>() / per as f64;
                        let m2 = dxh.iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / per as f64;
                        for (j, i) in r.enumerate() {
                            dx[i] = rstd[grp] * (dxh[j] - m1 - xhat[i] * m2);
                        }
                    }
                    add_into(&mut grads, *x, &dx);
                }
                Op::Film { x, f } => {
                    let [c, h, w] = node.shape;
                    let plane = h * w;
                    let xv = &self.nodes[*x].value;
                    let fv = &self.nodes[*f].value;
                    let mut df = vec![0.0; 2 * c];
                    let dx: Vec<f64> = (0..g.len())
                        .map(|i| {
                            let ch = i / plane;
                            df[ch] += g[i] * xv[i];
                            df[c + ch] += g[i];
                            g[i] * (1.0 + fv[ch])
                        })
                        .collect();
                    add_into(&mut grads, *x, &dx);
                    add_into(&mut grads, *f, &df);
                }
                Op::AvgPool(x) => {
                    let [c, h, w] = self.nodes[*x].shape;
                    let (h2, w2) = (h / 2, w / 2);
                    let mut dx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                let gv = 0.25 * g[(ch * h2 + y) * w2 + xx];
                                let base = ch * h * w + 2 * y * w + 2 * xx;
                                dx[base] += gv;
                                dx[base + 1] += gv;
                                dx[base + w] += gv;
                                dx[base + w + 1] += gv;
                            }
                        }
                    }
                    add_into(&mut grads, *x, &dx);
                }
                Op::Upsample(x) => {
                    let [c, h, w] = self.nodes[*x].shape;
                    let (h2, w2) = (2 * h, 2 * w);
                    let mut dx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * h2 + y) * w2 + xx];
                            }
                        }
                    }
                    add_into(&mut grads, *x, &dx);
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[*a].value.len();
                    add_into(&mut grads, *a, &g[..na]);
                    add_into(&mut grads, *b, &g[na..]);
                }
                Op::Attention(cache) => {
                    let dx = self.attention_backward(cache, node.shape, &g, param_grads);
                    add_into(&mut grads, cache.x, &dx);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: NodeId,
        w: ParamId,
        b: ParamId,
        k: usize,
        out_shape: [usize; 3],
        g: &[f64],
        param_grads: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let shape = self.nodes[x].shape;
        let [ci, h, wd] = shape;
        let co = out_shape[0];
        let plane = h * wd;
        let xin = &self.nodes[x].value;
        let wt = &self.params[w].data;
        let kk = ci * k * k;
        for o in 0..co {
            param_grads[b][o] += g[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
        let mut dx = vec![0.0; ci * plane];
        if k == 1 {
            gemm(co, plane, ci, g, (plane, 1), xin, (1, plane), 1.0, &mut param_grads[w], (ci, 1));
            gemm(ci, co, plane, wt, (1, ci), g, (plane, 1), 0.0, &mut dx, (plane, 1));
            return dx;
        }
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        for (y0, y1) in conv_chunks(h, wd) {
            let np = (y1 - y0) * wd;
            im2col(xin, shape, k, y0, y1, &mut col);
            let gc = &g[y0 * wd..];
            gemm(co, np, kk, gc, (plane, 1), &col, (1, np), 1.0, &mut param_grads[w], (kk, 1));
            dcol.clear();
            dcol.resize(kk * np, 0.0);
            gemm(kk, co, np, wt, (1, kk), gc, (plane, 1), 0.0, &mut dcol, (np, 1));
            col2im(&dcol, shape, k, y0, y1, &mut dx);
        }
        dx
    }

    fn attention_backward(&self, a: &AttnCache, shape: [usize; 3], g: &[f64], param_grads: &mut [Vec<f64>]) -> Vec<f64> {
        let [c, h, w] = shape;
        let n = h * w;
        let p = self.params;
        let xv = &self.nodes[a.x].value;
        let scale = 1.0 / math::sqrt(c as f64);
        for ch in 0..c {
            param_grads[a.bo][ch] += g[ch * n..(ch + 1) * n].iter().sum::<f64>();
        }
        // out = wo @ mixed
        let mixed_t = transpose(&a.mixed, c, n);
        matmul_acc(&mut param_grads[a.wo], g, &mixed_t, c, n, c);
        let wo_t = transpose(&p[a.wo].data, c, c);
        let d_mixed = matmul(&wo_t, g, c, c, n);
        // mixed = v @ probs^T
        let d_v = matmul(&d_mixed, &a.probs, c, n, n);
        let dmt = transpose(&d_mixed, c, n);
        let mut d_scores = matmul(&dmt, &a.v, n, c, n); // d probs[i, j] = dmixed[:, i] . v[:, j]
        for (row, prow) in d_scores.chunks_mut(n).zip(a.probs.chunks(n)) {
            let dot: f64 = row.iter().zip(prow).map(|(d, p)| d * p).sum();
            for (d, p) in row.iter_mut().zip(prow) {
                *d = p * (*d - dot) * scale;
            }
        }
        // scores = q^T k
        let d_q = matmul(&a.k, &transpose(&d_scores, n, n), c, n, n);
        let d_k = matmul(&a.q, &d_scores, c, n, n);
        let xt = transpose(xv, c, n);
        let mut dx = vec![0.0; c * n];
        for (wid, d) in [(a.wq, &d_q), (a.wk, &d_k), (a.wv, &d_v)] {
            matmul_acc(&mut param_grads[wid], d, &xt, c, n, c);
            let wt = transpose(&p[wid].data, c, c);
            matmul_acc(&mut dx, &wt, d, c, c, n);
        }
        dx
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}
