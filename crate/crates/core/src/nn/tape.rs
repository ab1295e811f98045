use std::collections::HashMap;

use super::conv::{col2im_add, gemm, im2col, ConvGeom};
use super::{ParamId, ParamStore, Tensor};

/// Node handle on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Concat(Vec<Var>),
    Mean(Vec<Var>),
    ChannelScale {
        x: Var,
        factors: Vec<f64>,
    },
    Upsample {
        x: Var,
    },
    SoftmaxFg(Var),
    BceLogits {
        x: Var,
        target: Vec<f64>,
    },
    BceProb {
        p: Var,
        target: Vec<f64>,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for one reverse pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one scalar with respect to every node that needs them.
pub struct Gradients {
    node: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.node[v.0].as_deref()
    }

    /// Parameter gradients, one entry per distinct parameter touched.
    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

fn sigmoid(d: f64) -> f64 {
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

fn softplus(d: f64) -> f64 {
    d.max(0.0) + (-d.abs()).exp().ln_1p()
}

/// Source index pairs and weights for half-pixel bilinear resampling.
pub(crate) fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; `requires_grad` makes its gradient available after backward.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// The tape node of a parameter; repeated calls return the same node.
    /// A tape must only ever see parameters from one store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], c, "conv weight expects {} input channels, got {c}", ws[1]);
        assert_eq!((ws[2], ws[3]), (geom.kernel, geom.kernel));
        let o = ws[0];
        let (ho, wo) = (geom.out_size(h), geom.out_size(wd));
        let kk = c * geom.kernel * geom.kernel;
        let hw = ho * wo;
        let mut cols = vec![0.0; n * kk * hw];
        let mut out = vec![0.0; n * o * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let col = &mut cols[s * kk * hw..(s + 1) * kk * hw];
                im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], c, h, wd, geom, col);
                gemm(o, kk, hw, wv, false, col, false, 0.0, &mut out[s * o * hw..(s + 1) * o * hw]);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for s in 0..n {
                    for oc in 0..o {
                        let base = (s * o + oc) * hw;
                        out[base..base + hw].iter_mut().for_each(|v| *v += bv[oc]);
                    }
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(
            Tensor::from_vec(&[n, o, ho, wo], out),
            Op::Conv { x, w, b, geom, cols },
            ng,
        )
    }

    /// Batch normalisation. With `running = None` the batch statistics are used
    /// and returned as `(mean, biased variance)`; otherwise the given running
    /// statistics are applied as a fixed affine map.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let m = (n * hw) as f64;
        let xv = self.value(x).data();
        let (mean, var) = match running {
            Some((mu, var)) => (mu.to_vec(), var.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xv[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut v = 0.0;
                    for b in 0..n {
                        v += xv[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|t| (t - mu) * (t - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = v / m;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let t = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = t;
                    out[i] = g[ch] * t + be[ch];
                }
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        let v = self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
            ng,
        );
        (v, mean, var)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        // NaN passes through so divergence stays visible.
        t.data_mut().iter_mut().filter(|v| **v < 0.0).for_each(|v| *v = 0.0);
        let ng = self.ng(&[x]);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut t = self.value(a).clone();
        t.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(x, y)| *x += y);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut t = self.value(a).clone();
        t.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(x, y)| *x -= y);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Sub(a, b), ng)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let channels: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pn, pc, ph, pw) = self.value(*p).dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat operands differ outside channels");
                pc
            })
            .collect();
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (p, &pc) in parts.iter().zip(&channels) {
                let d = self.value(*p).data();
                out.extend_from_slice(&d[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let ng = self.ng(parts);
        self.push(Tensor::from_vec(&[n, total, h, w], out), Op::Concat(parts.to_vec()), ng)
    }

    /// Elementwise mean of equally shaped operands.
    pub fn mean(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut t = self.value(parts[0]).clone();
        for p in &parts[1..] {
            assert_eq!(self.value(*p).shape(), t.shape());
            t.data_mut()
                .iter_mut()
                .zip(self.value(*p).data())
                .for_each(|(a, b)| *a += b);
        }
        let k = parts.len() as f64;
        t.data_mut().iter_mut().for_each(|v| *v /= k);
        let ng = self.ng(parts);
        self.push(t, Op::Mean(parts.to_vec()), ng)
    }

    /// Multiplies channel `c` of sample `n` by `factors[n·C + c]`.
    pub fn channel_scale(&mut self, x: Var, factors: Vec<f64>) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(factors.len(), n * c);
        let hw = h * w;
        let mut t = self.value(x).clone();
        for (k, f) in factors.iter().enumerate() {
            t.data_mut()[k * hw..(k + 1) * hw].iter_mut().for_each(|v| *v *= f);
        }
        let ng = self.ng(&[x]);
        self.push(t, Op::ChannelScale { x, factors }, ng)
    }

    /// Bilinear resampling (half-pixel centres) to `(out_h, out_w)`.
    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for k in 0..n * c {
            let src = &xv[k * h * w..(k + 1) * h * w];
            let dst = &mut out[k * out_h * out_w..(k + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[n, c, out_h, out_w], out), Op::Upsample { x }, ng)
    }

    /// Foreground probability of two-class logits: softmax channel 1.
    pub fn softmax_fg(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(c, 2, "softmax_fg expects two-class logits");
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * hw];
        for b in 0..n {
            for i in 0..hw {
                out[b * hw + i] = sigmoid(xv[(2 * b + 1) * hw + i] - xv[2 * b * hw + i]);
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[n, 1, h, w], out), Op::SoftmaxFg(x), ng)
    }

    /// Mean binary cross-entropy computed from two-class logits.
    pub fn bce_logits(&mut self, x: Var, target: &[f64]) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(c, 2);
        let hw = h * w;
        assert_eq!(target.len(), n * hw);
        let xv = self.value(x).data();
        let mut s = 0.0;
        for b in 0..n {
            for i in 0..hw {
                let d = xv[(2 * b + 1) * hw + i] - xv[2 * b * hw + i];
                let y = target[b * hw + i];
                s += softplus(d) - y * d;
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::scalar(s / (n * hw) as f64),
            Op::BceLogits {
                x,
                target: target.to_vec(),
            },
            ng,
        )
    }

    /// Mean binary cross-entropy of probabilities clamped to `[eps, 1 − eps]`.
    pub fn bce_prob(&mut self, p: Var, target: &[f64], eps: f64) -> Var {
        let pv = self.value(p).data();
        assert_eq!(pv.len(), target.len());
        let s: f64 = pv
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                let q = p.clamp(eps, 1.0 - eps);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum();
        let ng = self.ng(&[p]);
        self.push(
            Tensor::scalar(s / pv.len() as f64),
            Op::BceProb {
                p,
                target: target.to_vec(),
                eps,
            },
            ng,
        )
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| {
                grads[v.0]
                    .as_ref()
                    .map(|g| (id, Tensor::from_vec(self.value(v).shape(), g.clone())))
            })
            .collect();
        params.sort_by_key(|(id, _)| *id);
        Gradients {
            node: grads,
            params,
        }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Conv { x, w, b, geom, cols } => {
                let (n, c, h, wd) = self.value(*x).dims4();
                let (_, o, ho, wo) = nodes[i].value.dims4();
                let kk = c * geom.kernel * geom.kernel;
                let hw = ho * wo;
                if wants(*w) {
                    acc(grads, *w, &mut |dw| {
                        for s in 0..n {
                            gemm(
                                o,
                                hw,
                                kk,
                                &g[s * o * hw..(s + 1) * o * hw],
                                false,
                                &cols[s * kk * hw..(s + 1) * kk * hw],
                                true,
                                1.0,
                                dw,
                            );
                        }
                    });
                }
                if let Some(b) = b {
                    if wants(*b) {
                        acc(grads, *b, &mut |db| {
                            for s in 0..n {
                                for oc in 0..o {
                                    let base = (s * o + oc) * hw;
                                    db[oc] += g[base..base + hw].iter().sum::<f64>();
                                }
                            }
                        });
                    }
                }
                if wants(*x) {
                    let wv = self.value(*w).data();
                    let mut dcols = vec![0.0; kk * hw];
                    acc(grads, *x, &mut |dx| {
                        for s in 0..n {
                            gemm(kk, o, hw, wv, true, &g[s * o * hw..(s + 1) * o * hw], false, 0.0, &mut dcols);
                            col2im_add(&dcols, c, h, wd, *geom, &mut dx[s * c * h * wd..(s + 1) * c * h * wd]);
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let m = (n * hw) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for k in base..base + hw {
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                        }
                    }
                }
                if wants(*gamma) {
                    acc(grads, *gamma, &mut |d| d.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b));
                }
                if wants(*beta) {
                    acc(grads, *beta, &mut |d| d.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b));
                }
                if wants(*x) {
                    acc(grads, *x, &mut |dx| {
                        for b in 0..n {
                            for ch in 0..c {
                                let base = (b * c + ch) * hw;
                                let k0 = gam[ch] * inv_std[ch];
                                for k in base..base + hw {
                                    dx[k] += if *batch_stats {
                                        k0 * (g[k] - sum_g[ch] / m - xhat[k] * sum_gx[ch] / m)
                                    } else {
                                        k0 * g[k]
                                    };
                                }
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let out = nodes[i].value.data();
                acc(grads, *x, &mut |dx| {
                    for ((d, &o), &gv) in dx.iter_mut().zip(out).zip(g) {
                        if o > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        acc(grads, v, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(grads, *a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
                if wants(*b) {
                    acc(grads, *b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
                }
            }
            Op::Concat(parts) => {
                let (n, total, h, w) = nodes[i].value.dims4();
                let hw = h * w;
                let mut off = 0;
                for p in parts {
                    let pc = self.value(*p).dims4().1;
                    if wants(*p) {
                        acc(grads, *p, &mut |d| {
                            for b in 0..n {
                                let src = &g[(b * total + off) * hw..(b * total + off + pc) * hw];
                                d[b * pc * hw..(b + 1) * pc * hw]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(x, y)| *x += y);
                            }
                        });
                    }
                    off += pc;
                }
            }
            Op::Mean(parts) => {
                let k = parts.len() as f64;
                for p in parts {
                    if wants(*p) {
                        acc(grads, *p, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y / k));
                    }
                }
            }
            Op::ChannelScale { x, factors } => {
                let hw = g.len() / factors.len();
                acc(grads, *x, &mut |d| {
                    for (k, f) in factors.iter().enumerate() {
                        d[k * hw..(k + 1) * hw]
                            .iter_mut()
                            .zip(&g[k * hw..(k + 1) * hw])
                            .for_each(|(x, y)| *x += y * f);
                    }
                });
            }
            Op::Upsample { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (_, _, out_h, out_w) = nodes[i].value.dims4();
                let ty = bilinear_taps(h, out_h);
                let tx = bilinear_taps(w, out_w);
                acc(grads, *x, &mut |d| {
                    for k in 0..n * c {
                        let src = &g[k * out_h * out_w..(k + 1) * out_h * out_w];
                        let dst = &mut d[k * h * w..(k + 1) * h * w];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let gv = src[oy * out_w + ox];
                                dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                                dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                                dst[y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    }
                });
            }
            Op::SoftmaxFg(x) => {
                let (n, _, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let p = nodes[i].value.data();
                acc(grads, *x, &mut |d| {
                    for b in 0..n {
                        for k in 0..hw {
                            let pv = p[b * hw + k];
                            let t = g[b * hw + k] * pv * (1.0 - pv);
                            d[(2 * b + 1) * hw + k] += t;
                            d[2 * b * hw + k] -= t;
                        }
                    }
                });
            }
            Op::BceLogits { x, target } => {
                let (n, _, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let xv = self.value(*x).data();
                let scale = g[0] / (n * hw) as f64;
                acc(grads, *x, &mut |d| {
                    for b in 0..n {
                        for k in 0..hw {
                            let dd = xv[(2 * b + 1) * hw + k] - xv[2 * b * hw + k];
                            let t = (sigmoid(dd) - target[b * hw + k]) * scale;
                            d[(2 * b + 1) * hw + k] += t;
                            d[2 * b * hw + k] -= t;
                        }
                    }
                });
            }
            Op::BceProb { p, target, eps } => {
                let pv = self.value(*p).data();
                let scale = g[0] / pv.len() as f64;
                acc(grads, *p, &mut |d| {
                    for ((dv, &pp), &y) in d.iter_mut().zip(pv).zip(target) {
                        if pp > *eps && pp < 1.0 - eps {
                            *dv += scale * (-(y / pp) + (1.0 - y) / (1.0 - pp));
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Checks d(loss)/d(input) of `build` against central differences.
    fn check_input_grad(shape: &[usize], build: &dyn Fn(&mut Tape, Var) -> Var) {
        let x0 = Tensor::from_vec(shape, lcg(7, shape.iter().product()));
        let mut tape = Tape::new();
        let x = tape.input(x0.clone(), true);
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.of(x).unwrap().to_vec();
        let h = 1e-6;
        for k in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xt = x0.clone();
                xt.data_mut()[k] += delta;
                let mut t = Tape::new();
                let v = t.input(xt, false);
                let l = build(&mut t, v);
                t.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - analytic[k]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "component {k}: fd {fd} analytic {}",
                analytic[k]
            );
        }
    }

    #[test]
    fn batchnorm_relu_concat_input_gradient() {
        check_input_grad(&[3, 2, 3, 3], &|t, x| {
            let mut ps = ParamStore::new();
            let g = ps.add("g", Tensor::from_vec(&[2], vec![1.3, 0.7]));
            let be = ps.add("b", Tensor::from_vec(&[2], vec![0.1, -0.3]));
            let sel = ps.add(
                "sel",
                Tensor::from_vec(&[2, 4, 1, 1], vec![1.0, 0.5, -0.5, 0.2, -1.0, 0.3, 0.9, 0.1]),
            );
            let gv = t.param(&ps, g);
            let bv = t.param(&ps, be);
            let (y, _, _) = t.batch_norm(x, gv, bv, None, 1e-5);
            let r = t.relu(y);
            let s = t.sub(r, x);
            let c = t.concat(&[s, x]);
            let c = t.channel_scale(c, vec![0.5, 1.0, 0.0, 2.0, 1.0, 1.0, 1.0, 1.0, 0.25, 0.5, 3.0, 1.0]);
            let sv = t.param(&ps, sel);
            let l = t.conv2d(c, sv, None, ConvGeom::new(1, 1, 0, 1));
            let p = t.softmax_fg(l);
            let m = t.mean(&[p, p]);
            let target: Vec<f64> = (0..27).map(|i| (i % 3 == 0) as u8 as f64).collect();
            t.bce_prob(m, &target, 1e-9)
        });
    }

    #[test]
    fn shared_parameter_gradient_accumulates() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]));
        let mut t = Tape::new();
        let x = t.input(Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 3.0]), false);
        let a = t.param(&ps, w);
        let b = t.param(&ps, w);
        assert_eq!(a, b);
        let y1 = t.conv2d(x, a, None, ConvGeom::new(1, 1, 0, 1));
        let y2 = t.conv2d(y1, b, None, ConvGeom::new(1, 1, 0, 1));
        let tgt = t.input(Tensor::zeros(&[1, 1, 1, 2]), false);
        let cat = t.concat(&[y2, tgt]);
        let loss = t.bce_logits(cat, &[0.0, 0.0]);
        let g = t.backward(loss);
        assert_eq!(g.params().len(), 1);
        // y2 = w² x, d = -w² x; loss = mean softplus(d); dL/dw = mean(-σ(d)·2wx)
        let expect: f64 = [1.0f64, 3.0]
            .iter()
            .map(|&x| {
                let d: f64 = -4.0 * x;
                -(1.0 / (1.0 + (-d).exp())) * 4.0 * x
            })
            .sum::<f64>()
            / 2.0;
        assert!((g.params()[0].1.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn bilinear_taps_identity_and_constant() {
        for (i, &(a, b, f)) in bilinear_taps(6, 6).iter().enumerate() {
            assert_eq!((a, f), (i, 0.0));
            assert!(b == i || b == i + 1);
        }
    }
}
