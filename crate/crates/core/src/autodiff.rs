//! A small reverse-mode tape over flat `f64` tensors.
//!
//! Each op stores what its backward pass needs; gradients are accumulated in
//! reverse insertion order, so results are deterministic. Only the handful of
//! ops the risk model uses are provided.

use std::collections::HashMap;

use crate::grid::{sample_with_grad, splat};
use crate::metrics::{jacobian_det_planes, Reduction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    /// `x[rows, cols] + bias[cols]`.
    AddRowBias { x: Var, bias: Var, cols: usize },
    /// `x[c, hw] + bias[c]`.
    AddChannelBias { x: Var, bias: Var, hw: usize },
    Relu(Var),
    Sigmoid(Var),
    /// `x[rows, inp] · wᵀ + b`, `w[out, inp]`.
    Linear { x: Var, w: Var, b: Var, rows: usize, inp: usize, out: usize },
    /// `a[m, k] · b[k, n]`.
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    SoftmaxRows { x: Var, cols: usize },
    LayerNormRows { x: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    SliceCols { x: Var, rows: usize, cols: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    Concat(Vec<Var>),
    Conv2d { x: Var, w: Var, b: Var, cin: usize, cout: usize, h: usize, wd: usize, k: usize },
    InstanceNorm { x: Var, hw: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var, hw: usize },
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    /// Channel-wise pull warp of `feat[c, h, w]` by `field[2, h, w]`.
    Warp { feat: Var, field: Var, c: usize, h: usize, w: usize },
    Smoothness { field: Var, h: usize, w: usize, reduction: Reduction },
    JdPenalty { field: Var, h: usize, w: usize },
    Mse(Var, Var),
    Sum(Var),
    MeanRows { x: Var, rows: usize, cols: usize },
    /// `base + cumsum(relu(hazards))`.
    CumHazard { base: Var, hazards: Var },
    MaskedBce { prob: Var, y: Vec<f64>, delta: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Recorded computation. Values are read with [`Tape::value`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub const BCE_CLAMP: f64 = 1e-7;
const NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn len(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * s).collect();
        self.push(value, Op::Scale(a, s))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let cols = self.len(bias);
        let b = self.value(bias);
        let value = self.value(x).iter().enumerate().map(|(i, v)| v + b[i % cols]).collect();
        self.push(value, Op::AddRowBias { x, bias, cols })
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let c = self.len(bias);
        let hw = self.len(x) / c;
        let b = self.value(bias);
        let value = self.value(x).iter().enumerate().map(|(i, v)| v + b[i / hw]).collect();
        self.push(value, Op::AddChannelBias { x, bias, hw })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| logistic(x)).collect();
        self.push(value, Op::Sigmoid(a))
    }

    /// `y = x·wᵀ + b` for `rows` input rows; `w` is `[out, inp]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var, rows: usize) -> Var {
        let out = self.len(b);
        let inp = self.len(w) / out;
        assert_eq!(self.len(x), rows * inp, "linear input size");
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut value = vec![0.0; rows * out];
        for r in 0..rows {
            let xr = &xv[r * inp..(r + 1) * inp];
            for o in 0..out {
                let wr = &wv[o * inp..(o + 1) * inp];
                value[r * out + o] = bv[o] + dot(xr, wr);
            }
        }
        self.push(value, Op::Linear { x, w, b, rows, inp, out })
    }

    pub fn matmul(&mut self, a: Var, b: Var, m: usize, k: usize, n: usize) -> Var {
        assert_eq!(self.len(a), m * k);
        assert_eq!(self.len(b), k * n);
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                for j in 0..n {
                    value[i * n + j] += aip * bv[p * n + j];
                }
            }
        }
        self.push(value, Op::MatMul { a, b, m, k, n })
    }

    pub fn transpose(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                value[c * rows + r] = xv[r * cols + c];
            }
        }
        self.push(value, Op::Transpose { x, rows, cols })
    }

    pub fn softmax_rows(&mut self, x: Var, cols: usize) -> Var {
        let value = self.value(x).chunks(cols).flat_map(softmax).collect();
        self.push(value, Op::SoftmaxRows { x, cols })
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let cols = self.len(gamma);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(self.len(x));
        let mut inv_std = Vec::new();
        for row in self.value(x).chunks(cols) {
            let (mean, inv) = moments(row);
            inv_std.push(inv);
            xhat.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let value = xhat.iter().enumerate().map(|(i, xh)| xh * g[i % cols] + b[i % cols]).collect();
        self.push(value, Op::LayerNormRows { x, gamma, beta, cols, xhat, inv_std })
    }

    pub fn slice_cols(&mut self, x: Var, rows: usize, start: usize, len: usize) -> Var {
        let cols = self.len(x) / rows;
        let xv = self.value(x);
        let value = (0..rows).flat_map(|r| xv[r * cols + start..r * cols + start + len].to_vec()).collect();
        self.push(value, Op::SliceCols { x, rows, cols, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var], rows: usize) -> Var {
        let parts: Vec<(Var, usize)> = parts.iter().map(|&p| (p, self.len(p) / rows)).collect();
        let mut value = Vec::new();
        for r in 0..rows {
            for &(p, c) in &parts {
                value.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        self.push(value, Op::ConcatCols { parts, rows })
    }

    /// Flat concatenation; on channel-major maps this stacks channels.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let value = parts.iter().flat_map(|&p| self.value(p).to_vec()).collect();
        self.push(value, Op::Concat(parts.to_vec()))
    }

    /// Zero-padded "same" convolution with an odd square kernel.
    /// `w` is `[cout, cin, k, k]`, `b` is `[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, cin: usize, h: usize, wd: usize) -> Var {
        let cout = self.len(b);
        let k = ((self.len(w) / (cout * cin)) as f64).sqrt().round() as usize;
        assert_eq!(cout * cin * k * k, self.len(w), "conv weight size");
        assert_eq!(self.len(x), cin * h * wd, "conv input size");
        let value = conv_forward(self.value(x), self.value(w), self.value(b), cin, cout, h, wd, k);
        self.push(value, Op::Conv2d { x, w, b, cin, cout, h, wd, k })
    }

    /// Per-channel normalization over the spatial extent, no affine part.
    pub fn instance_norm(&mut self, x: Var, channels: usize) -> Var {
        let hw = self.len(x) / channels;
        let mut xhat = Vec::with_capacity(self.len(x));
        let mut inv_std = Vec::with_capacity(channels);
        for ch in self.value(x).chunks(hw) {
            let (mean, inv) = moments(ch);
            inv_std.push(inv);
            xhat.extend(ch.iter().map(|v| (v - mean) * inv));
        }
        self.push(xhat.clone(), Op::InstanceNorm { x, hw, xhat, inv_std })
    }

    /// 2×2 max pooling with stride 2 (trailing odd row/column dropped).
    pub fn max_pool2(&mut self, x: Var, c: usize, h: usize, w: usize) -> Var {
        let (value, argmax) = max_pool2(self.value(x), c, h, w);
        self.push(value, Op::MaxPool2 { x, argmax })
    }

    pub fn global_avg_pool(&mut self, x: Var, channels: usize) -> Var {
        let hw = self.len(x) / channels;
        let value = self.value(x).chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
        self.push(value, Op::GlobalAvgPool { x, hw })
    }

    pub fn global_max_pool(&mut self, x: Var, channels: usize) -> Var {
        let hw = self.len(x) / channels;
        let (value, argmax) = self
            .value(x)
            .chunks(hw)
            .enumerate()
            .map(|(c, ch)| {
                let (i, m) = ch.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
                (m, c * hw + i)
            })
            .unzip();
        self.push(value, Op::GlobalMaxPool { x, argmax })
    }

    pub fn warp(&mut self, feat: Var, field: Var, c: usize, h: usize, w: usize) -> Var {
        assert_eq!(self.len(feat), c * h * w, "warp feature size");
        assert_eq!(self.len(field), 2 * h * w, "warp field size");
        let n = h * w;
        let (fv, dv) = (self.value(feat), self.value(field));
        let mut value = Vec::with_capacity(c * n);
        for ch in 0..c {
            let plane = &fv[ch * n..(ch + 1) * n];
            value.extend(crate::grid::warp_plane(plane, h, w, &dv[..n], &dv[n..]));
        }
        self.push(value, Op::Warp { feat, field, c, h, w })
    }

    pub fn smoothness(&mut self, field: Var, h: usize, w: usize, reduction: Reduction) -> Var {
        let n = h * w;
        let f = self.value(field);
        let value = crate::metrics::smoothness_planes(&f[..n], &f[n..], h, w, reduction);
        self.push(vec![value], Op::Smoothness { field, h, w, reduction })
    }

    pub fn jd_penalty(&mut self, field: Var, h: usize, w: usize) -> Var {
        let n = h * w;
        let f = self.value(field);
        let det = jacobian_det_planes(&f[..n], &f[n..], h, w);
        let value = det.iter().map(|&d| (-d).max(0.0)).sum::<f64>() / n as f64;
        self.push(vec![value], Op::JdPenalty { field, h, w })
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "mse operand sizes");
        let value = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
        self.push(vec![value], Op::Mse(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().sum();
        self.push(vec![value], Op::Sum(a))
    }

    pub fn mean_rows(&mut self, x: Var, rows: usize) -> Var {
        let cols = self.len(x) / rows;
        let xv = self.value(x);
        let value = (0..cols).map(|c| (0..rows).map(|r| xv[r * cols + c]).sum::<f64>() / rows as f64).collect();
        self.push(value, Op::MeanRows { x, rows, cols })
    }

    pub fn cum_hazard(&mut self, base: Var, hazards: Var) -> Var {
        let b = self.value(base)[0];
        let mut acc = b;
        let value = self
            .value(hazards)
            .iter()
            .map(|&h| {
                acc += h.max(0.0);
                acc
            })
            .collect();
        self.push(value, Op::CumHazard { base, hazards })
    }

    pub fn masked_bce(&mut self, prob: Var, y: &[f64], delta: &[f64]) -> Var {
        let value = masked_bce_value(self.value(prob), y, delta);
        self.push(vec![value], Op::MaskedBce { prob, y: y.to_vec(), delta: delta.to_vec() })
    }

    /// Reverse pass from the scalar `root`; returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Scale(a, k) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g)),
            Op::AddRowBias { x, bias, cols } => {
                acc(*x, &mut |s| add_into(s, g));
                acc(*bias, &mut |s| g.iter().enumerate().for_each(|(i, g)| s[i % cols] += g));
            }
            Op::AddChannelBias { x, bias, hw } => {
                acc(*x, &mut |s| add_into(s, g));
                acc(*bias, &mut |s| g.iter().enumerate().for_each(|(i, g)| s[i / hw] += g));
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if av[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] * y[i] * (1.0 - y[i])));
            }
            Op::Linear { x, w, b, rows, inp, out } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                acc(*x, &mut |s| {
                    for r in 0..*rows {
                        for o in 0..*out {
                            let go = g[r * out + o];
                            for i in 0..*inp {
                                s[r * inp + i] += go * wv[o * inp + i];
                            }
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for r in 0..*rows {
                        for o in 0..*out {
                            let go = g[r * out + o];
                            for i in 0..*inp {
                                s[o * inp + i] += go * xv[r * inp + i];
                            }
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for r in 0..*rows {
                        for o in 0..*out {
                            s[o] += g[r * out + o];
                        }
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |s| {
                    for i in 0..*m {
                        for p in 0..*k {
                            s[i * k + p] += (0..*n).map(|j| g[i * n + j] * bv[p * n + j]).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for p in 0..*k {
                        for j in 0..*n {
                            s[p * n + j] += (0..*m).map(|i| av[i * k + p] * g[i * n + j]).sum::<f64>();
                        }
                    }
                });
            }
            Op::Transpose { x, rows, cols } => acc(*x, &mut |s| {
                for r in 0..*rows {
                    for c in 0..*cols {
                        s[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            Op::SoftmaxRows { x, cols } => {
                let y = &node.value;
                acc(*x, &mut |s| {
                    for (r, (yr, gr)) in y.chunks(*cols).zip(g.chunks(*cols)).enumerate() {
                        let inner = dot(yr, gr);
                        for c in 0..*cols {
                            s[r * cols + c] += yr[c] * (gr[c] - inner);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, gamma, beta, cols, xhat, inv_std } => {
                let gv = &nodes[gamma.0].value;
                acc(*gamma, &mut |s| g.iter().zip(xhat).enumerate().for_each(|(i, (g, xh))| s[i % cols] += g * xh));
                acc(*beta, &mut |s| g.iter().enumerate().for_each(|(i, g)| s[i % cols] += g));
                acc(*x, &mut |s| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let range = r * cols..(r + 1) * cols;
                        let gh: Vec<f64> = (0..*cols).map(|c| g[r * cols + c] * gv[c]).collect();
                        norm_backward(&gh, &xhat[range.clone()], *inv, &mut s[range]);
                    }
                });
            }
            Op::SliceCols { x, rows, cols, start, len } => acc(*x, &mut |s| {
                for r in 0..*rows {
                    for c in 0..*len {
                        s[r * cols + start + c] += g[r * len + c];
                    }
                }
            }),
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    acc(p, &mut |s| {
                        for r in 0..*rows {
                            for j in 0..c {
                                s[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    acc(p, &mut |s| add_into(s, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Conv2d { x, w, b, cin, cout, h, wd, k } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let (gx, gw, gb) = conv_backward(g, xv, wv, *cin, *cout, *h, *wd, *k);
                acc(*x, &mut |s| add_into(s, &gx));
                acc(*w, &mut |s| add_into(s, &gw));
                acc(*b, &mut |s| add_into(s, &gb));
            }
            Op::InstanceNorm { x, hw, xhat, inv_std } => acc(*x, &mut |s| {
                for (c, inv) in inv_std.iter().enumerate() {
                    let range = c * hw..(c + 1) * hw;
                    norm_backward(&g[range.clone()], &xhat[range.clone()], *inv, &mut s[range]);
                }
            }),
            Op::MaxPool2 { x, argmax } => acc(*x, &mut |s| {
                for (o, &src) in argmax.iter().enumerate() {
                    s[src] += g[o];
                }
            }),
            Op::GlobalAvgPool { x, hw } => acc(*x, &mut |s| {
                for (i, v) in s.iter_mut().enumerate() {
                    *v += g[i / hw] / *hw as f64;
                }
            }),
            Op::GlobalMaxPool { x, argmax } => acc(*x, &mut |s| {
                for (o, &src) in argmax.iter().enumerate() {
                    s[src] += g[o];
                }
            }),
            Op::Warp { feat, field, c, h, w } => {
                let n = h * w;
                let (fv, dv) = (&nodes[feat.0].value, &nodes[field.0].value);
                let mut gf = vec![0.0; c * n];
                let mut gd = vec![0.0; 2 * n];
                for y in 0..*h {
                    for x in 0..*w {
                        let i = y * w + x;
                        let xs = x as f64 + dv[i];
                        let ys = y as f64 + dv[n + i];
                        for ch in 0..*c {
                            let go = g[ch * n + i];
                            let plane = &fv[ch * n..(ch + 1) * n];
                            let (_, dx, dy) = sample_with_grad(plane, *h, *w, xs, ys);
                            gd[i] += go * dx;
                            gd[n + i] += go * dy;
                            splat(&mut gf[ch * n..(ch + 1) * n], *h, *w, xs, ys, go);
                        }
                    }
                }
                acc(*feat, &mut |s| add_into(s, &gf));
                acc(*field, &mut |s| add_into(s, &gd));
            }
            Op::Smoothness { field, h, w, reduction } => {
                let n = h * w;
                let f = &nodes[field.0].value;
                acc(*field, &mut |s| {
                    let (su, sv) = s.split_at_mut(n);
                    crate::metrics::smoothness_grad_planes(&f[..n], &f[n..], *h, *w, *reduction, g[0], su, sv);
                });
            }
            Op::JdPenalty { field, h, w } => {
                let n = h * w;
                let f = &nodes[field.0].value;
                acc(*field, &mut |s| {
                    let (su, sv) = s.split_at_mut(n);
                    crate::metrics::jd_penalty_grad_planes(&f[..n], &f[n..], *h, *w, g[0], su, sv);
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let k = 2.0 * g[0] / av.len() as f64;
                let d: Vec<f64> = av.iter().zip(bv).map(|(x, y)| k * (x - y)).collect();
                acc(*a, &mut |s| add_into(s, &d));
                acc(*b, &mut |s| s.iter_mut().zip(&d).for_each(|(s, d)| *s -= d));
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::MeanRows { x, rows, cols } => acc(*x, &mut |s| {
                for r in 0..*rows {
                    for c in 0..*cols {
                        s[r * cols + c] += g[c] / *rows as f64;
                    }
                }
            }),
            Op::CumHazard { base, hazards } => {
                let hv = &nodes[hazards.0].value;
                acc(*base, &mut |s| s[0] += g.iter().sum::<f64>());
                acc(*hazards, &mut |s| {
                    let mut tail = 0.0;
                    for j in (0..hv.len()).rev() {
                        tail += g[j];
                        if hv[j] > 0.0 {
                            s[j] += tail;
                        }
                    }
                });
            }
            Op::MaskedBce { prob, y, delta } => {
                let pv = &nodes[prob.0].value;
                acc(*prob, &mut |s| {
                    for t in 0..pv.len() {
                        let p = pv[t];
                        if delta[t] == 0.0 || p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                            continue;
                        }
                        s[t] += g[0] * delta[t] * (-y[t] / p + (1.0 - y[t]) / (1.0 - p));
                    }
                });
            }
        }
    }
}

/// Gradients from [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v` (zeros when unreachable).
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.grads.get(v.0).and_then(|g| g.clone()).unwrap_or_else(|| vec![0.0; len])
    }
}

/// Logistic function; the input is clamped to ±35 so the result stays
/// strictly inside (0, 1) and is monotone under rounding.
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).exp())
}

const LOGIT_CLAMP: f64 = 35.0;

pub(crate) fn masked_bce_value(prob: &[f64], y: &[f64], delta: &[f64]) -> f64 {
    let mut total = 0.0;
    for t in 0..prob.len() {
        if delta[t] == 0.0 {
            continue;
        }
        let p = prob[t].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total += delta[t] * (-y[t] * p.ln() - (1.0 - y[t]) * (1.0 - p).ln());
    }
    total
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "elementwise operand sizes");
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(s: &mut [f64], g: &[f64]) {
    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean and inverse standard deviation (population variance + eps).
fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

/// Backward of `xhat = (x − mean)·inv_std` given `g = dL/dxhat`.
fn norm_backward(g: &[f64], xhat: &[f64], inv_std: f64, out: &mut [f64]) {
    let n = g.len() as f64;
    let sum_g: f64 = g.iter().sum();
    let sum_gx: f64 = dot(g, xhat);
    for i in 0..g.len() {
        out[i] += inv_std / n * (n * g[i] - sum_g - xhat[i] * sum_gx);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let n = h * wd;
    let mut out = vec![0.0; cout * n];
    for o in 0..cout {
        let plane = &mut out[o * n..(o + 1) * n];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..cin {
            let src = &x[i * n..(i + 1) * n];
            for ky in 0..k {
                for kx in 0..k {
                    let wt = w[((o * cin + i) * k + ky) * k + kx];
                    if wt == 0.0 {
                        continue;
                    }
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = (wd as isize - dx).min(wd as isize) as usize;
                        let srow = &src[sy as usize * wd..];
                        let orow = &mut plane[y * wd..(y + 1) * wd];
                        for xx in x_lo..x_hi {
                            orow[xx] += wt * srow[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let pad = (k / 2) as isize;
    let n = h * wd;
    let mut gx = vec![0.0; cin * n];
    let mut gw = vec![0.0; w.len()];
    let gb: Vec<f64> = (0..cout).map(|o| g[o * n..(o + 1) * n].iter().sum()).collect();
    for o in 0..cout {
        let go = &g[o * n..(o + 1) * n];
        for i in 0..cin {
            let src = &x[i * n..(i + 1) * n];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let wt = w[widx];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    let mut gsum = 0.0;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = (wd as isize - dx).min(wd as isize) as usize;
                        let base = sy as usize * wd;
                        for xx in x_lo..x_hi {
                            let si = base + (xx as isize + dx) as usize;
                            let gv = go[y * wd + xx];
                            gsum += gv * src[si];
                            gx[i * n + si] += gv * wt;
                        }
                    }
                    gw[widx] += gsum;
                }
            }
        }
    }
    (gx, gw, gb)
}

pub(crate) fn max_pool2(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut value = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                value.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (value, argmax)
}

/// Named parameter tensors, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "parameter {name} shape");
        if let Some(&i) = self.index.get(name) {
            self.shapes[i] = shape;
            self.data[i] = data;
            return;
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.shapes.push(shape);
        self.data.push(data);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.data[self.idx(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        let i = self.idx(name);
        &mut self.data[i]
    }

    pub fn shape(&self, name: &str) -> &[usize] {
        &self.shapes[self.idx(name)]
    }

    fn idx(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn tensor(&self, i: usize) -> (&str, &[usize], &[f64]) {
        (&self.names[i], &self.shapes[i], &self.data[i])
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i]
    }

    pub fn numel(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    /// All parameters concatenated in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        self.data.iter().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.numel());
        let mut offset = 0;
        for d in &mut self.data {
            let n = d.len();
            d.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}

/// Binds parameters from a store onto a tape and maps gradients back.
pub struct Bound<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'s> Bound<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, vars: vec![None; store.len()] }
    }

    /// Leaf for parameter `name`, created once per tape.
    pub fn param(&mut self, tape: &mut Tape, name: &str) -> Var {
        let i = self.store.idx(name);
        if let Some(v) = self.vars[i] {
            return v;
        }
        let v = tape.leaf(self.store.data[i].clone());
        self.vars[i] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Flat gradient in store order; parameters not used get zeros.
    pub fn flat_grad(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.store.numel());
        for (i, v) in self.vars.iter().enumerate() {
            let n = self.store.data[i].len();
            match v {
                Some(v) => out.extend(grads.wrt(*v, n)),
                None => out.extend(std::iter::repeat(0.0).take(n)),
            }
        }
        out
    }
}

/// Checks tape gradients of a scalar-valued builder against central
/// differences over every parameter; returns the max relative deviation.
pub fn check_store_gradients(
    store: &ParamStore,
    build: &dyn Fn(&mut Tape, &mut Bound) -> Var,
    step: f64,
) -> f64 {
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new();
        let mut bound = Bound::new(s);
        let root = build(&mut tape, &mut bound);
        tape.scalar(root)
    };
    let mut tape = Tape::new();
    let mut bound = Bound::new(store);
    let root = build(&mut tape, &mut bound);
    let analytic = bound.flat_grad(&tape.backward(root));

    let flat = store.flatten();
    let mut probe = store.clone();
    let mut numeric = Vec::with_capacity(flat.len());
    let mut x = flat.clone();
    for i in 0..flat.len() {
        x[i] = flat[i] + step;
        probe.set_flat(&x);
        let up = eval(&probe);
        x[i] = flat[i] - step;
        probe.set_flat(&x);
        let down = eval(&probe);
        x[i] = flat[i];
        numeric.push((up - down) / (2.0 * step));
    }
    crate::gradcheck::relative_deviation(&analytic, &numeric, 1e-6)
}
