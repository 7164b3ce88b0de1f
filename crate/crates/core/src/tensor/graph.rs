use super::kernels::{self, ConvGeom};
use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    ScaleItems(Var, Vec<f64>),
    Silu(Var),
    ConcatChannels(Var, Var),
    Mean(Var),
    Mse(Var, Var),
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom, cols: Vec<f64> },
    GroupNorm { input: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Linear { input: Var, weight: Var, bias: Var },
    AddChannelBias { input: Var, bias: Var },
    ChannelAffine { input: Var, scale: Var, shift: Var },
    Upsample2x(Var),
    ReflectPad { input: Var, bottom: usize, right: usize },
    Crop { input: Var, rows: usize, cols: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Forward-pass tape. Confined to one thread; build one per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    tracking: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(msg: String) -> TensorError {
    TensorError::InvalidShape(msg)
}

impl Graph {
    /// Tape that records what backward needs.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), tracking: true }
    }

    /// Forward-only tape: parameters are plain leaves and no backward caches are kept.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), tracking: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.tracking });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.tracking && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked leaf; receives a gradient on backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, TensorError> {
        self.same_shape(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| s * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::ScalarMul(a, s), rg)
    }

    /// Multiplies batch item `n` (first axis) by `scales[n]`.
    pub fn scale_items(&mut self, a: Var, scales: &[f64]) -> Result<Var, TensorError> {
        let t = self.value(a);
        let n = *t.shape().first().ok_or_else(|| shape_err("scale_items on rank-0 tensor".into()))?;
        if n != scales.len() {
            return Err(shape_err(format!("scale_items: batch {n} vs {} scales", scales.len())));
        }
        let stride = t.numel() / n;
        let data = t.data().iter().enumerate().map(|(i, &x)| x * scales[i / stride]).collect();
        let out = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::ScaleItems(a, scales.to_vec()), rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * kernels::sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let [na, ca, ha, wa] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(shape_err(format!("concat_channels: [{na},_,{ha},{wa}] vs [{nb},_,{hb},{wb}]")));
        }
        let hw = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(na * (ca + cb) * hw);
        for item in 0..na {
            data.extend_from_slice(&da[item * ca * hw..(item + 1) * ca * hw]);
            data.extend_from_slice(&db[item * cb * hw..(item + 1) * cb * hw]);
        }
        let out = Tensor { shape: vec![na, ca + cb, ha, wa], data };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatChannels(a, b), rg))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Mean squared difference as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mse")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let m = s / ta.numel() as f64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b), rg))
    }

    /// 2-D cross-correlation over `[N, C_in, H, W]` with a square odd kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let [n, c_in, h, w] = self.value(input).dims4()?;
        let [c_out, wc_in, k, k2] = self.value(weight).dims4()?;
        if wc_in != c_in {
            return Err(shape_err(format!("conv2d: input has {c_in} channels, weight expects {wc_in}")));
        }
        if k != k2 || k % 2 == 0 {
            return Err(shape_err(format!("conv2d: kernel must be square and odd, got {k}x{k2}")));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(shape_err(format!("conv2d: bias shape {:?}, expected [{c_out}]", self.value(bias).shape())));
        }
        if stride == 0 {
            return Err(TensorError::InvalidConfig("conv2d: stride must be positive".into()));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(shape_err(format!("conv2d: {h}x{w} input with padding {padding} smaller than kernel {k}")));
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let geom = ConvGeom { c_in, h, w, k, stride, pad: padding, oh, ow };
        let (kk, p) = (geom.patch_len(), geom.out_len());
        let rg = self.rg(&[input, weight, bias]);
        let keep_cols = rg && self.nodes[weight.0].requires_grad;
        let mut cols = vec![0.0; kk * p * if keep_cols { n } else { 1 }];
        let mut out = vec![0.0; n * c_out * p];
        {
            let (x, wt, b) = (self.value(input).data(), self.value(weight).data(), self.value(bias).data());
            for item in 0..n {
                let c = if keep_cols { &mut cols[item * kk * p..(item + 1) * kk * p] } else { &mut cols[..] };
                kernels::conv_forward_item(
                    &x[item * c_in * h * w..(item + 1) * c_in * h * w],
                    wt,
                    b,
                    &geom,
                    c_out,
                    c,
                    &mut out[item * c_out * p..(item + 1) * c_out * p],
                );
            }
        }
        if !keep_cols {
            cols = Vec::new();
        }
        let out = Tensor { shape: vec![n, c_out, oh, ow], data: out };
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geom, cols }, rg))
    }

    pub fn group_norm(&mut self, input: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::InvalidConfig(format!("group_norm: {c} channels not divisible into {groups} groups")));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(format!("group_norm: affine parameters must have shape [{c}]")));
        }
        let (out, xhat, inv_std) = kernels::group_norm_forward(
            self.value(input).data(),
            n,
            c,
            h * w,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let rg = self.rg(&[input, gamma, beta]);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        let out = Tensor { shape: vec![n, c, h, w], data: out };
        Ok(self.push(out, Op::GroupNorm { input, gamma, beta, groups, xhat, inv_std }, rg))
    }

    /// `x[N, in] · Wᵀ + b` with `W[out, in]`, `b[out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let (n, d_in) = match self.value(input).shape() {
            &[n, d] => (n, d),
            s => return Err(shape_err(format!("linear: expected [N, in], got {s:?}"))),
        };
        let (d_out, w_in) = match self.value(weight).shape() {
            &[o, i] => (o, i),
            s => return Err(shape_err(format!("linear: expected weight [out, in], got {s:?}"))),
        };
        if w_in != d_in || self.value(bias).shape() != [d_out] {
            return Err(shape_err(format!("linear: input width {d_in}, weight [{d_out}, {w_in}]")));
        }
        let mut out = vec![0.0; n * d_out];
        for row in out.chunks_exact_mut(d_out) {
            row.copy_from_slice(self.value(bias).data());
        }
        kernels::gemm(
            n,
            d_in,
            d_out,
            1.0,
            self.value(input).data(),
            (d_in, 1),
            self.value(weight).data(),
            (1, d_in),
            1.0,
            &mut out,
            (d_out, 1),
        );
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(Tensor { shape: vec![n, d_out], data: out }, Op::Linear { input, weight, bias }, rg))
    }

    /// Adds `bias[N, C]` to every spatial position of `x[N, C, H, W]`.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if self.value(bias).shape() != [n, c] {
            return Err(shape_err(format!("add_channel_bias: bias {:?}, expected [{n}, {c}]", self.value(bias).shape())));
        }
        let hw = h * w;
        let b = self.value(bias).data();
        let data = self.value(input).data().iter().enumerate().map(|(i, &x)| x + b[i / hw]).collect();
        let rg = self.rg(&[input, bias]);
        Ok(self.push(Tensor { shape: vec![n, c, h, w], data }, Op::AddChannelBias { input, bias }, rg))
    }

    /// `x·(1 + scale) + shift` with `scale`, `shift` of shape `[N, C]` broadcast
    /// over the spatial positions of `x[N, C, H, W]`.
    pub fn channel_affine(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(input).dims4()?;
        for (what, v) in [("scale", scale), ("shift", shift)] {
            if self.value(v).shape() != [n, c] {
                return Err(shape_err(format!("channel_affine: {what} {:?}, expected [{n}, {c}]", self.value(v).shape())));
            }
        }
        let hw = h * w;
        let (s, b) = (self.value(scale).data(), self.value(shift).data());
        let data = self.value(input).data().iter().enumerate().map(|(i, &x)| x * (1.0 + s[i / hw]) + b[i / hw]).collect();
        let rg = self.rg(&[input, scale, shift]);
        Ok(self.push(Tensor { shape: vec![n, c, h, w], data }, Op::ChannelAffine { input, scale, shift }, rg))
    }

    /// Nearest-neighbour ×2 spatial upsampling.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(input).dims4()?;
        let x = self.value(input).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![0.0; n * c * h2 * w2];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut data[plane * h2 * w2..(plane + 1) * h2 * w2];
            for i in 0..h2 {
                for j in 0..w2 {
                    dst[i * w2 + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor { shape: vec![n, c, h2, w2], data }, Op::Upsample2x(input), rg))
    }

    /// Reflect-pads the bottom and right edges.
    pub fn reflect_pad(&mut self, input: Var, bottom: usize, right: usize) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(input).dims4()?;
        let (h2, w2) = (h + bottom, w + right);
        let x = self.value(input).data();
        let mut data = vec![0.0; n * c * h2 * w2];
        for plane in 0..n * c {
            for i in 0..h2 {
                let si = kernels::reflect_index(i as isize, h);
                for j in 0..w2 {
                    let sj = kernels::reflect_index(j as isize, w);
                    data[plane * h2 * w2 + i * w2 + j] = x[plane * h * w + si * w + sj];
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor { shape: vec![n, c, h2, w2], data }, Op::ReflectPad { input, bottom, right }, rg))
    }

    /// Keeps the top-left `rows × cols` window.
    pub fn crop(&mut self, input: Var, rows: usize, cols: usize) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if rows == 0 || cols == 0 || rows > h || cols > w {
            return Err(shape_err(format!("crop {rows}x{cols} out of {h}x{w}")));
        }
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(n * c * rows * cols);
        for plane in 0..n * c {
            for i in 0..rows {
                let start = plane * h * w + i * w;
                data.extend_from_slice(&x[start..start + cols]);
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor { shape: vec![n, c, rows, cols], data }, Op::Crop { input, rows, cols }, rg))
    }

    /// Reverse-mode sweep from a single-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor { shape: lt.shape.clone(), data: vec![1.0] });
        let nodes = &self.nodes;

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(gout);
                continue;
            }
            let g = gout.data();
            let needs = |v: &Var| nodes[v.0].requires_grad;
            let acc = |grads: &mut Vec<Option<Tensor>>, v: Var, f: &mut dyn FnMut(&mut [f64])| {
                let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
                f(slot.data_mut());
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if needs(a) {
                        acc(&mut grads, *a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                    }
                    if needs(b) {
                        acc(&mut grads, *b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g));
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if needs(a) {
                        acc(&mut grads, *a, &mut |d| d.iter_mut().zip(g).zip(vb).for_each(|((d, g), y)| *d += g * y));
                    }
                    if needs(b) {
                        acc(&mut grads, *b, &mut |d| d.iter_mut().zip(g).zip(va).for_each(|((d, g), x)| *d += g * x));
                    }
                }
                Op::ScalarMul(a, s) => {
                    acc(&mut grads, *a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g));
                }
                Op::ScaleItems(a, scales) => {
                    let stride = g.len() / scales.len();
                    acc(&mut grads, *a, &mut |d| {
                        d.iter_mut().zip(g).enumerate().for_each(|(i, (d, g))| *d += scales[i / stride] * g)
                    });
                }
                Op::Silu(a) => {
                    let x = nodes[a.0].value.data();
                    acc(&mut grads, *a, &mut |d| {
                        for ((d, g), &x) in d.iter_mut().zip(g).zip(x) {
                            let s = kernels::sigmoid(x);
                            *d += g * s * (1.0 + x * (1.0 - s));
                        }
                    });
                }
                Op::ConcatChannels(a, b) => {
                    let [n, ca, h, w] = nodes[a.0].value.dims4()?;
                    let cb = nodes[b.0].value.shape()[1];
                    let hw = h * w;
                    let c = ca + cb;
                    if needs(a) {
                        acc(&mut grads, *a, &mut |d| {
                            for item in 0..n {
                                let src = &g[item * c * hw..item * c * hw + ca * hw];
                                d[item * ca * hw..(item + 1) * ca * hw].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                            }
                        });
                    }
                    if needs(b) {
                        acc(&mut grads, *b, &mut |d| {
                            for item in 0..n {
                                let src = &g[item * c * hw + ca * hw..(item + 1) * c * hw];
                                d[item * cb * hw..(item + 1) * cb * hw].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                            }
                        });
                    }
                }
                Op::Mean(a) => {
                    let scale = g[0] / nodes[a.0].value.numel() as f64;
                    acc(&mut grads, *a, &mut |d| d.iter_mut().for_each(|d| *d += scale));
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    let scale = 2.0 * g[0] / va.len() as f64;
                    if needs(a) {
                        acc(&mut grads, *a, &mut |d| d.iter_mut().zip(va).zip(vb).for_each(|((d, x), y)| *d += scale * (x - y)));
                    }
                    if needs(b) {
                        acc(&mut grads, *b, &mut |d| d.iter_mut().zip(va).zip(vb).for_each(|((d, x), y)| *d -= scale * (x - y)));
                    }
                }
                Op::Conv2d { input, weight, bias, geom, cols } => {
                    let [n, c_out, _, _] = node.value.dims4()?;
                    let (kk, p) = (geom.patch_len(), geom.out_len());
                    let in_len = geom.c_in * geom.h * geom.w;
                    if needs(weight) {
                        let mut dw = vec![0.0; c_out * kk];
                        for item in 0..n {
                            kernels::conv_backward_weight_item(
                                &g[item * c_out * p..(item + 1) * c_out * p],
                                &cols[item * kk * p..(item + 1) * kk * p],
                                geom,
                                c_out,
                                &mut dw,
                            );
                        }
                        acc(&mut grads, *weight, &mut |d| d.iter_mut().zip(&dw).for_each(|(d, v)| *d += v));
                    }
                    if needs(bias) {
                        acc(&mut grads, *bias, &mut |d| {
                            for (o, row) in g.chunks_exact(p).enumerate() {
                                d[o % c_out] += row.iter().sum::<f64>();
                            }
                        });
                    }
                    if needs(input) {
                        let wt = nodes[weight.0].value.data();
                        let mut dcols = vec![0.0; kk * p];
                        acc(&mut grads, *input, &mut |d| {
                            for item in 0..n {
                                kernels::conv_backward_input_item(
                                    &g[item * c_out * p..(item + 1) * c_out * p],
                                    wt,
                                    geom,
                                    c_out,
                                    &mut dcols,
                                    &mut d[item * in_len..(item + 1) * in_len],
                                );
                            }
                        });
                    }
                }
                Op::GroupNorm { input, gamma, beta, groups, xhat, inv_std } => {
                    let [n, c, h, w] = node.value.dims4()?;
                    let gm = nodes[gamma.0].value.data().to_vec();
                    let mut dx = needs(input).then(|| vec![0.0; g.len()]);
                    let mut dgamma = needs(gamma).then(|| vec![0.0; c]);
                    let mut dbeta = needs(beta).then(|| vec![0.0; c]);
                    kernels::group_norm_backward(
                        g,
                        xhat,
                        inv_std,
                        n,
                        c,
                        h * w,
                        *groups,
                        &gm,
                        dx.as_deref_mut(),
                        dgamma.as_deref_mut(),
                        dbeta.as_deref_mut(),
                    );
                    for (v, part) in [(*input, dx), (*gamma, dgamma), (*beta, dbeta)] {
                        if let Some(part) = part {
                            acc(&mut grads, v, &mut |d| d.iter_mut().zip(&part).for_each(|(d, p)| *d += p));
                        }
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let (n, d_in) = (nodes[input.0].value.shape()[0], nodes[input.0].value.shape()[1]);
                    let d_out = nodes[weight.0].value.shape()[0];
                    if needs(input) {
                        let wt = nodes[weight.0].value.data();
                        acc(&mut grads, *input, &mut |d| {
                            kernels::gemm(n, d_out, d_in, 1.0, g, (d_out, 1), wt, (d_in, 1), 1.0, d, (d_in, 1))
                        });
                    }
                    if needs(weight) {
                        let x = nodes[input.0].value.data();
                        acc(&mut grads, *weight, &mut |d| {
                            kernels::gemm(d_out, n, d_in, 1.0, g, (1, d_out), x, (d_in, 1), 1.0, d, (d_in, 1))
                        });
                    }
                    if needs(bias) {
                        acc(&mut grads, *bias, &mut |d| {
                            for row in g.chunks_exact(d_out) {
                                d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                            }
                        });
                    }
                }
                Op::AddChannelBias { input, bias } => {
                    let [_, _, h, w] = node.value.dims4()?;
                    let hw = h * w;
                    if needs(input) {
                        acc(&mut grads, *input, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                    }
                    if needs(bias) {
                        acc(&mut grads, *bias, &mut |d| {
                            for (d, plane) in d.iter_mut().zip(g.chunks_exact(hw)) {
                                *d += plane.iter().sum::<f64>();
                            }
                        });
                    }
                }
                Op::ChannelAffine { input, scale, shift } => {
                    let [_, _, h, w] = node.value.dims4()?;
                    let hw = h * w;
                    if needs(input) {
                        let s = nodes[scale.0].value.data();
                        acc(&mut grads, *input, &mut |d| {
                            d.iter_mut().zip(g).enumerate().for_each(|(i, (d, g))| *d += g * (1.0 + s[i / hw]))
                        });
                    }
                    if needs(scale) {
                        let x = nodes[input.0].value.data();
                        acc(&mut grads, *scale, &mut |d| {
                            for (k, d) in d.iter_mut().enumerate() {
                                *d += (k * hw..(k + 1) * hw).map(|i| g[i] * x[i]).sum::<f64>();
                            }
                        });
                    }
                    if needs(shift) {
                        acc(&mut grads, *shift, &mut |d| {
                            for (d, plane) in d.iter_mut().zip(g.chunks_exact(hw)) {
                                *d += plane.iter().sum::<f64>();
                            }
                        });
                    }
                }
                Op::Upsample2x(a) => {
                    let [n, c, h, w] = nodes[a.0].value.dims4()?;
                    let w2 = 2 * w;
                    acc(&mut grads, *a, &mut |d| {
                        for plane in 0..n * c {
                            let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                            let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                            for i in 0..2 * h {
                                for j in 0..w2 {
                                    dst[(i / 2) * w + j / 2] += src[i * w2 + j];
                                }
                            }
                        }
                    });
                }
                Op::ReflectPad { input, bottom, right } => {
                    let [n, c, h, w] = nodes[input.0].value.dims4()?;
                    let (h2, w2) = (h + bottom, w + right);
                    acc(&mut grads, *input, &mut |d| {
                        for plane in 0..n * c {
                            for i in 0..h2 {
                                let si = kernels::reflect_index(i as isize, h);
                                for j in 0..w2 {
                                    let sj = kernels::reflect_index(j as isize, w);
                                    d[plane * h * w + si * w + sj] += g[plane * h2 * w2 + i * w2 + j];
                                }
                            }
                        }
                    });
                }
                Op::Crop { input, rows, cols } => {
                    let [n, c, h, w] = nodes[input.0].value.dims4()?;
                    acc(&mut grads, *input, &mut |d| {
                        for plane in 0..n * c {
                            for i in 0..*rows {
                                let dst = &mut d[plane * h * w + i * w..plane * h * w + i * w + cols];
                                let src = &g[plane * rows * cols + i * cols..plane * rows * cols + (i + 1) * cols];
                                dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                            }
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}
