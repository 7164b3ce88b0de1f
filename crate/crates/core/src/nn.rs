//! U-Net denoiser with noise-level conditioning.
//!
//! The conditioning field is concatenated with the noisy residual on the
//! channel axis at the input. Residual blocks run GroupNorm → SiLU → conv
//! twice; before the second activation the normalized features are scaled
//! and shifted per channel by projections of the noise embedding. Each
//! encoder level holds one block and halves resolution with a stride-2
//! convolution; each decoder level doubles it with nearest-neighbour
//! upsampling and a convolution, concatenates the encoder skip and applies
//! two blocks. The output convolution is zero-initialized, so a fresh model
//! predicts 0.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

const FOURIER_SEED: u64 = 0x5eed_f00d;
const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Noisy residual channels plus conditioning channels.
    pub in_channels: usize,
    pub base_channels_per_level: Vec<usize>,
    pub blocks: usize,
    pub noise_embed_dim: usize,
    pub out_channels: usize,
    /// Reflect-pad inputs whose size is not a multiple of `2^(blocks-1)` and crop
    /// the output back; when false such inputs are rejected.
    #[serde(default = "default_true")]
    pub pad_to_multiple: bool,
}

fn default_true() -> bool {
    true
}

impl UNetConfig {
    pub fn new(channels: &[usize]) -> Self {
        Self {
            in_channels: 2,
            base_channels_per_level: channels.to_vec(),
            blocks: channels.len(),
            noise_embed_dim: 32,
            out_channels: 1,
            pad_to_multiple: true,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: String| Err(TensorError::InvalidConfig(m));
        if self.blocks != self.base_channels_per_level.len() {
            return bad(format!("blocks = {} but {} channel widths given", self.blocks, self.base_channels_per_level.len()));
        }
        if self.blocks < 2 {
            return bad("the U-Net needs at least 2 levels".into());
        }
        if self.base_channels_per_level.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.in_channels < 2 || self.out_channels == 0 {
            return bad(format!("in_channels {} / out_channels {}", self.in_channels, self.out_channels));
        }
        if self.noise_embed_dim == 0 || !self.noise_embed_dim.is_multiple_of(2) {
            return bad(format!("noise_embed_dim must be even and positive, got {}", self.noise_embed_dim));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.blocks - 1)
    }
}

/// Largest group count ≤ 8 that divides `channels`.
fn group_count(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// Fourier features `[sin(2π f_i c), cos(2π f_i c)]` with frequencies drawn once
/// from a fixed seed. Returns `[N, dim]`.
pub fn noise_embedding(c_noise: &[f64], dim: usize) -> Result<Tensor, TensorError> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(TensorError::InvalidConfig(format!("noise embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let freqs = Tensor::randn(&[half], 1.0, &mut ChaCha8Rng::seed_from_u64(FOURIER_SEED));
    let mut data = Vec::with_capacity(c_noise.len() * dim);
    for &c in c_noise {
        data.extend(freqs.data().iter().map(|f| (2.0 * PI * f * c).sin()));
        data.extend(freqs.data().iter().map(|f| (2.0 * PI * f * c).cos()));
    }
    Tensor::new(&[c_noise.len(), dim], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    config: UNetConfig,
    params: ParamStore,
    index: HashMap<String, usize>,
}

/// Builds a U-Net with deterministic initialization from `seed`: weights
/// uniform in `±1/√fan_in`, zero biases, unit norm gains and a zero output
/// convolution.
pub fn build_unet(config: UNetConfig, seed: u64) -> Result<DenoiserModel, TensorError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in build_layout(&config) {
        let t = if name.starts_with("conv_out.") || name.ends_with(".bias") || name.ends_with(".beta") {
            Tensor::zeros(&shape)
        } else if name.ends_with(".gamma") {
            Tensor::full(&shape, 1.0)
        } else {
            let bound = 0.1 / (shape[1..].iter().product::<usize>() as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(&shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())?
        };
        store.push(name, t);
    }
    DenoiserModel::from_params(config, store)
}

struct Bound<'a> {
    vars: Vec<Var>,
    index: &'a HashMap<String, usize>,
}

impl Bound<'_> {
    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

impl DenoiserModel {
    /// Wraps an existing parameter set (e.g. from a checkpoint), checking that
    /// it has exactly the layout `config` implies.
    pub fn from_params(config: UNetConfig, params: ParamStore) -> Result<Self, TensorError> {
        config.validate()?;
        let index: HashMap<String, usize> = params.names().iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        let model = Self { config, params, index };
        model.check_layout()?;
        Ok(model)
    }

    fn check_layout(&self) -> Result<(), TensorError> {
        let reference = build_layout(&self.config);
        if reference.len() != self.params.len() {
            return Err(TensorError::InvalidConfig(format!(
                "parameter set has {} tensors, config implies {}",
                self.params.len(),
                reference.len()
            )));
        }
        for ((name, shape), (have, t)) in reference.iter().zip(self.params.iter()) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(TensorError::InvalidConfig(format!(
                    "parameter `{have}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Registers every parameter on `g`, in store order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.tensors().iter().map(|t| g.param(t.clone())).collect()
    }

    /// Forward pass on an existing graph. `params` comes from [`Self::bind`].
    pub fn forward(&self, g: &mut Graph, params: &[Var], noisy: Var, emb: Var, cond: Var) -> Result<Var, TensorError> {
        let cfg = &self.config;
        let [n, c_x, h, w] = g.value(noisy).dims4()?;
        let [nc, c_c, hc, wc] = g.value(cond).dims4()?;
        if (n, h, w) != (nc, hc, wc) {
            return Err(TensorError::InvalidShape(format!(
                "noisy residual [{n},_,{h},{w}] and conditioning [{nc},_,{hc},{wc}] differ"
            )));
        }
        if c_x + c_c != cfg.in_channels {
            return Err(TensorError::InvalidShape(format!(
                "{c_x} residual + {c_c} conditioning channels, model expects {}",
                cfg.in_channels
            )));
        }
        if g.value(emb).shape() != [n, cfg.noise_embed_dim] {
            return Err(TensorError::InvalidShape(format!(
                "noise embedding {:?}, expected [{n}, {}]",
                g.value(emb).shape(),
                cfg.noise_embed_dim
            )));
        }
        let m = cfg.size_multiple();
        let (pad_h, pad_w) = ((m - h % m) % m, (m - w % m) % m);
        if (pad_h > 0 || pad_w > 0) && !cfg.pad_to_multiple {
            return Err(TensorError::InvalidShape(format!("{h}x{w} input is not divisible by {m}")));
        }
        let p = Bound { vars: params.to_vec(), index: &self.index };
        if p.vars.len() != self.params.len() {
            return Err(TensorError::InvalidShape(format!("{} bound params, model has {}", p.vars.len(), self.params.len())));
        }

        let mut x = g.concat_channels(noisy, cond)?;
        if pad_h > 0 || pad_w > 0 {
            x = g.reflect_pad(x, pad_h, pad_w)?;
        }
        let e = g.linear(emb, p.get("emb.fc.weight"), p.get("emb.fc.bias"))?;
        let e = g.silu(e);

        let mut h_cur = conv(g, &p, "conv_in", x, 1)?;
        let mut skips = Vec::with_capacity(cfg.blocks);
        for l in 0..cfg.blocks {
            if l > 0 {
                h_cur = conv(g, &p, &format!("down{l}"), h_cur, 2)?;
            }
            h_cur = res_block(g, &p, &format!("enc{l}"), h_cur, e)?;
            skips.push(h_cur);
        }
        skips.pop();
        for l in (0..cfg.blocks - 1).rev() {
            let up = g.upsample2x(h_cur)?;
            let up = conv(g, &p, &format!("up{l}"), up, 1)?;
            let cat = g.concat_channels(up, skips[l])?;
            h_cur = res_block(g, &p, &format!("dec{l}"), cat, e)?;
            h_cur = res_block(g, &p, &format!("dec{l}b"), h_cur, e)?;
        }
        let act = g.silu(h_cur);
        let mut out = conv(g, &p, "conv_out", act, 1)?;
        if pad_h > 0 || pad_w > 0 {
            out = g.crop(out, h, w)?;
        }
        Ok(out)
    }

    /// Forward pass without gradient tracking.
    pub fn forward_tensors(&self, noisy: &Tensor, emb: &Tensor, cond: &Tensor) -> Result<Tensor, TensorError> {
        let mut g = Graph::inference();
        let params = self.bind(&mut g);
        let (x, e, c) = (g.constant(noisy.clone()), g.constant(emb.clone()), g.constant(cond.clone()));
        let y = self.forward(&mut g, &params, x, e, c)?;
        Ok(g.value(y).clone())
    }
}

fn conv(g: &mut Graph, p: &Bound<'_>, name: &str, x: Var, stride: usize) -> Result<Var, TensorError> {
    let w = p.get(&format!("{name}.weight"));
    let k = g.value(w).shape()[2];
    g.conv2d(x, w, p.get(&format!("{name}.bias")), stride, k / 2)
}

fn norm_act(g: &mut Graph, p: &Bound<'_>, name: &str, x: Var) -> Result<Var, TensorError> {
    let c = g.value(x).shape()[1];
    let y = g.group_norm(x, group_count(c), p.get(&format!("{name}.gamma")), p.get(&format!("{name}.beta")), GN_EPS)?;
    Ok(g.silu(y))
}

fn res_block(g: &mut Graph, p: &Bound<'_>, name: &str, x: Var, emb: Var) -> Result<Var, TensorError> {
    let h = norm_act(g, p, &format!("{name}.norm1"), x)?;
    let h = conv(g, p, &format!("{name}.conv1"), h, 1)?;
    let c = g.value(h).shape()[1];
    let h =
        g.group_norm(h, group_count(c), p.get(&format!("{name}.norm2.gamma")), p.get(&format!("{name}.norm2.beta")), GN_EPS)?;
    let scale = g.linear(emb, p.get(&format!("{name}.emb_scale.weight")), p.get(&format!("{name}.emb_scale.bias")))?;
    let shift = g.linear(emb, p.get(&format!("{name}.emb_shift.weight")), p.get(&format!("{name}.emb_shift.bias")))?;
    let h = g.channel_affine(h, scale, shift)?;
    let h = g.silu(h);
    let h = conv(g, p, &format!("{name}.conv2"), h, 1)?;
    let skip_name = format!("{name}.skip.weight");
    let skip = if p.index.contains_key(&skip_name) { conv(g, p, &format!("{name}.skip"), x, 1)? } else { x };
    g.add(h, skip)
}

/// Names and shapes `build_unet` produces for `config`, in order.
fn build_layout(config: &UNetConfig) -> Vec<(String, Vec<usize>)> {
    let ch = &config.base_channels_per_level;
    let e = config.noise_embed_dim;
    let mut out = Vec::new();
    let conv = |out: &mut Vec<(String, Vec<usize>)>, name: &str, ci: usize, co: usize, k: usize| {
        out.push((format!("{name}.weight"), vec![co, ci, k, k]));
        out.push((format!("{name}.bias"), vec![co]));
    };
    let linear = |out: &mut Vec<(String, Vec<usize>)>, name: &str, di: usize, dout: usize| {
        out.push((format!("{name}.weight"), vec![dout, di]));
        out.push((format!("{name}.bias"), vec![dout]));
    };
    let norm = |out: &mut Vec<(String, Vec<usize>)>, name: &str, c: usize| {
        out.push((format!("{name}.gamma"), vec![c]));
        out.push((format!("{name}.beta"), vec![c]));
    };
    let res = |out: &mut Vec<(String, Vec<usize>)>, name: &str, ci: usize, co: usize| {
        norm(out, &format!("{name}.norm1"), ci);
        conv(out, &format!("{name}.conv1"), ci, co, 3);
        norm(out, &format!("{name}.norm2"), co);
        linear(out, &format!("{name}.emb_scale"), e, co);
        linear(out, &format!("{name}.emb_shift"), e, co);
        conv(out, &format!("{name}.conv2"), co, co, 3);
        if ci != co {
            conv(out, &format!("{name}.skip"), ci, co, 1);
        }
    };
    linear(&mut out, "emb.fc", e, e);
    conv(&mut out, "conv_in", config.in_channels, ch[0], 3);
    for l in 0..config.blocks {
        if l > 0 {
            conv(&mut out, &format!("down{l}"), ch[l - 1], ch[l], 3);
        }
        res(&mut out, &format!("enc{l}"), ch[l], ch[l]);
    }
    for l in (0..config.blocks - 1).rev() {
        conv(&mut out, &format!("up{l}"), ch[l + 1], ch[l], 3);
        res(&mut out, &format!("dec{l}"), 2 * ch[l], ch[l]);
        res(&mut out, &format!("dec{l}b"), ch[l], ch[l]);
    }
    conv(&mut out, "conv_out", ch[0], config.out_channels, 3);
    out
}
