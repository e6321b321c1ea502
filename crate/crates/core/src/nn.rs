//! Network building blocks: the linear state-space scan, scaled dot-product
//! attention, residual convolution blocks and the two-branch state-space
//! block.
//!
//! Layers are plain descriptors (a parameter-name prefix plus sizes). Their
//! weights live in a [`ParamSet`]; `declare` adds freshly initialized
//! tensors, `forward` wires the layer into a [`Graph`] from bound handles.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;
pub const DEFAULT_D_STATE: usize = 8;
pub const MIX_KERNEL: usize = 3;
/// Diagonal of the initial state-transition matrix.
pub const SSM_DECAY: f64 = 0.9;

/// Parameters of the linear state-space model
/// `x_{t+1} = A x_t + B u_t + w_t`, `y_t = C x_t + D u_t + v_t`.
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d: Tensor,
    pub x0: Tensor,
    pub noise: Option<SsmNoise>,
}

/// Per-step process (`[t, d_state]`) and observation (`[t, d_out]`) noise.
#[derive(Debug, Clone)]
pub struct SsmNoise {
    pub process: Tensor,
    pub observation: Tensor,
}

impl SsmParams {
    pub fn d_state(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.c.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let shapes_ok = self.a.rank() == 2
            && self.b.rank() == 2
            && self.c.rank() == 2
            && self.d.rank() == 2
            && self.x0.rank() == 1;
        if !shapes_ok {
            return Err(Error::dim("A, B, C, D must be matrices and x0 a vector"));
        }
        let (ds, di, dout) = (self.d_state(), self.d_in(), self.d_out());
        if self.a.shape() != [ds, ds]
            || self.b.shape() != [ds, di]
            || self.c.shape() != [dout, ds]
            || self.d.shape() != [dout, di]
            || self.x0.shape() != [ds]
        {
            return Err(Error::dim(format!(
                "inconsistent SSM dimensions: A {:?}, B {:?}, C {:?}, D {:?}, x0 {:?}",
                self.a.shape(),
                self.b.shape(),
                self.c.shape(),
                self.d.shape(),
                self.x0.shape()
            )));
        }
        Ok(())
    }
}

/// Runs the state-space recurrence over `u_seq` (`[t, d_in]`) and returns
/// the observations `[t, d_out]`.
///
/// Noise terms must be absent when `deterministic` is set.
pub fn ssm_scan(params: &SsmParams, u_seq: &Tensor, deterministic: bool) -> Result<Tensor> {
    params.validate()?;
    if deterministic && params.noise.is_some() {
        return Err(Error::InvalidArgument("noise terms supplied in deterministic mode".into()));
    }
    if u_seq.rank() != 2 || u_seq.shape()[1] != params.d_in() {
        return Err(Error::dim(format!(
            "input sequence {:?} does not match d_in = {}",
            u_seq.shape(),
            params.d_in()
        )));
    }
    let t = u_seq.shape()[0];
    let noise = params
        .noise
        .as_ref()
        .map(|n| (n.process.clone(), n.observation.clone()));
    let mut g = Graph::new();
    let u = g.constant(u_seq.reshape(vec![1, t, params.d_in()])?);
    let a = g.constant(params.a.clone());
    let b = g.constant(params.b.clone());
    let c = g.constant(params.c.clone());
    let d = g.constant(params.d.clone());
    let x0 = g.constant(params.x0.clone());
    let y = g.ssm_scan(u, a, b, c, d, x0, noise)?;
    g.get(y)?.reshape(vec![t, params.d_out()])
}

/// Query, key and value matrices for scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

/// `softmax(Q K^T / sqrt(d_k)) V`, softmax over keys for each query row.
pub fn selective_attention(inputs: &AttentionInputs) -> Result<Tensor> {
    let mut g = Graph::new();
    let q = g.constant(inputs.q.clone());
    let k = g.constant(inputs.k.clone());
    let v = g.constant(inputs.v.clone());
    let out = attention(&mut g, q, k, v)?;
    Ok(g.get(out)?.clone())
}

/// Attention weights `softmax(Q K^T / sqrt(d_k))` as a graph node.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let (qs, ks) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::dim(format!("query {qs:?} and key {ks:?} disagree on d_k")));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let scaled = g.scale(logits, 1.0 / (qs[1] as f64).sqrt())?;
    g.softmax(scaled, 1)
}

pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (ks, vs) = (g.shape(k).to_vec(), g.shape(v).to_vec());
    if vs.len() != 2 || vs[0] != ks[0] {
        return Err(Error::dim(format!("keys {ks:?} and values {vs:?} disagree on length")));
    }
    let w = attention_weights(g, q, k)?;
    g.matmul(w, v)
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite positive std");
    let numel = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..numel).map(|_| dist.sample(rng)).collect())
}

/// He-style fan-in initialization for a `[co, ci, k, k]` convolution.
pub(crate) fn he_conv(rng: &mut impl Rng, co: usize, ci: usize, k: usize) -> Tensor {
    normal_tensor(rng, &[co, ci, k, k], (2.0 / (ci * k * k) as f64).sqrt())
}

fn affine(g: &mut Graph, x: Var, p: &BoundParams, prefix: &str, axis: usize) -> Result<Var> {
    let gamma = p.get(&format!("{prefix}.gamma"))?;
    let beta = p.get(&format!("{prefix}.beta"))?;
    let scaled = g.mul_channel(x, gamma, axis)?;
    g.add_channel(scaled, beta, axis)
}

fn declare_affine(params: &mut ParamSet, prefix: &str, channels: usize) -> Result<()> {
    params.insert(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0))?;
    params.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]))
}

/// Convolution followed by affine instance normalization and leaky ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvNormAct {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvNormAct {
    pub fn new(prefix: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn declare(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        params.insert(
            format!("{}.conv", self.prefix),
            he_conv(rng, self.out_channels, self.in_channels, self.kernel),
        )?;
        declare_affine(params, &format!("{}.norm", self.prefix), self.out_channels)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, p: &BoundParams) -> Result<Var> {
        let w = p.get(&format!("{}.conv", self.prefix))?;
        let h = g.conv2d_same(x, w, self.stride)?;
        let h = g.instance_norm(h, NORM_EPS)?;
        let h = affine(g, h, p, &format!("{}.norm", self.prefix), 1)?;
        g.leaky_relu(h, LEAKY_SLOPE)
    }
}

/// `x + f(x)` with `f` two 3x3 conv, instance-norm, leaky-ReLU units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualBlock {
    pub prefix: String,
    pub channels: usize,
}

impl ResidualBlock {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
        }
    }

    fn units(&self) -> [ConvNormAct; 2] {
        [
            ConvNormAct::new(format!("{}.unit1", self.prefix), self.channels, self.channels, 3, 1),
            ConvNormAct::new(format!("{}.unit2", self.prefix), self.channels, self.channels, 3, 1),
        ]
    }

    pub fn declare(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        self.units().iter().try_for_each(|u| u.declare(params, rng))
    }

    pub fn forward(&self, g: &mut Graph, x: Var, p: &BoundParams) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::dim(format!(
                "{}: expected [n, {}, h, w], got {shape:?}",
                self.prefix, self.channels
            )));
        }
        let [first, second] = self.units();
        let h = first.forward(g, x, p)?;
        let h = second.forward(g, h, p)?;
        g.add(x, h)
    }
}

/// Applies a [`ResidualBlock`] to a `[n, c, h, w]` tensor outside of any
/// training graph.
pub fn residual_block(features: &Tensor, block: &ResidualBlock, params: &ParamSet) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(features.clone());
    let y = block.forward(&mut g, x, &bound)?;
    Ok(g.get(y)?.clone())
}

/// Two-branch state-space block over `[n, l, c]` sequences.
///
/// Tokens are layer-normalized, projected to two `c`-wide branches, the
/// first passes a causal depthwise mixing convolution, SiLU and the
/// state-space scan, the second SiLU only; the branches are merged by a
/// Hadamard product and projected back to `c` channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MambaBlock {
    pub prefix: String,
    pub channels: usize,
    pub d_state: usize,
}

impl MambaBlock {
    pub fn new(prefix: impl Into<String>, channels: usize, d_state: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            d_state,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn declare(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        let (c, ds) = (self.channels, self.d_state);
        let inner = c;
        declare_affine(params, &self.name("norm"), c)?;
        params.insert(self.name("in_proj"), normal_tensor(rng, &[c, 2 * inner], (1.0 / c as f64).sqrt()))?;
        params.insert(
            self.name("mix.weight"),
            normal_tensor(rng, &[inner, MIX_KERNEL], (1.0 / MIX_KERNEL as f64).sqrt()),
        )?;
        params.insert(self.name("mix.bias"), Tensor::zeros(&[inner]))?;

        let noise = normal_tensor(rng, &[ds, ds], 0.01);
        let a: Vec<f64> = noise
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| if i / ds == i % ds { SSM_DECAY + v } else { *v })
            .collect();
        params.insert(self.name("ssm.a"), Tensor::from_parts(vec![ds, ds], a))?;
        params.insert(self.name("ssm.b"), normal_tensor(rng, &[ds, inner], (1.0 / inner as f64).sqrt()))?;
        params.insert(
            self.name("ssm.c"),
            normal_tensor(rng, &[inner, ds], (1.0 - SSM_DECAY) / (ds as f64).sqrt()),
        )?;
        let eye: Vec<f64> = (0..inner * inner)
            .map(|i| if i / inner == i % inner { 1.0 } else { 0.0 })
            .collect();
        params.insert(self.name("ssm.d"), Tensor::from_parts(vec![inner, inner], eye))?;
        params.insert(self.name("ssm.x0"), Tensor::zeros(&[ds]))?;
        params.insert(self.name("out_proj"), normal_tensor(rng, &[inner, c], (1.0 / inner as f64).sqrt()))
    }

    pub fn forward(&self, g: &mut Graph, x: Var, p: &BoundParams) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(Error::dim(format!(
                "{}: expected [n, l, {}], got {shape:?}",
                self.prefix, self.channels
            )));
        }
        let (n, l, c) = (shape[0], shape[1], shape[2]);
        if l == 0 {
            return Err(Error::dim("sequence length must be positive"));
        }
        let inner = c;
        let h = g.layer_norm(x, NORM_EPS)?;
        let h = affine(g, h, p, &self.name("norm"), 2)?;
        let tokens = g.reshape(h, &[n * l, c])?;
        let proj = g.matmul(tokens, p.get(&self.name("in_proj"))?)?;

        let ssm_in = g.slice(proj, 1, 0, inner)?;
        let ssm_in = g.reshape(ssm_in, &[n, l, inner])?;
        let mixed = g.causal_conv1d(ssm_in, p.get(&self.name("mix.weight"))?)?;
        let mixed = g.add_channel(mixed, p.get(&self.name("mix.bias"))?, 2)?;
        let mixed = g.silu(mixed)?;
        let scanned = g.ssm_scan(
            mixed,
            p.get(&self.name("ssm.a"))?,
            p.get(&self.name("ssm.b"))?,
            p.get(&self.name("ssm.c"))?,
            p.get(&self.name("ssm.d"))?,
            p.get(&self.name("ssm.x0"))?,
            None,
        )?;

        let gate = g.slice(proj, 1, inner, 2 * inner)?;
        let gate = g.silu(gate)?;
        let gate = g.reshape(gate, &[n, l, inner])?;

        let merged = g.mul(scanned, gate)?;
        let merged = g.reshape(merged, &[n * l, inner])?;
        let out = g.matmul(merged, p.get(&self.name("out_proj"))?)?;
        g.reshape(out, &[n, l, c])
    }
}

/// Applies a [`MambaBlock`] to `[n, l, c]` features outside of any training
/// graph.
pub fn mamba_block(features: &Tensor, block: &MambaBlock, params: &ParamSet) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(features.clone());
    let y = block.forward(&mut g, x, &bound)?;
    Ok(g.get(y)?.clone())
}

/// `[n, c, h, w]` feature map to `[n, h*w, c]` tokens in row-major order.
pub fn map_to_sequence(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(format!("expected [n, c, h, w], got {s:?}")));
    }
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(flat, &[0, 2, 1])
}

/// Inverse of [`map_to_sequence`].
pub fn sequence_to_map(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::dim(format!("sequence {s:?} does not cover a {h}x{w} map")));
    }
    let t = g.permute(x, &[0, 2, 1])?;
    g.reshape(t, &[s[0], s[2], h, w])
}
