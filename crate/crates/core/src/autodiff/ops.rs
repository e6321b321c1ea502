//! Forward and backward rules for every graph node kind.

use super::kernels::{self, gemm, Window};
use crate::tensor::Tensor;

type ShapeResult = std::result::Result<Vec<usize>, String>;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    ChannelAdd { axis: usize },
    ChannelMul { axis: usize },
    MatMul,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize },
    LeakyRelu(f64),
    Sigmoid,
    Silu,
    Exp,
    Log { floor: Option<f64> },
    Pow(f64),
    InstanceNorm { eps: f64 },
    LayerNorm { eps: f64 },
    Softmax { axis: usize },
    Sum,
    Mean,
    SumAxis { axis: usize },
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Slice { axis: usize, start: usize, end: usize },
    Concat { axis: usize },
    CausalConv1d,
    SsmScan { noise: Option<(Tensor, Tensor)> },
}

/// `(outer, len, inner)` extents around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape(shapes: &[&[usize]]) -> ShapeResult {
    if shapes[0] != shapes[1] {
        return Err(format!("operands {:?} and {:?} differ", shapes[0], shapes[1]));
    }
    Ok(shapes[0].to_vec())
}

fn check_axis(shape: &[usize], axis: usize) -> Result<(), String> {
    if axis >= shape.len() {
        return Err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-major strides of `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Moves `src` (with shape `shape`) into output order `perm`.
fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Normalizes contiguous groups of `group` elements to zero mean and unit
/// variance (biased, with `eps` added to the variance).
fn normalize_groups(x: &[f64], group: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let n = group as f64;
    for (src, dst) in x.chunks(group).zip(out.chunks_mut(group)) {
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
    }
    out
}

fn normalize_groups_backward(x: &[f64], y: &[f64], g: &[f64], group: usize, eps: f64) -> Vec<f64> {
    let mut gx = vec![0.0; x.len()];
    let n = group as f64;
    for (((xs, ys), gs), out) in x
        .chunks(group)
        .zip(y.chunks(group))
        .zip(g.chunks(group))
        .zip(gx.chunks_mut(group))
    {
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        let g_mean = gs.iter().sum::<f64>() / n;
        let gy_mean = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((o, gv), yv) in out.iter_mut().zip(gs).zip(ys) {
            *o = inv * (gv - g_mean - yv * gy_mean);
        }
    }
    gx
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::ChannelAdd { .. } => "add_channel",
            Op::ChannelMul { .. } => "mul_channel",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Silu => "silu",
            Op::Exp => "exp",
            Op::Log { .. } => "log",
            Op::Pow(_) => "pow",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::CausalConv1d => "causal_conv1d",
            Op::SsmScan { .. } => "ssm_scan",
        }
    }

    pub fn infer_shape(&self, s: &[&[usize]]) -> ShapeResult {
        match self {
            Op::Leaf => unreachable!("leaves carry their own shape"),
            Op::Add | Op::Sub | Op::Mul | Op::Div => same_shape(s),
            Op::Scale(_)
            | Op::AddScalar(_)
            | Op::LeakyRelu(_)
            | Op::Sigmoid
            | Op::Silu
            | Op::Exp
            | Op::Log { .. }
            | Op::Pow(_) => Ok(s[0].to_vec()),
            Op::ChannelAdd { axis } | Op::ChannelMul { axis } => {
                check_axis(s[0], *axis)?;
                if s[1] != [s[0][*axis]] {
                    return Err(format!(
                        "per-channel operand {:?} does not match axis {axis} of {:?}",
                        s[1], s[0]
                    ));
                }
                Ok(s[0].to_vec())
            }
            Op::MatMul => {
                let (a, b) = (s[0], s[1]);
                if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                    return Err(format!("cannot multiply {a:?} by {b:?}"));
                }
                Ok(vec![a[0], b[1]])
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (s[0], s[1]);
                if x.len() != 4 || w.len() != 4 || w[1] != x[1] || w[2] != w[3] {
                    return Err(format!("input {x:?} incompatible with weight {w:?}"));
                }
                let win = Window::new(x[1], x[2], x[3], w[2], *stride, *pad)
                    .ok_or_else(|| format!("kernel {} does not fit input {x:?}", w[2]))?;
                Ok(vec![x[0], w[0], win.out_h, win.out_w])
            }
            Op::ConvTranspose2d { stride, pad } => {
                let (x, w) = (s[0], s[1]);
                if x.len() != 4 || w.len() != 4 || w[0] != x[1] || w[2] != w[3] || *stride == 0 {
                    return Err(format!("input {x:?} incompatible with weight {w:?}"));
                }
                let k = w[2];
                let oh = ((x[2] - 1) * stride + k).checked_sub(2 * pad);
                let ow = ((x[3] - 1) * stride + k).checked_sub(2 * pad);
                match (oh, ow) {
                    (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(vec![x[0], w[1], oh, ow]),
                    _ => Err(format!("padding {pad} too large for input {x:?}")),
                }
            }
            Op::InstanceNorm { .. } => {
                if s[0].len() < 3 {
                    return Err(format!("instance norm needs [n, c, ...], got {:?}", s[0]));
                }
                Ok(s[0].to_vec())
            }
            Op::LayerNorm { .. } => Ok(s[0].to_vec()),
            Op::Softmax { axis } => {
                check_axis(s[0], *axis)?;
                Ok(s[0].to_vec())
            }
            Op::Sum | Op::Mean => Ok(vec![1]),
            Op::SumAxis { axis } => {
                check_axis(s[0], *axis)?;
                let mut out = s[0].to_vec();
                out.remove(*axis);
                if out.is_empty() {
                    out.push(1);
                }
                Ok(out)
            }
            Op::Reshape(shape) => {
                let n: usize = shape.iter().product();
                if shape.is_empty() || shape.contains(&0) || n != s[0].iter().product::<usize>() {
                    return Err(format!("cannot reshape {:?} to {shape:?}", s[0]));
                }
                Ok(shape.clone())
            }
            Op::Permute(perm) => {
                let mut seen = vec![false; perm.len()];
                if perm.len() != s[0].len() || perm.iter().any(|&p| p >= perm.len() || std::mem::replace(&mut seen[p], true)) {
                    return Err(format!("{perm:?} is not a permutation of the axes of {:?}", s[0]));
                }
                Ok(perm.iter().map(|&p| s[0][p]).collect())
            }
            Op::Slice { axis, start, end } => {
                check_axis(s[0], *axis)?;
                if start >= end || *end > s[0][*axis] {
                    return Err(format!("slice {start}..{end} invalid for axis {axis} of {:?}", s[0]));
                }
                let mut out = s[0].to_vec();
                out[*axis] = end - start;
                Ok(out)
            }
            Op::Concat { axis } => {
                if s.is_empty() {
                    return Err("nothing to concatenate".into());
                }
                check_axis(s[0], *axis)?;
                let mut out = s[0].to_vec();
                out[*axis] = 0;
                for part in s {
                    let compatible = part.len() == s[0].len()
                        && part.iter().zip(s[0].iter()).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                    if !compatible {
                        return Err(format!("cannot concatenate {part:?} with {:?} on axis {axis}", s[0]));
                    }
                    out[*axis] += part[*axis];
                }
                Ok(out)
            }
            Op::CausalConv1d => {
                let (x, w) = (s[0], s[1]);
                if x.len() != 3 || w.len() != 2 || w[0] != x[2] {
                    return Err(format!("sequence {x:?} incompatible with taps {w:?}"));
                }
                Ok(x.to_vec())
            }
            Op::SsmScan { noise } => {
                let (u, a, b, c, d, x0) = (s[0], s[1], s[2], s[3], s[4], s[5]);
                if u.len() != 3 || a.len() != 2 || b.len() != 2 || c.len() != 2 || d.len() != 2 || x0.len() != 1 {
                    return Err("expected u [n,t,d_in], A, B, C, D matrices and x0 vector".into());
                }
                let (t, d_in, ds) = (u[1], u[2], a[0]);
                let d_out = c[0];
                if a[1] != ds || b != [ds, d_in] || c[1] != ds || d != [d_out, d_in] || x0[0] != ds {
                    return Err(format!(
                        "inconsistent SSM dimensions: A {a:?}, B {b:?}, C {c:?}, D {d:?}, x0 {x0:?}, u {u:?}"
                    ));
                }
                if let Some((w, v)) = noise {
                    if w.shape() != [t, ds] || v.shape() != [t, d_out] {
                        return Err(format!(
                            "noise shapes {:?}/{:?} do not match [{t}, {ds}]/[{t}, {d_out}]",
                            w.shape(),
                            v.shape()
                        ));
                    }
                }
                Ok(vec![u[0], t, d_out])
            }
        }
    }

    pub fn forward(&self, ins: &[&Tensor], out_shape: &[usize]) -> Vec<f64> {
        let x = ins.first().map(|t| t.data()).unwrap_or(&[]);
        match self {
            Op::Leaf => unreachable!(),
            Op::Add => zip_map(x, ins[1].data(), |a, b| a + b),
            Op::Sub => zip_map(x, ins[1].data(), |a, b| a - b),
            Op::Mul => zip_map(x, ins[1].data(), |a, b| a * b),
            Op::Div => zip_map(x, ins[1].data(), |a, b| a / b),
            Op::Scale(f) => x.iter().map(|v| v * f).collect(),
            Op::AddScalar(c) => x.iter().map(|v| v + c).collect(),
            Op::ChannelAdd { axis } | Op::ChannelMul { axis } => {
                let (outer, len, inner) = split_at_axis(out_shape, *axis);
                let p = ins[1].data();
                let add = matches!(self, Op::ChannelAdd { .. });
                let mut out = x.to_vec();
                for o in 0..outer {
                    for (c, &pc) in p.iter().enumerate().take(len) {
                        let base = (o * len + c) * inner;
                        for v in &mut out[base..base + inner] {
                            if add {
                                *v += pc;
                            } else {
                                *v *= pc;
                            }
                        }
                    }
                }
                out
            }
            Op::MatMul => {
                let (m, k) = (ins[0].shape()[0], ins[0].shape()[1]);
                let n = ins[1].shape()[1];
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, 1.0, x, false, ins[1].data(), false, 0.0, &mut out);
                out
            }
            Op::Conv2d { stride, pad } => {
                let (xs, ws) = (ins[0].shape(), ins[1].shape());
                let win = Window::new(xs[1], xs[2], xs[3], ws[2], *stride, *pad).expect("checked shape");
                kernels::conv2d_forward(x, xs[0], &win, ins[1].data(), ws[0])
            }
            Op::ConvTranspose2d { stride, pad } => {
                let (xs, ws) = (ins[0].shape(), ins[1].shape());
                let win = transpose_window(out_shape, ws[2], *stride, *pad);
                kernels::conv_transpose2d_forward(x, xs[0], xs[1], &win, ins[1].data())
            }
            Op::LeakyRelu(slope) => x.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect(),
            Op::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Op::Silu => x.iter().map(|&v| v * sigmoid(v)).collect(),
            Op::Exp => x.iter().map(|v| v.exp()).collect(),
            Op::Log { floor } => match floor {
                Some(f) => x.iter().map(|v| v.max(*f).ln()).collect(),
                None => x.iter().map(|v| v.ln()).collect(),
            },
            Op::Pow(p) => x.iter().map(|v| v.powf(*p)).collect(),
            Op::InstanceNorm { eps } => normalize_groups(x, out_shape[2..].iter().product(), *eps),
            Op::LayerNorm { eps } => normalize_groups(x, *out_shape.last().unwrap(), *eps),
            Op::Softmax { axis } => {
                let (outer, len, inner) = split_at_axis(out_shape, *axis);
                let mut out = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |c: usize| (o * len + c) * inner + i;
                        let max = (0..len).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for c in 0..len {
                            let e = (x[at(c)] - max).exp();
                            out[at(c)] = e;
                            total += e;
                        }
                        for c in 0..len {
                            out[at(c)] /= total;
                        }
                    }
                }
                out
            }
            Op::Sum => vec![x.iter().sum()],
            Op::Mean => vec![x.iter().sum::<f64>() / x.len() as f64],
            Op::SumAxis { axis } => {
                let (outer, len, inner) = split_at_axis(ins[0].shape(), *axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for c in 0..len {
                        let src = &x[(o * len + c) * inner..(o * len + c + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                out
            }
            Op::Reshape(_) => x.to_vec(),
            Op::Permute(perm) => permute_data(x, ins[0].shape(), perm),
            Op::Slice { axis, start, end } => {
                let (outer, len, inner) = split_at_axis(ins[0].shape(), *axis);
                let mut out = Vec::with_capacity(outer * (end - start) * inner);
                for o in 0..outer {
                    out.extend_from_slice(&x[(o * len + start) * inner..(o * len + end) * inner]);
                }
                out
            }
            Op::Concat { axis } => {
                let (outer, _, inner) = split_at_axis(out_shape, *axis);
                let mut out = Vec::with_capacity(out_shape.iter().product());
                for o in 0..outer {
                    for part in ins {
                        let len = part.shape()[*axis];
                        out.extend_from_slice(&part.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                }
                out
            }
            Op::CausalConv1d => {
                let s = ins[0].shape();
                let (n, l, e) = (s[0], s[1], s[2]);
                let w = ins[1].data();
                let k = ins[1].shape()[1];
                let mut out = vec![0.0; x.len()];
                for b in 0..n {
                    for t in 0..l {
                        let row = &mut out[(b * l + t) * e..(b * l + t + 1) * e];
                        for j in 0..k {
                            let Some(src_t) = (t + j).checked_sub(k - 1) else {
                                continue;
                            };
                            let src = &x[(b * l + src_t) * e..(b * l + src_t + 1) * e];
                            for (ch, (r, xv)) in row.iter_mut().zip(src).enumerate() {
                                *r += w[ch * k + j] * xv;
                            }
                        }
                    }
                }
                out
            }
            Op::SsmScan { noise } => ssm_forward(ins, noise.as_ref()).0,
        }
    }

    /// Gradients with respect to each input flagged in `need`.
    pub fn backward(&self, ins: &[&Tensor], out: &Tensor, g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = ins.first().map(|t| t.data()).unwrap_or(&[]);
        let y = out.data();
        let unary = |f: &dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64>| vec![need[0].then(|| f(x, y, g))];
        match self {
            Op::Leaf => unreachable!(),
            Op::Add => vec![need[0].then(|| g.to_vec()), need[1].then(|| g.to_vec())],
            Op::Sub => vec![need[0].then(|| g.to_vec()), need[1].then(|| g.iter().map(|v| -v).collect())],
            Op::Mul => {
                let b = ins[1].data();
                vec![
                    need[0].then(|| zip_map(g, b, |gv, bv| gv * bv)),
                    need[1].then(|| zip_map(g, x, |gv, av| gv * av)),
                ]
            }
            Op::Div => {
                let b = ins[1].data();
                vec![
                    need[0].then(|| zip_map(g, b, |gv, bv| gv / bv)),
                    need[1].then(|| (0..g.len()).map(|i| -g[i] * x[i] / (b[i] * b[i])).collect()),
                ]
            }
            Op::Scale(f) => unary(&|x, y, g| pointwise(x, y, g, |_, _, gi| gi * f)),
            Op::AddScalar(_) => vec![need[0].then(|| g.to_vec())],
            Op::ChannelAdd { axis } | Op::ChannelMul { axis } => {
                let (outer, len, inner) = split_at_axis(out.shape(), *axis);
                let p = ins[1].data();
                let add = matches!(self, Op::ChannelAdd { .. });
                let mut gx = need[0].then(|| vec![0.0; x.len()]);
                let mut gp = need[1].then(|| vec![0.0; len]);
                for o in 0..outer {
                    for c in 0..len {
                        let range = (o * len + c) * inner..(o * len + c + 1) * inner;
                        if let Some(gx) = gx.as_mut() {
                            for (d, gv) in gx[range.clone()].iter_mut().zip(&g[range.clone()]) {
                                *d = if add { *gv } else { gv * p[c] };
                            }
                        }
                        if let Some(gp) = gp.as_mut() {
                            gp[c] += if add {
                                g[range].iter().sum::<f64>()
                            } else {
                                g[range.clone()].iter().zip(&x[range]).map(|(a, b)| a * b).sum::<f64>()
                            };
                        }
                    }
                }
                vec![gx, gp]
            }
            Op::MatMul => {
                let (m, k) = (ins[0].shape()[0], ins[0].shape()[1]);
                let n = ins[1].shape()[1];
                let b = ins[1].data();
                let ga = need[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g, false, b, true, 0.0, &mut ga);
                    ga
                });
                let gb = need[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, x, true, g, false, 0.0, &mut gb);
                    gb
                });
                vec![ga, gb]
            }
            Op::Conv2d { stride, pad } => {
                let (xs, ws) = (ins[0].shape(), ins[1].shape());
                let win = Window::new(xs[1], xs[2], xs[3], ws[2], *stride, *pad).expect("checked shape");
                let (gx, gw) = kernels::conv2d_backward(x, xs[0], &win, ins[1].data(), ws[0], g, need[0], need[1]);
                vec![gx, gw]
            }
            Op::ConvTranspose2d { stride, pad } => {
                let (xs, ws) = (ins[0].shape(), ins[1].shape());
                let win = transpose_window(out.shape(), ws[2], *stride, *pad);
                let (gx, gw) =
                    kernels::conv_transpose2d_backward(x, xs[0], xs[1], &win, ins[1].data(), g, need[0], need[1]);
                vec![gx, gw]
            }
            Op::LeakyRelu(slope) => unary(&|x, y, g| pointwise(x, y, g, |xi, _, gi| if xi > 0.0 { gi } else { slope * gi })),
            Op::Sigmoid => unary(&|x, y, g| pointwise(x, y, g, |_, yi, gi| gi * yi * (1.0 - yi))),
            Op::Silu => unary(&|x, y, g| {
                pointwise(x, y, g, |xi, _, gi| {
                    let s = sigmoid(xi);
                    gi * s * (1.0 + xi * (1.0 - s))
                })
            }),
            Op::Exp => unary(&|x, y, g| pointwise(x, y, g, |_, yi, gi| gi * yi)),
            Op::Log { floor } => unary(&|x, y, g| {
                pointwise(x, y, g, |xi, _, gi| match floor {
                    Some(f) if xi <= *f => 0.0,
                    _ => gi / xi,
                })
            }),
            Op::Pow(p) => unary(&|x, y, g| {
                pointwise(x, y, g, |xi, _, gi| {
                    if xi == 0.0 {
                        if *p == 1.0 {
                            gi
                        } else {
                            0.0
                        }
                    } else {
                        gi * p * xi.powf(p - 1.0)
                    }
                })
            }),
            Op::InstanceNorm { eps } => {
                vec![need[0].then(|| normalize_groups_backward(x, y, g, out.shape()[2..].iter().product(), *eps))]
            }
            Op::LayerNorm { eps } => {
                vec![need[0].then(|| normalize_groups_backward(x, y, g, *out.shape().last().unwrap(), *eps))]
            }
            Op::Softmax { axis } => {
                let (outer, len, inner) = split_at_axis(out.shape(), *axis);
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |c: usize| (o * len + c) * inner + i;
                        let dot: f64 = (0..len).map(|c| g[at(c)] * y[at(c)]).sum();
                        for c in 0..len {
                            gx[at(c)] = y[at(c)] * (g[at(c)] - dot);
                        }
                    }
                }
                vec![need[0].then_some(gx)]
            }
            Op::Sum => vec![need[0].then(|| vec![g[0]; x.len()])],
            Op::Mean => vec![need[0].then(|| vec![g[0] / x.len() as f64; x.len()])],
            Op::SumAxis { axis } => {
                let (outer, len, inner) = split_at_axis(ins[0].shape(), *axis);
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for c in 0..len {
                        gx[(o * len + c) * inner..(o * len + c + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![need[0].then_some(gx)]
            }
            Op::Reshape(_) => vec![need[0].then(|| g.to_vec())],
            Op::Permute(perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![need[0].then(|| permute_data(g, out.shape(), &inverse))]
            }
            Op::Slice { axis, start, end } => {
                let (outer, len, inner) = split_at_axis(ins[0].shape(), *axis);
                let width = (end - start) * inner;
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    gx[(o * len + start) * inner..(o * len + end) * inner]
                        .copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                vec![need[0].then_some(gx)]
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = split_at_axis(out.shape(), *axis);
                let mut offset = 0;
                ins.iter()
                    .zip(need)
                    .map(|(part, &want)| {
                        let len = part.shape()[*axis];
                        let grad = want.then(|| {
                            let mut gp = Vec::with_capacity(part.numel());
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                gp.extend_from_slice(&g[base..base + len * inner]);
                            }
                            gp
                        });
                        offset += len;
                        grad
                    })
                    .collect()
            }
            Op::CausalConv1d => {
                let s = ins[0].shape();
                let (n, l, e) = (s[0], s[1], s[2]);
                let w = ins[1].data();
                let k = ins[1].shape()[1];
                let mut gx = need[0].then(|| vec![0.0; x.len()]);
                let mut gw = need[1].then(|| vec![0.0; w.len()]);
                for b in 0..n {
                    for t in 0..l {
                        let gr = &g[(b * l + t) * e..(b * l + t + 1) * e];
                        for j in 0..k {
                            let Some(src_t) = (t + j).checked_sub(k - 1) else {
                                continue;
                            };
                            let base = (b * l + src_t) * e;
                            for ch in 0..e {
                                if let Some(gx) = gx.as_mut() {
                                    gx[base + ch] += w[ch * k + j] * gr[ch];
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[ch * k + j] += gr[ch] * x[base + ch];
                                }
                            }
                        }
                    }
                }
                vec![gx, gw]
            }
            Op::SsmScan { noise } => ssm_backward(ins, noise.as_ref(), g, need),
        }
    }
}

fn pointwise(x: &[f64], y: &[f64], g: &[f64], f: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
    x.iter().zip(y).zip(g).map(|((&xi, &yi), &gi)| f(xi, yi, gi)).collect()
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// The direct-convolution window whose adjoint is the transposed convolution
/// producing `out_shape` (`[n, co, oh, ow]`).
fn transpose_window(out_shape: &[usize], kernel: usize, stride: usize, pad: usize) -> Window {
    Window::new(out_shape[1], out_shape[2], out_shape[3], kernel, stride, pad).expect("checked shape")
}

/// Runs the recurrence; returns outputs `[n, t, d_out]` and the visited
/// states `[n, t, d_state]` (`x_0 .. x_{t-1}`).
fn ssm_forward(ins: &[&Tensor], noise: Option<&(Tensor, Tensor)>) -> (Vec<f64>, Vec<f64>) {
    let us = ins[0].shape();
    let (n, t, d_in) = (us[0], us[1], us[2]);
    let ds = ins[1].shape()[0];
    let d_out = ins[3].shape()[0];
    let (u, a, b, c, d, x0) = (
        ins[0].data(),
        ins[1].data(),
        ins[2].data(),
        ins[3].data(),
        ins[4].data(),
        ins[5].data(),
    );
    let rows = n * t;
    // Drive term B u_t for every step at once.
    let mut drive = vec![0.0; rows * ds];
    gemm(rows, d_in, ds, 1.0, u, false, b, true, 0.0, &mut drive);
    if let Some((w, _)) = noise {
        for seq in drive.chunks_mut(t * ds) {
            seq.iter_mut().zip(w.data()).for_each(|(v, wv)| *v += wv);
        }
    }
    let mut states = vec![0.0; rows * ds];
    for seq in 0..n {
        let mut state = x0.to_vec();
        let mut next = vec![0.0; ds];
        for step in 0..t {
            let row = (seq * t + step) * ds;
            states[row..row + ds].copy_from_slice(&state);
            if step + 1 == t {
                break;
            }
            for (i, nv) in next.iter_mut().enumerate() {
                let ai = &a[i * ds..(i + 1) * ds];
                *nv = drive[row + i] + ai.iter().zip(&state).map(|(p, q)| p * q).sum::<f64>();
            }
            std::mem::swap(&mut state, &mut next);
        }
    }
    let mut y = vec![0.0; rows * d_out];
    gemm(rows, ds, d_out, 1.0, &states, false, c, true, 0.0, &mut y);
    gemm(rows, d_in, d_out, 1.0, u, false, d, true, 1.0, &mut y);
    if let Some((_, v)) = noise {
        for seq in y.chunks_mut(t * d_out) {
            seq.iter_mut().zip(v.data()).for_each(|(yv, vv)| *yv += vv);
        }
    }
    (y, states)
}

fn ssm_backward(ins: &[&Tensor], noise: Option<&(Tensor, Tensor)>, g: &[f64], need: &[bool]) -> Vec<Option<Vec<f64>>> {
    let us = ins[0].shape();
    let (n, t, d_in) = (us[0], us[1], us[2]);
    let ds = ins[1].shape()[0];
    let d_out = ins[3].shape()[0];
    let (u, a, b, c, d) = (ins[0].data(), ins[1].data(), ins[2].data(), ins[3].data(), ins[4].data());
    let rows = n * t;
    let (_, states) = ssm_forward(ins, noise);

    // Adjoint of each visited state: lam_t = C^T g_t + A^T lam_{t+1}.
    let mut lam = vec![0.0; rows * ds];
    gemm(rows, d_out, ds, 1.0, g, false, c, false, 0.0, &mut lam);
    for seq in 0..n {
        for step in (0..t.saturating_sub(1)).rev() {
            let (head, tail) = lam.split_at_mut((seq * t + step + 1) * ds);
            let next = &tail[..ds];
            let cur = &mut head[(seq * t + step) * ds..];
            for (j, cv) in cur.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..ds {
                    acc += a[i * ds + j] * next[i];
                }
                *cv += acc;
            }
        }
    }
    // Shifted adjoints pair lam_{t+1} with x_t and u_t for t < T-1; the
    // final step carries no successor.
    let mut shifted = vec![0.0; rows * ds];
    for seq in 0..n {
        let base = seq * t * ds;
        let span = (t - 1) * ds;
        shifted[base..base + span].copy_from_slice(&lam[base + ds..base + ds + span]);
    }

    let gu = need[0].then(|| {
        let mut gu = vec![0.0; rows * d_in];
        gemm(rows, d_out, d_in, 1.0, g, false, d, false, 0.0, &mut gu);
        gemm(rows, ds, d_in, 1.0, &shifted, false, b, false, 1.0, &mut gu);
        gu
    });
    let ga = need[1].then(|| {
        let mut ga = vec![0.0; ds * ds];
        gemm(ds, rows, ds, 1.0, &shifted, true, &states, false, 0.0, &mut ga);
        ga
    });
    let gb = need[2].then(|| {
        let mut gb = vec![0.0; ds * d_in];
        gemm(ds, rows, d_in, 1.0, &shifted, true, u, false, 0.0, &mut gb);
        gb
    });
    let gc = need[3].then(|| {
        let mut gc = vec![0.0; d_out * ds];
        gemm(d_out, rows, ds, 1.0, g, true, &states, false, 0.0, &mut gc);
        gc
    });
    let gd = need[4].then(|| {
        let mut gd = vec![0.0; d_out * d_in];
        gemm(d_out, rows, d_in, 1.0, g, true, u, false, 0.0, &mut gd);
        gd
    });
    let gx0 = need[5].then(|| {
        let mut gx0 = vec![0.0; ds];
        for seq in 0..n {
            let row = &lam[seq * t * ds..seq * t * ds + ds];
            gx0.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        gx0
    });
    vec![gu, ga, gb, gc, gd, gx0]
}
