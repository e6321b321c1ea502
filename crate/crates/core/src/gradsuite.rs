//! Registry of finite-difference gradient checks over every differentiable
//! graph operation, the network blocks, the losses and a small end-to-end
//! model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_many, grad_check_sampled, Graph, Var};
use crate::error::Result;
use crate::losses::{self, DiceMode, LossConfig};
use crate::maps::LabelMask;
use crate::nn::{self, ConvNormAct, MambaBlock, ResidualBlock};
use crate::params::{BoundParams, ParamSet};
use crate::segnet::{build_model, ModelConfig, SegModel};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const POINTS: usize = 10;

type CaseFn = fn(&mut ChaCha8Rng) -> Result<f64>;

/// One named check; each run draws a fresh random interior point.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    run: CaseFn,
}

impl std::fmt::Debug for GradCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradCase").field("name", &self.name).finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: &'static str,
    pub points: usize,
    pub max_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

impl GradCase {
    /// Worst relative error over `points` random points drawn from `seed`.
    pub fn run(&self, seed: u64, points: usize) -> Result<GradReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(self.name));
        let mut worst = 0.0f64;
        for _ in 0..points {
            worst = worst.max((self.run)(&mut rng)?);
        }
        Ok(GradReport {
            name: self.name,
            points,
            max_error: worst,
        })
    }
}

fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Values with magnitude in `[0.1, 1]` and random sign, away from kinks at 0.
fn signed(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

/// `sum(y * r)` for a fixed random `r`, turning any node into a scalar.
fn project(g: &mut Graph, y: Var, rng: &mut impl Rng) -> Result<Var> {
    let r = g.constant(normal(rng, &g.shape(y).to_vec()));
    let prod = g.mul(y, r)?;
    g.sum(prod)
}

/// Checks a unary node builder at a point drawn by `point`.
fn unary(
    rng: &mut ChaCha8Rng,
    point: impl FnOnce(&mut ChaCha8Rng) -> Tensor,
    build: impl Fn(&mut Graph, Var) -> Result<Var>,
) -> Result<f64> {
    let point = point(rng);
    let seed = rng.gen::<u64>();
    grad_check_many(
        |g, v| {
            let y = build(g, v[0])?;
            project(g, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        &[point],
        STEP,
    )
}

fn binary(
    rng: &mut ChaCha8Rng,
    points: impl FnOnce(&mut ChaCha8Rng) -> [Tensor; 2],
    build: impl Fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let points = points(rng);
    let seed = rng.gen::<u64>();
    grad_check_many(
        |g, v| {
            let y = build(g, v[0], v[1])?;
            project(g, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        &points,
        STEP,
    )
}

fn random_mask(rng: &mut impl Rng, h: usize, w: usize, classes: usize) -> LabelMask {
    let labels = (0..h * w).map(|_| rng.gen_range(0..classes) as u8).collect();
    LabelMask::new(h, w, classes, labels).expect("valid labels")
}

/// A loss node checked with respect to interior probabilities.
fn loss_case(rng: &mut ChaCha8Rng, build: impl Fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let mask = random_mask(rng, 3, 4, 4);
    let target = mask.one_hot().reshape(vec![1, 4, 3, 4])?;
    let p = uniform(rng, &[1, 4, 3, 4], 0.05, 0.95);
    grad_check_many(
        |g, v| {
            let t = g.constant(target.clone());
            build(g, v[0], t)
        },
        &[p],
        STEP,
    )
}

/// Checks a block's output with respect to its input and every parameter.
fn block_case(
    rng: &mut ChaCha8Rng,
    params: &ParamSet,
    input: Tensor,
    forward: impl Fn(&mut Graph, Var, &BoundParams) -> Result<Var>,
) -> Result<f64> {
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut points = vec![input];
    points.extend(params.iter().map(|(_, t)| t.clone()));
    let seed = rng.gen::<u64>();
    grad_check_many(
        |g, v| {
            let bound = BoundParams::from_vars(names.iter().cloned().zip(v[1..].iter().copied()));
            let y = forward(g, v[0], &bound)?;
            project(g, y, &mut ChaCha8Rng::seed_from_u64(seed))
        },
        &points,
        STEP,
    )
}

/// Perturbs freshly initialized parameters so that zero-initialized entries
/// (biases, affine offsets) are exercised away from their start values.
fn jitter(params: &ParamSet, rng: &mut impl Rng) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        let data = t.data().iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
        out.insert(name, Tensor::from_parts(t.shape().to_vec(), data)).expect("unique names");
    }
    out
}

fn model_probe(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = ModelConfig {
        width: 2,
        d_state: 2,
        seed: rng.gen(),
        ..ModelConfig::default()
    };
    let model = build_model(cfg)?;
    let params = jitter(&model.params, rng);
    let probe: Vec<&str> = vec![
        "enc0.stem.conv",
        "enc0.res1.unit1.norm.gamma",
        "enc1.mamba.ssm.a",
        "enc1.mamba.in_proj",
        "enc2.res2.unit2.conv",
        "dec1.up",
        "dec0.fuse.conv",
        "head.conv",
        "head.bias",
    ];
    let fixed = params.filter(|n| !probe.contains(&n));
    let points: Vec<Tensor> = probe.iter().map(|n| params.get(n).expect("known name").clone()).collect();
    let image = uniform(rng, &[1, 1, 8, 8], 0.0, 1.0);
    let target = random_mask(rng, 8, 8, 4).one_hot().reshape(vec![1, 4, 8, 8])?;
    let shell = SegModel {
        cfg,
        params: ParamSet::new(),
    };
    grad_check_sampled(
        |g, v| {
            let mut vars: Vec<(String, Var)> = fixed.iter().map(|(n, t)| (n.to_owned(), g.constant(t.clone()))).collect();
            vars.extend(probe.iter().map(|n| n.to_string()).zip(v.iter().copied()));
            let bound = BoundParams::from_vars(vars);
            let x = g.constant(image.clone());
            let t = g.constant(target.clone());
            let probs = shell.forward(g, x, &bound)?;
            losses::dice_loss_node(g, probs, t, DiceMode::PerClass)
        },
        &points,
        STEP,
        6,
    )
}

/// Every registered check, in report order.
pub fn registry() -> Vec<GradCase> {
    macro_rules! case {
        ($name:literal, $f:expr) => {
            GradCase {
                name: $name,
                run: $f,
            }
        };
    }
    vec![
        case!("add", |r| binary(r, |r| [normal(r, &[2, 3]), normal(r, &[2, 3])], |g, a, b| g.add(a, b))),
        case!("sub", |r| binary(r, |r| [normal(r, &[2, 3]), normal(r, &[2, 3])], |g, a, b| g.sub(a, b))),
        case!("mul", |r| binary(r, |r| [normal(r, &[2, 3]), normal(r, &[2, 3])], |g, a, b| g.mul(a, b))),
        case!("div", |r| {
            binary(r, |r| [normal(r, &[2, 3]), uniform(r, &[2, 3], 0.5, 2.0)], |g, a, b| g.div(a, b))
        }),
        case!("scale", |r| unary(r, |r| normal(r, &[5]), |g, x| g.scale(x, -1.7))),
        case!("add_scalar", |r| unary(r, |r| normal(r, &[5]), |g, x| g.add_scalar(x, 0.3))),
        case!("add_channel", |r| {
            binary(r, |r| [normal(r, &[2, 3, 2, 2]), normal(r, &[3])], |g, x, b| g.add_channel(x, b, 1))
        }),
        case!("mul_channel", |r| {
            binary(r, |r| [normal(r, &[2, 3, 2, 2]), normal(r, &[3])], |g, x, s| g.mul_channel(x, s, 1))
        }),
        case!("matmul", |r| binary(r, |r| [normal(r, &[3, 4]), normal(r, &[4, 2])], |g, a, b| g.matmul(a, b))),
        case!("conv2d_s1", |r| {
            binary(r, |r| [normal(r, &[2, 2, 5, 5]), normal(r, &[3, 2, 3, 3])], |g, x, w| g.conv2d_same(x, w, 1))
        }),
        case!("conv2d_s2", |r| {
            binary(r, |r| [normal(r, &[2, 2, 6, 6]), normal(r, &[3, 2, 3, 3])], |g, x, w| g.conv2d_same(x, w, 2))
        }),
        case!("conv_transpose2d_s2", |r| {
            binary(r, |r| [normal(r, &[2, 3, 3, 3]), normal(r, &[3, 2, 2, 2])], |g, x, w| {
                g.conv_transpose2d(x, w, 2, 0)
            })
        }),
        case!("leaky_relu", |r| unary(r, |r| signed(r, &[8]), |g, x| g.leaky_relu(x, nn::LEAKY_SLOPE))),
        case!("sigmoid", |r| unary(r, |r| normal(r, &[6]), |g, x| g.sigmoid(x))),
        case!("silu", |r| unary(r, |r| normal(r, &[6]), |g, x| g.silu(x))),
        case!("exp", |r| unary(r, |r| normal(r, &[6]), |g, x| g.exp(x))),
        case!("log", |r| unary(r, |r| uniform(r, &[6], 0.2, 2.0), |g, x| g.log(x))),
        case!("log_clamped", |r| {
            unary(r, |r| uniform(r, &[6], 0.2, 2.0), |g, x| g.log_clamped(x, losses::LOG_FLOOR))
        }),
        case!("pow", |r| unary(r, |r| uniform(r, &[6], 0.2, 2.0), |g, x| g.pow(x, 2.5))),
        case!("instance_norm", |r| unary(r, |r| normal(r, &[2, 3, 3, 3]), |g, x| g.instance_norm(x, nn::NORM_EPS))),
        case!("layer_norm", |r| unary(r, |r| normal(r, &[2, 3, 4]), |g, x| g.layer_norm(x, nn::NORM_EPS))),
        case!("softmax", |r| unary(r, |r| normal(r, &[2, 4, 3]), |g, x| g.softmax(x, 1))),
        case!("sum", |r| unary(r, |r| normal(r, &[2, 3]), |g, x| g.sum(x))),
        case!("mean", |r| unary(r, |r| normal(r, &[2, 3]), |g, x| g.mean(x))),
        case!("sum_axis", |r| unary(r, |r| normal(r, &[2, 3, 4]), |g, x| g.sum_axis(x, 1))),
        case!("reshape", |r| unary(r, |r| normal(r, &[2, 6]), |g, x| g.reshape(x, &[3, 4]))),
        case!("permute", |r| unary(r, |r| normal(r, &[2, 3, 4]), |g, x| g.permute(x, &[2, 0, 1]))),
        case!("slice", |r| unary(r, |r| normal(r, &[2, 5, 2]), |g, x| g.slice(x, 1, 1, 4))),
        case!("concat", |r| {
            binary(r, |r| [normal(r, &[2, 2, 3]), normal(r, &[2, 3, 3])], |g, a, b| g.concat(&[a, b], 1))
        }),
        case!("causal_conv1d", |r| {
            binary(r, |r| [normal(r, &[2, 5, 3]), normal(r, &[3, nn::MIX_KERNEL])], |g, x, w| g.causal_conv1d(x, w))
        }),
        case!("ssm_scan", |r| {
            let (ds, di, d_out, t) = (3, 2, 2, 5);
            let a = uniform(r, &[ds, ds], -0.5, 0.5);
            let pts = [
                normal(r, &[2, t, di]),
                a,
                normal(r, &[ds, di]),
                normal(r, &[d_out, ds]),
                normal(r, &[d_out, di]),
                normal(r, &[ds]),
            ];
            let seed = r.gen::<u64>();
            grad_check_many(
                |g, v| {
                    let y = g.ssm_scan(v[0], v[1], v[2], v[3], v[4], v[5], None)?;
                    project(g, y, &mut ChaCha8Rng::seed_from_u64(seed))
                },
                &pts,
                STEP,
            )
        }),
        case!("attention", |r| {
            let pts = [normal(r, &[3, 2]), normal(r, &[4, 2]), normal(r, &[4, 3])];
            let seed = r.gen::<u64>();
            grad_check_many(
                |g, v| {
                    let y = nn::attention(g, v[0], v[1], v[2])?;
                    project(g, y, &mut ChaCha8Rng::seed_from_u64(seed))
                },
                &pts,
                STEP,
            )
        }),
        case!("conv_norm_act", |r| {
            let layer = ConvNormAct::new("cna", 2, 3, 3, 2);
            let mut p = ParamSet::new();
            layer.declare(&mut p, r)?;
            let p = jitter(&p, r);
            let x = normal(r, &[2, 2, 4, 4]);
            block_case(r, &p, x, |g, x, b| layer.forward(g, x, b))
        }),
        case!("residual_block", |r| {
            let block = ResidualBlock::new("res", 2);
            let mut p = ParamSet::new();
            block.declare(&mut p, r)?;
            let p = jitter(&p, r);
            let x = normal(r, &[2, 2, 4, 4]);
            block_case(r, &p, x, |g, x, b| block.forward(g, x, b))
        }),
        case!("mamba_block", |r| {
            let block = MambaBlock::new("mamba", 3, 2);
            let mut p = ParamSet::new();
            block.declare(&mut p, r)?;
            let p = jitter(&p, r);
            // A 4x4 feature map flattened to 16 tokens.
            let x = normal(r, &[2, 3, 4, 4]);
            block_case(r, &p, x, |g, x, b| {
                let seq = nn::map_to_sequence(g, x)?;
                let y = block.forward(g, seq, b)?;
                nn::sequence_to_map(g, y, 4, 4)
            })
        }),
        case!("dice_loss", |r| loss_case(r, |g, p, t| losses::dice_loss_node(g, p, t, DiceMode::PerClass))),
        case!("dice_loss_pooled", |r| loss_case(r, |g, p, t| losses::dice_loss_node(g, p, t, DiceMode::Pooled))),
        case!("ce_loss", |r| loss_case(r, losses::cross_entropy_node)),
        case!("focal_loss", |r| loss_case(r, |g, p, t| losses::focal_node(g, p, t, losses::DEFAULT_GAMMA))),
        case!("ua_loss", |r| {
            let cfg = LossConfig::default();
            let mask = random_mask(r, 3, 4, 4);
            let target = mask.one_hot().reshape(vec![1, 4, 3, 4])?;
            let pts = [uniform(r, &[1, 4, 3, 4], 0.05, 0.95), uniform(r, &[3], -1.0, 1.0)];
            grad_check_many(
                |g, v| {
                    let t = g.constant(target.clone());
                    Ok(losses::build_objective(g, v[0], t, &cfg, Some(v[1]))?.objective)
                },
                &pts,
                STEP,
            )
        }),
        case!("segnet_8x8", model_probe),
    ]
}

/// Runs every registered check with `POINTS` points each.
pub fn run_all(seed: u64) -> Result<Vec<GradReport>> {
    registry().iter().map(|c| c.run(seed, POINTS)).collect()
}
