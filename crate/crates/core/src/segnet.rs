//! Encoder/decoder segmentation network, its training loop and checkpoints.
//!
//! Encoder stage `i` has width `width * 2^i`. Stage 0 starts with a 3x3 stem,
//! later stages with a stride-2 3x3 convolution; each then runs two residual
//! blocks and a state-space block over the row-major token sequence, added
//! back onto its input. Decoder stages upsample with a stride-2 transposed
//! convolution, concatenate the matching encoder output, fuse with a 3x3
//! convolution and run one residual block. A 1x1 convolution and softmax
//! produce class probabilities.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::losses::{build_objective, LossConfig, LossKind, UncertaintyWeights, Weighting};
use crate::maps::{one_hot_batch, LabelMask, ProbMap};
use crate::nn::{self, ConvNormAct, MambaBlock, ResidualBlock};
use crate::optim::{sam_step, sgd_step, SamConfig};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::Tensor;

pub const DEFAULT_WIDTH: usize = 4;
pub const DEFAULT_BATCH: usize = 8;
/// Name of the uncertainty log-variance vector in training parameter sets.
pub const LOG_VAR_PARAM: &str = "loss.log_var";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub stages: usize,
    pub width: usize,
    pub d_state: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            classes: 4,
            stages: 3,
            width: DEFAULT_WIDTH,
            d_state: nn::DEFAULT_D_STATE,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.stages < 2 {
            return bad(format!("stage count {} must be at least 2", self.stages));
        }
        if self.stages > 8 {
            return bad(format!("stage count {} exceeds 8", self.stages));
        }
        if !(2..=256).contains(&self.classes) {
            return bad(format!("class count {} outside 2..=256", self.classes));
        }
        if self.width == 0 || self.in_channels == 0 || self.d_state == 0 {
            return bad("width, input channels and d_state must be positive".into());
        }
        Ok(())
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.width << stage
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.stages - 1)
    }
}

struct EncoderStage {
    entry: ConvNormAct,
    res: [ResidualBlock; 2],
    mamba: MambaBlock,
}

struct DecoderStage {
    up: String,
    in_channels: usize,
    out_channels: usize,
    fuse: ConvNormAct,
    res: ResidualBlock,
}

struct Layout {
    encoder: Vec<EncoderStage>,
    /// Deepest first.
    decoder: Vec<DecoderStage>,
}

fn layout(cfg: &ModelConfig) -> Layout {
    let encoder = (0..cfg.stages)
        .map(|i| {
            let c = cfg.stage_width(i);
            let entry = if i == 0 {
                ConvNormAct::new("enc0.stem", cfg.in_channels, c, 3, 1)
            } else {
                ConvNormAct::new(format!("enc{i}.down"), cfg.stage_width(i - 1), c, 3, 2)
            };
            EncoderStage {
                entry,
                res: [
                    ResidualBlock::new(format!("enc{i}.res1"), c),
                    ResidualBlock::new(format!("enc{i}.res2"), c),
                ],
                mamba: MambaBlock::new(format!("enc{i}.mamba"), c, cfg.d_state),
            }
        })
        .collect();
    let decoder = (0..cfg.stages - 1)
        .rev()
        .map(|i| {
            let c = cfg.stage_width(i);
            DecoderStage {
                up: format!("dec{i}.up"),
                in_channels: cfg.stage_width(i + 1),
                out_channels: c,
                fuse: ConvNormAct::new(format!("dec{i}.fuse"), 2 * c, c, 3, 1),
                res: ResidualBlock::new(format!("dec{i}.res"), c),
            }
        })
        .collect();
    Layout { encoder, decoder }
}

/// A configured network and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

/// Builds a model with seeded He-style initialization.
pub fn build_model(cfg: ModelConfig) -> Result<SegModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let net = layout(&cfg);
    for stage in &net.encoder {
        stage.entry.declare(&mut params, &mut rng)?;
        for r in &stage.res {
            r.declare(&mut params, &mut rng)?;
        }
        stage.mamba.declare(&mut params, &mut rng)?;
    }
    for stage in &net.decoder {
        let std = (2.0 / (stage.in_channels * 4) as f64).sqrt();
        params.insert(
            stage.up.clone(),
            nn::normal_tensor(&mut rng, &[stage.in_channels, stage.out_channels, 2, 2], std),
        )?;
        stage.fuse.declare(&mut params, &mut rng)?;
        stage.res.declare(&mut params, &mut rng)?;
    }
    params.insert("head.conv", nn::he_conv(&mut rng, cfg.classes, cfg.width, 1))?;
    params.insert("head.bias", Tensor::zeros(&[cfg.classes]))?;
    Ok(SegModel { cfg, params })
}

impl SegModel {
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::dim(format!(
                "expected [n, {}, h, w] input, got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let d = self.cfg.divisor();
        if shape[2] % d != 0 || shape[3] % d != 0 {
            return Err(Error::dim(format!(
                "spatial size {}x{} is not divisible by {d}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Class probabilities `[n, classes, h, w]` for a `[n, in, h, w]` input.
    pub fn forward(&self, g: &mut Graph, x: Var, p: &BoundParams) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let net = layout(&self.cfg);
        let mut skips = Vec::with_capacity(net.encoder.len());
        let mut h = x;
        for stage in &net.encoder {
            h = stage.entry.forward(g, h, p)?;
            for r in &stage.res {
                h = r.forward(g, h, p)?;
            }
            let (hh, ww) = (g.shape(h)[2], g.shape(h)[3]);
            let seq = nn::map_to_sequence(g, h)?;
            let mixed = stage.mamba.forward(g, seq, p)?;
            let mixed = nn::sequence_to_map(g, mixed, hh, ww)?;
            h = g.add(h, mixed)?;
            skips.push(h);
        }
        skips.pop();
        for stage in &net.decoder {
            let up = g.conv_transpose2d(h, p.get(&stage.up)?, 2, 0)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            let cat = g.concat(&[up, skip], 1)?;
            h = stage.fuse.forward(g, cat, p)?;
            h = stage.res.forward(g, h, p)?;
        }
        let logits = g.conv2d(h, p.get("head.conv")?, 1, 0)?;
        let logits = g.add_channel(logits, p.get("head.bias")?, 1)?;
        g.softmax(logits, 1)
    }

    /// Probabilities for one `[in, h, w]` image (or `[h, w]` when the model
    /// takes a single channel).
    pub fn predict(&self, image: &Tensor) -> Result<ProbMap> {
        Ok(self.predict_batch(std::slice::from_ref(image))?.remove(0))
    }

    pub fn predict_batch(&self, images: &[Tensor]) -> Result<Vec<ProbMap>> {
        let first = images.first().ok_or(Error::EmptyDataset)?;
        let per_image: Vec<usize> = match first.rank() {
            2 => vec![1, first.shape()[0], first.shape()[1]],
            3 => first.shape().to_vec(),
            _ => return Err(Error::dim(format!("image shape {:?} is not 2-D", first.shape()))),
        };
        let plane: usize = per_image.iter().product();
        let mut data = Vec::with_capacity(plane * images.len());
        for im in images {
            if im.numel() != plane || im.rank() != first.rank() || im.shape() != first.shape() {
                return Err(Error::dim("images in a batch must share shape"));
            }
            data.extend_from_slice(im.data());
        }
        let mut shape = vec![images.len()];
        shape.extend_from_slice(&per_image);
        self.check_input(&shape)?;

        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x = g.constant(Tensor::from_parts(shape, data));
        let probs = self.forward(&mut g, x, &bound)?;
        let out = g.get(probs)?;
        let (c, h, w) = (self.cfg.classes, per_image[1], per_image[2]);
        out.data()
            .chunks(c * h * w)
            .map(|chunk| ProbMap::new(Tensor::from_parts(vec![c, h, w], chunk.to_vec())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Sam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Sam => "sam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "sam" => Ok(OptimizerKind::Sam),
            other => Err(Error::InvalidConfig(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    /// Learning rate and zero-gradient policy apply to both optimizers; the
    /// radius only to SAM.
    pub sam: SamConfig,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sam,
            sam: SamConfig::default(),
            batch_size: DEFAULT_BATCH,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        self.sam.validate()
    }
}

/// Model plus the loss-side parameters that train alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: SegModel,
    /// Uncertainty log-variances, present for uncertainty-weighted losses.
    pub log_vars: Option<Tensor>,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(model: SegModel, loss: &LossConfig) -> Result<Self> {
        loss.validate()?;
        let log_vars = match loss.weighting {
            Weighting::Uncertainty => Some(UncertaintyWeights::new(loss.uncertainty_count())?.to_tensor()),
            Weighting::Sum => None,
        };
        Ok(Self {
            model,
            log_vars,
            epochs_done: 0,
        })
    }

    /// Model parameters followed by the log-variances, if any.
    pub fn trainable(&self) -> ParamSet {
        let mut p = self.model.params.clone();
        if let Some(u) = &self.log_vars {
            p.insert(LOG_VAR_PARAM, u.clone()).expect("reserved name");
        }
        p
    }

    fn absorb(&mut self, mut trained: ParamSet) -> Result<()> {
        if let Some(u) = trained.get(LOG_VAR_PARAM) {
            self.log_vars = Some(u.clone());
        }
        trained = trained.filter(|n| n != LOG_VAR_PARAM);
        self.model.params.update_from(&trained)
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.log_vars
            .as_ref()
            .map(|u| u.data().iter().map(|v| (0.5 * v).exp()).collect())
            .unwrap_or_default()
    }
}

/// Loss value, per-component values (dice, ce, focal) and gradients at
/// `params` for one batch.
pub fn batch_loss(
    cfg: &ModelConfig,
    params: &ParamSet,
    images: &Tensor,
    targets: &Tensor,
    loss: &LossConfig,
) -> Result<(f64, [f64; 3], ParamSet)> {
    let model = SegModel {
        cfg: *cfg,
        params: ParamSet::new(),
    };
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(images.clone());
    let t = g.constant(targets.clone());
    let probs = model.forward(&mut g, x, &bound)?;
    let log_vars = match loss.weighting {
        Weighting::Uncertainty => Some(bound.get(LOG_VAR_PARAM)?),
        Weighting::Sum => None,
    };
    let terms = build_objective(&mut g, probs, t, loss, log_vars)?;
    let value = g.get(terms.objective)?.item();
    let mut parts = [0.0; 3];
    for (slot, kind) in parts.iter_mut().zip(LossKind::ALL) {
        *slot = g.get(terms.component(kind))?.item();
    }
    let grads = bound.collect(&g.backward(terms.objective)?);
    Ok((value, parts, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// One-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean dice, cross-entropy and focal losses, in that order.
    pub components: [f64; 3],
    /// `sigma_m` after the epoch; empty without uncertainty weighting.
    pub sigmas: Vec<f64>,
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mix = seed ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
    order
}

/// Stacks samples into `[n, 1, h, w]` images and `[n, classes, h, w]` targets.
pub fn stack_batch(samples: &[&SegSample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.height() != h || s.width() != w {
            return Err(Error::dim("samples in a batch must share geometry"));
        }
        data.extend(s.image.iter().map(|&v| v as f64));
    }
    let masks: Vec<&LabelMask> = samples.iter().map(|s| &s.mask).collect();
    Ok((
        Tensor::from_parts(vec![samples.len(), 1, h, w], data),
        one_hot_batch(&masks)?,
    ))
}

fn non_finite_as_loss(batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op, .. } => Error::NonFiniteLoss { batch, op },
        other => other,
    }
}

/// One pass over `data` in a seeded shuffle order, updating `state`.
pub fn train_epoch(state: &mut TrainState, data: &[SegSample], train: &TrainConfig, loss: &LossConfig) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    train.validate()?;
    loss.validate()?;
    if (loss.weighting == Weighting::Uncertainty) != state.log_vars.is_some() {
        return Err(Error::InvalidConfig("loss weighting does not match the training state".into()));
    }
    let cfg = state.model.cfg;
    let order = epoch_order(cfg.seed, state.epochs_done, data.len());
    let (mut loss_sum, mut parts_sum) = (0.0, [0.0; 3]);

    for (batch, idx) in order.chunks(train.batch_size).enumerate() {
        let samples: Vec<&SegSample> = idx.iter().map(|&i| &data[i]).collect();
        let (images, targets) = stack_batch(&samples)?;
        let params = state.trainable();
        let mut first_parts = None;
        let mut objective = |p: &ParamSet| {
            let (v, parts, grads) = batch_loss(&cfg, p, &images, &targets, loss)?;
            first_parts.get_or_insert(parts);
            Ok((v, grads))
        };
        let (value, next) = match train.optimizer {
            OptimizerKind::Sam => {
                let step = sam_step(&params, &mut objective, &train.sam).map_err(non_finite_as_loss(batch))?;
                (step.loss, step.params)
            }
            OptimizerKind::Sgd => {
                let (v, grads) = objective(&params).map_err(non_finite_as_loss(batch))?;
                (v, sgd_step(&params, &grads, train.sam.lr)?)
            }
        };
        if !value.is_finite() || !next.all_finite() {
            return Err(Error::NonFiniteLoss { batch, op: "parameter update" });
        }
        let n = samples.len() as f64;
        loss_sum += value * n;
        for (acc, v) in parts_sum.iter_mut().zip(first_parts.expect("objective ran")) {
            *acc += v * n;
        }
        state.absorb(next)?;
    }
    state.epochs_done += 1;
    let total = data.len() as f64;
    Ok(EpochStats {
        epoch: state.epochs_done,
        mean_loss: loss_sum / total,
        components: parts_sum.map(|v| v / total),
        sigmas: state.sigmas(),
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UUSEGCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes the model config and every tensor of `params`.
pub fn encode_checkpoint(cfg: &ModelConfig, params: &ParamSet) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [cfg.in_channels, cfg.classes, cfg.stages, cfg.width, cfg.d_state] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.into(),
                detail: format!("{what} needs {n} bytes at offset {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint produced by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ModelConfig, ParamSet)> {
    let corrupt = |detail: String| Error::Corrupt {
        path: path.into(),
        detail,
    };
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "UUSEGCK",
        });
    }
    let mut r = Reader {
        bytes,
        pos: CHECKPOINT_MAGIC.len(),
        path,
    };
    let version = r.u32("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let cfg = ModelConfig {
        in_channels: r.u32("config")?,
        classes: r.u32("config")?,
        stages: r.u32("config")?,
        width: r.u32("config")?,
        d_state: r.u32("config")?,
        seed: r.u64("config")?,
    };
    cfg.validate().map_err(|e| corrupt(e.to_string()))?;
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for i in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| corrupt(format!("tensor {i} name is not UTF-8")))?
            .to_owned();
        let rank = r.u32("rank")?;
        if rank == 0 || rank > 8 {
            return Err(corrupt(format!("tensor {name:?} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| corrupt(format!("tensor {name:?} has dims {shape:?}")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| corrupt("size overflow".into()))?, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params
            .insert(name, Tensor::from_parts(shape, data))
            .map_err(|e| corrupt(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::LengthMismatch {
            path: path.into(),
            detail: format!("{} trailing bytes after {count} tensors", bytes.len() - r.pos),
        });
    }
    Ok((cfg, params))
}

/// Writes the model and, when present, the log-variances.
pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(&state.model.cfg, &state.trainable())).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and checks its tensors against the config's layout.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (cfg, mut params) = decode_checkpoint(&bytes, path)?;
    let log_vars = params.get(LOG_VAR_PARAM).cloned();
    params = params.filter(|n| n != LOG_VAR_PARAM);
    let reference = build_model(cfg)?;
    let layout_ok = params.len() == reference.params.len()
        && reference
            .params
            .iter()
            .all(|(n, t)| params.get(n).is_some_and(|p| p.shape() == t.shape()));
    if !layout_ok {
        return Err(Error::Corrupt {
            path: path.into(),
            detail: "tensors do not match the configured architecture".into(),
        });
    }
    let mut model = reference;
    model.params.update_from(&params)?;
    Ok(TrainState {
        model,
        log_vars,
        epochs_done: 0,
    })
}
