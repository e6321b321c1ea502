//! Segmentation losses and the learnable uncertainty-weighted combination.
//!
//! Graph builders take `[n, classes, h, w]` probabilities and one-hot targets
//! of the same shape. Pixel-normalized losses divide by `n * h * w`.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::maps::{LabelMask, ProbMap};
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;
/// Added to numerator and denominator of every Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-6;
pub const DEFAULT_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Dice,
    CrossEntropy,
    Focal,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Dice, LossKind::CrossEntropy, LossKind::Focal];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::CrossEntropy => "ce",
            LossKind::Focal => "focal",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "dice" | "dc" => Ok(LossKind::Dice),
            "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            "focal" => Ok(LossKind::Focal),
            other => Err(Error::InvalidConfig(format!("unknown loss component {other:?}"))),
        }
    }
}

/// How Dice is reduced over the foreground classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiceMode {
    /// One Dice ratio per foreground class, averaged.
    PerClass,
    /// A single ratio over the pooled foreground sums.
    Pooled,
}

/// How the component losses are combined into the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// `sum_m L_m / (2 sigma_m^2) + log(1 + sigma_m^2)` with learned sigmas.
    Uncertainty,
    /// Unweighted sum of the components.
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub components: Vec<LossKind>,
    pub dice_mode: DiceMode,
    pub weighting: Weighting,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            components: LossKind::ALL.to_vec(),
            dice_mode: DiceMode::PerClass,
            weighting: Weighting::Uncertainty,
        }
    }
}

impl LossConfig {
    /// Plain cross-entropy, no learned weights.
    pub fn cross_entropy_only() -> Self {
        Self {
            components: vec![LossKind::CrossEntropy],
            weighting: Weighting::Sum,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("focal gamma {} must be >= 0", self.gamma)));
        }
        if self.components.is_empty() {
            return Err(Error::InvalidConfig("at least one loss component is required".into()));
        }
        for (i, c) in self.components.iter().enumerate() {
            if self.components[..i].contains(c) {
                return Err(Error::InvalidConfig(format!("loss component {c} listed twice")));
            }
        }
        Ok(())
    }

    /// Number of learned uncertainty parameters.
    pub fn uncertainty_count(&self) -> usize {
        match self.weighting {
            Weighting::Uncertainty => self.components.len(),
            Weighting::Sum => 0,
        }
    }
}

/// Learnable log-variances `u_m`, with `sigma_m^2 = exp(u_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyWeights {
    log_vars: Vec<f64>,
}

impl UncertaintyWeights {
    /// `m` components at `sigma = 1`.
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("at least one component is required".into()));
        }
        Ok(Self { log_vars: vec![0.0; m] })
    }

    pub fn from_log_vars(log_vars: Vec<f64>) -> Result<Self> {
        if log_vars.is_empty() || log_vars.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("log-variances must be finite and non-empty".into()));
        }
        Ok(Self { log_vars })
    }

    pub fn from_sigmas(sigmas: &[f64]) -> Result<Self> {
        if sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("sigmas must be positive".into()));
        }
        Self::from_log_vars(sigmas.iter().map(|s| 2.0 * s.ln()).collect())
    }

    pub fn len(&self) -> usize {
        self.log_vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_vars.is_empty()
    }

    pub fn log_vars(&self) -> &[f64] {
        &self.log_vars
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.log_vars.iter().map(|u| (0.5 * u).exp()).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.log_vars.clone())
    }
}

/// Sums a `[n, c, h, w]` node to per-class totals `[c]`.
fn per_class_sum(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.sum_axis(x, 3)?;
    let s = g.sum_axis(s, 2)?;
    g.sum_axis(s, 0)
}

fn check_pair(g: &Graph, probs: Var, target: Var) -> Result<(usize, usize)> {
    let (ps, ts) = (g.shape(probs), g.shape(target));
    if ps.len() != 4 || ps != ts || ps[1] < 2 {
        return Err(Error::dim(format!(
            "probabilities {ps:?} and targets {ts:?} must share a [n, classes >= 2, h, w] shape"
        )));
    }
    Ok((ps[1], ps[0] * ps[2] * ps[3]))
}

/// `1 - (2 sum p g + eps) / (sum p + sum g + eps)` over foreground classes.
pub fn dice_loss_node(g: &mut Graph, probs: Var, target: Var, mode: DiceMode) -> Result<Var> {
    let (classes, _) = check_pair(g, probs, target)?;
    let joint = g.mul(probs, target)?;
    let inter = per_class_sum(g, joint)?;
    let p_sum = per_class_sum(g, probs)?;
    let t_sum = per_class_sum(g, target)?;
    let mut inter = g.slice(inter, 0, 1, classes)?;
    let mut p_sum = g.slice(p_sum, 0, 1, classes)?;
    let mut t_sum = g.slice(t_sum, 0, 1, classes)?;
    if mode == DiceMode::Pooled {
        inter = g.sum(inter)?;
        p_sum = g.sum(p_sum)?;
        t_sum = g.sum(t_sum)?;
    }
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_SMOOTH)?;
    let den = g.add(p_sum, t_sum)?;
    let den = g.add_scalar(den, DICE_SMOOTH)?;
    let dsc = g.div(num, den)?;
    let mean = g.mean(dsc)?;
    let neg = g.scale(mean, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// `-(1/P) sum g log p`.
pub fn cross_entropy_node(g: &mut Graph, probs: Var, target: Var) -> Result<Var> {
    let (_, pixels) = check_pair(g, probs, target)?;
    let log_p = g.log_clamped(probs, LOG_FLOOR)?;
    let terms = g.mul(target, log_p)?;
    let total = g.sum(terms)?;
    g.scale(total, -1.0 / pixels as f64)
}

/// `-(1/P) sum (1 - p)^gamma g log p`.
pub fn focal_node(g: &mut Graph, probs: Var, target: Var, gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} must be >= 0")));
    }
    let (_, pixels) = check_pair(g, probs, target)?;
    let log_p = g.log_clamped(probs, LOG_FLOOR)?;
    let neg = g.scale(probs, -1.0)?;
    let complement = g.add_scalar(neg, 1.0)?;
    let modulator = g.pow(complement, gamma)?;
    let weighted = g.mul(modulator, target)?;
    let terms = g.mul(weighted, log_p)?;
    let total = g.sum(terms)?;
    g.scale(total, -1.0 / pixels as f64)
}

/// `sum_m L_m / (2 exp(u_m)) + log(1 + exp(u_m))` for scalar components
/// and a `[m]` log-variance node.
pub fn uncertainty_aware_node(g: &mut Graph, components: &[Var], log_vars: Var) -> Result<Var> {
    if components.is_empty() || g.shape(log_vars) != [components.len()] {
        return Err(Error::dim(format!(
            "{} components for log-variances of shape {:?}",
            components.len(),
            g.shape(log_vars)
        )));
    }
    if let Some(bad) = components.iter().find(|&&c| g.shape(c) != [1]) {
        return Err(Error::dim(format!("component {} is not a scalar", bad.index())));
    }
    let stacked = g.concat(components, 0)?;
    let var = g.exp(log_vars)?;
    let denom = g.scale(var, 2.0)?;
    let weighted = g.div(stacked, denom)?;
    let one_plus = g.add_scalar(var, 1.0)?;
    let reg = g.log(one_plus)?;
    let terms = g.add(weighted, reg)?;
    g.sum(terms)
}

pub fn component_node(g: &mut Graph, kind: LossKind, probs: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    match kind {
        LossKind::Dice => dice_loss_node(g, probs, target, cfg.dice_mode),
        LossKind::CrossEntropy => cross_entropy_node(g, probs, target),
        LossKind::Focal => focal_node(g, probs, target, cfg.gamma),
    }
}

/// Objective and component nodes of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub objective: Var,
    /// Every kind in [`LossKind::ALL`], whether or not it enters the objective.
    pub components: Vec<(LossKind, Var)>,
}

impl LossTerms {
    pub fn component(&self, kind: LossKind) -> Var {
        self.components
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|&(_, v)| v)
            .expect("all kinds are built")
    }
}

/// Builds the training objective. `log_vars` must be given exactly when the
/// configuration uses uncertainty weighting.
pub fn build_objective(
    g: &mut Graph,
    probs: Var,
    target: Var,
    cfg: &LossConfig,
    log_vars: Option<Var>,
) -> Result<LossTerms> {
    cfg.validate()?;
    let mut components = Vec::with_capacity(LossKind::ALL.len());
    for kind in LossKind::ALL {
        components.push((kind, component_node(g, kind, probs, target, cfg)?));
    }
    let terms = LossTerms {
        objective: probs,
        components,
    };
    let selected: Vec<Var> = cfg.components.iter().map(|&k| terms.component(k)).collect();
    let objective = match (cfg.weighting, log_vars) {
        (Weighting::Uncertainty, Some(u)) => uncertainty_aware_node(g, &selected, u)?,
        (Weighting::Sum, None) => {
            let mut acc = selected[0];
            for &v in &selected[1..] {
                acc = g.add(acc, v)?;
            }
            acc
        }
        (Weighting::Uncertainty, None) => {
            return Err(Error::InvalidArgument("uncertainty weighting needs log-variances".into()))
        }
        (Weighting::Sum, Some(_)) => {
            return Err(Error::InvalidArgument("unweighted objective takes no log-variances".into()))
        }
    };
    Ok(LossTerms { objective, ..terms })
}

fn eval_pair(p: &ProbMap, mask: &LabelMask, f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    if p.classes() != mask.classes() || p.height() != mask.height() || p.width() != mask.width() {
        return Err(Error::dim(format!(
            "probability map {:?} does not match a {}-class {}x{} mask",
            p.tensor().shape(),
            mask.classes(),
            mask.height(),
            mask.width()
        )));
    }
    let mut g = Graph::new();
    let shape = [1, p.classes(), p.height(), p.width()];
    let probs = g.constant(p.tensor().reshape(shape.to_vec())?);
    let target = g.constant(mask.one_hot().reshape(shape.to_vec())?);
    let out = f(&mut g, probs, target)?;
    Ok(g.get(out)?.item())
}

/// Soft Dice loss averaged over foreground classes.
pub fn dice_loss(p: &ProbMap, mask: &LabelMask) -> Result<f64> {
    eval_pair(p, mask, |g, a, b| dice_loss_node(g, a, b, DiceMode::PerClass))
}

pub fn cross_entropy_loss(p: &ProbMap, mask: &LabelMask) -> Result<f64> {
    eval_pair(p, mask, cross_entropy_node)
}

pub fn focal_loss(p: &ProbMap, mask: &LabelMask, gamma: f64) -> Result<f64> {
    eval_pair(p, mask, |g, a, b| focal_node(g, a, b, gamma))
}

pub fn uncertainty_aware_loss(components: &[f64], weights: &UncertaintyWeights) -> Result<f64> {
    if components.len() != weights.len() {
        return Err(Error::dim(format!(
            "{} components for {} uncertainty weights",
            components.len(),
            weights.len()
        )));
    }
    let mut g = Graph::new();
    let comps: Vec<Var> = components.iter().map(|&c| g.constant(Tensor::scalar(c))).collect();
    let u = g.constant(weights.to_tensor());
    let out = uncertainty_aware_node(&mut g, &comps, u)?;
    Ok(g.get(out)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(classes: usize, h: usize, w: usize, data: Vec<f64>) -> ProbMap {
        ProbMap::new(Tensor::new(vec![classes, h, w], data).unwrap()).unwrap()
    }

    fn mask(h: usize, w: usize, classes: usize, labels: Vec<u8>) -> LabelMask {
        LabelMask::new(h, w, classes, labels).unwrap()
    }

    #[test]
    fn perfect_prediction_gives_zero_losses() {
        let m = mask(2, 3, 4, vec![0, 1, 2, 3, 3, 0]);
        let p = ProbMap::new(m.one_hot()).unwrap();
        assert!(dice_loss(&p, &m).unwrap().abs() < 1e-9);
        assert_eq!(cross_entropy_loss(&p, &m).unwrap(), 0.0);
        assert_eq!(focal_loss(&p, &m, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn dice_hand_values() {
        // Two pixels, class-1 probabilities [0.5, 0.5], truth [1, 0].
        let p = map(2, 1, 2, vec![0.5, 0.5, 0.5, 0.5]);
        let m = mask(1, 2, 2, vec![1, 0]);
        assert!((dice_loss(&p, &m).unwrap() - 0.5).abs() < 1e-6);

        // No foreground mass where the truth is foreground.
        let p = map(2, 1, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let m = mask(1, 2, 2, vec![1, 1]);
        assert!((dice_loss(&p, &m).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dice_of_empty_image_and_prediction_is_zero() {
        let m = mask(1, 3, 3, vec![0, 0, 0]);
        let p = ProbMap::new(m.one_hot()).unwrap();
        assert_eq!(dice_loss(&p, &m).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_hand_values() {
        let m = mask(1, 1, 2, vec![0]);
        let p = map(2, 1, 1, vec![0.5, 0.5]);
        assert!((cross_entropy_loss(&p, &m).unwrap() - 0.69315).abs() < 1e-5);
        let m = mask(1, 1, 2, vec![1]);
        let p = map(2, 1, 1, vec![0.25, 0.75]);
        assert!((cross_entropy_loss(&p, &m).unwrap() - 0.28768).abs() < 1e-5);
    }

    #[test]
    fn focal_hand_value_and_gamma_zero() {
        let m = mask(1, 1, 2, vec![0]);
        let p = map(2, 1, 1, vec![0.5, 0.5]);
        assert!((focal_loss(&p, &m, 2.0).unwrap() - 0.17329).abs() < 1e-5);
        let p = map(2, 1, 2, vec![0.2, 0.9, 0.8, 0.1]);
        let m = mask(1, 2, 2, vec![1, 0]);
        assert_eq!(
            focal_loss(&p, &m, 0.0).unwrap().to_bits(),
            cross_entropy_loss(&p, &m).unwrap().to_bits()
        );
        assert!(focal_loss(&p, &m, -1.0).is_err());
    }

    #[test]
    fn clamped_log_keeps_zero_probabilities_finite() {
        let p = map(2, 1, 1, vec![0.0, 1.0]);
        let m = mask(1, 1, 2, vec![0]);
        let ce = cross_entropy_loss(&p, &m).unwrap();
        assert!((ce - (-LOG_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn uncertainty_hand_values() {
        let w = UncertaintyWeights::new(1).unwrap();
        assert!((uncertainty_aware_loss(&[0.0], &w).unwrap() - 0.69315).abs() < 1e-5);
        let w = UncertaintyWeights::new(3).unwrap();
        assert!((uncertainty_aware_loss(&[1.0; 3], &w).unwrap() - 3.57944).abs() < 1e-5);
        assert!(uncertainty_aware_loss(&[1.0; 2], &w).is_err());
    }

    #[test]
    fn sigma_round_trip() {
        let w = UncertaintyWeights::from_sigmas(&[0.5, 2.0]).unwrap();
        let s = w.sigmas();
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 2.0).abs() < 1e-15);
        assert!(UncertaintyWeights::from_sigmas(&[0.0]).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = map(2, 1, 2, vec![0.5; 4]);
        assert!(dice_loss(&p, &mask(2, 1, 2, vec![0, 1])).is_err());
        assert!(cross_entropy_loss(&p, &mask(1, 2, 3, vec![0, 1])).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let dup = LossConfig {
            components: vec![LossKind::Dice, LossKind::Dice],
            ..LossConfig::default()
        };
        assert!(dup.validate().is_err());
        let empty = LossConfig {
            components: vec![],
            ..LossConfig::default()
        };
        assert!(empty.validate().is_err());
        assert_eq!("dice".parse::<LossKind>().unwrap(), LossKind::Dice);
        assert!("hinge".parse::<LossKind>().is_err());
    }
}
