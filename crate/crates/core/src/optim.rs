//! Plain SGD, sharpness-aware minimization and a sharpness probe.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const DEFAULT_RHO: f64 = 0.05;
pub const DEFAULT_LR: f64 = 5e-3;
/// Gradient norms below this count as zero.
pub const ZERO_GRAD_NORM: f64 = 1e-12;

/// A scalar loss over a parameter set.
pub trait Objective {
    fn value_and_grad(&mut self, params: &ParamSet) -> Result<(f64, ParamSet)>;

    fn value(&mut self, params: &ParamSet) -> Result<f64> {
        Ok(self.value_and_grad(params)?.0)
    }
}

impl<F> Objective for F
where
    F: FnMut(&ParamSet) -> Result<(f64, ParamSet)>,
{
    fn value_and_grad(&mut self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        self(params)
    }
}

/// What a SAM step does when the first gradient vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroGradPolicy {
    /// Take a plain SGD step with the (near-zero) gradient.
    PlainStep,
    /// Leave the parameters unchanged.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamConfig {
    pub rho: f64,
    pub lr: f64,
    pub zero_grad_policy: ZeroGradPolicy,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self {
            rho: DEFAULT_RHO,
            lr: DEFAULT_LR,
            zero_grad_policy: ZeroGradPolicy::PlainStep,
        }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig(format!("rho {} must be >= 0", self.rho)));
        }
        check_lr(self.lr)
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidConfig(format!("learning rate {lr} must be >= 0")));
    }
    Ok(())
}

/// `theta - lr * grad`, elementwise.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
    check_lr(lr)?;
    params.check_aligned(grads)?;
    let mut out = ParamSet::new();
    for ((name, t), (_, g)) in params.iter().zip(grads.iter()) {
        let data = t.data().iter().zip(g.data()).map(|(p, d)| p - lr * d).collect();
        out.insert(name, Tensor::from_parts(t.shape().to_vec(), data))?;
    }
    Ok(out)
}

/// Result of one [`sam_step`].
#[derive(Debug, Clone)]
pub struct SamStep {
    pub params: ParamSet,
    /// Loss at the unperturbed parameters.
    pub loss: f64,
    /// Loss at the perturbed parameters, when a second pass ran.
    pub perturbed_loss: Option<f64>,
    /// Global L2 norm of the perturbation that was applied.
    pub perturbation_norm: f64,
    /// Set when the zero-gradient policy was applied.
    pub degenerate: bool,
}

/// One sharpness-aware step: ascend to `theta + rho g / |g|`, then descend
/// from `theta` with the gradient taken there.
pub fn sam_step(params: &ParamSet, objective: &mut impl Objective, cfg: &SamConfig) -> Result<SamStep> {
    cfg.validate()?;
    let (loss, grad) = objective.value_and_grad(params)?;
    params.check_aligned(&grad)?;
    let norm = grad.global_norm();
    if norm < ZERO_GRAD_NORM {
        let params = match cfg.zero_grad_policy {
            ZeroGradPolicy::PlainStep => sgd_step(params, &grad, cfg.lr)?,
            ZeroGradPolicy::Skip => params.clone(),
        };
        return Ok(SamStep {
            params,
            loss,
            perturbed_loss: None,
            perturbation_norm: 0.0,
            degenerate: true,
        });
    }
    if cfg.rho == 0.0 {
        // The perturbation vanishes, so the second gradient is the first.
        return Ok(SamStep {
            params: sgd_step(params, &grad, cfg.lr)?,
            loss,
            perturbed_loss: None,
            perturbation_norm: 0.0,
            degenerate: false,
        });
    }
    let epsilon = grad.scaled(cfg.rho / norm);
    let perturbed = params.add_scaled(&epsilon, 1.0)?;
    let (perturbed_loss, sharp_grad) = objective.value_and_grad(&perturbed)?;
    params.check_aligned(&sharp_grad)?;
    Ok(SamStep {
        params: sgd_step(params, &sharp_grad, cfg.lr)?,
        loss,
        perturbed_loss: Some(perturbed_loss),
        perturbation_norm: epsilon.global_norm(),
        degenerate: false,
    })
}

/// Largest loss increase found within the `rho`-ball around `params`.
///
/// Probes the centre itself, `ascent_steps` projected normalized-gradient
/// ascent iterates of step `rho`, and `random_dirs` seeded random directions
/// scaled to length `rho`.
pub fn sharpness_probe(
    params: &ParamSet,
    objective: &mut impl Objective,
    rho: f64,
    ascent_steps: usize,
    random_dirs: usize,
    seed: u64,
) -> Result<f64> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidArgument(format!("rho {rho} must be positive")));
    }
    if ascent_steps == 0 || random_dirs == 0 {
        return Err(Error::InvalidArgument("probe counts must be at least 1".into()));
    }
    let mut probe = 0usize;
    let mut checked = |v: f64| -> Result<f64> {
        probe += 1;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteProbe { probe })
        }
    };
    let base = checked(objective.value(params)?)?;
    let mut worst = 0.0f64;

    let mut epsilon = params.zeros_like();
    for _ in 0..ascent_steps {
        let (_, grad) = objective.value_and_grad(&params.add_scaled(&epsilon, 1.0)?)?;
        let norm = grad.global_norm();
        if norm < ZERO_GRAD_NORM {
            break;
        }
        epsilon = epsilon.add_scaled(&grad, rho / norm)?;
        let len = epsilon.global_norm();
        if len > rho {
            epsilon = epsilon.scaled(rho / len);
        }
        let v = checked(objective.value(&params.add_scaled(&epsilon, 1.0)?)?)?;
        worst = worst.max(v - base);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..random_dirs {
        let mut dir = ParamSet::new();
        for (name, t) in params.iter() {
            let data = (0..t.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
            dir.insert(name, Tensor::from_parts(t.shape().to_vec(), data))?;
        }
        let len = dir.global_norm();
        if len == 0.0 {
            continue;
        }
        let v = checked(objective.value(&params.add_scaled(&dir, rho / len)?)?)?;
        worst = worst.max(v - base);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::scalar(v)).unwrap();
        p
    }

    /// L = theta^2 / 2 over every coordinate.
    fn half_square(p: &ParamSet) -> Result<(f64, ParamSet)> {
        let v = p.iter().flat_map(|(_, t)| t.data().iter()).map(|x| 0.5 * x * x).sum();
        Ok((v, p.clone()))
    }

    #[test]
    fn sgd_hand_values() {
        let p = single("w", 1.0);
        let out = sgd_step(&p, &single("w", 2.0), 0.1).unwrap();
        assert!((out.get("w").unwrap().item() - 0.8).abs() < 1e-15);
        let same = sgd_step(&p, &single("w", 0.0), 0.1).unwrap();
        assert_eq!(same.bits(), p.bits());

        let mut theta = p;
        for _ in 0..2 {
            let (_, g) = half_square(&theta).unwrap();
            theta = sgd_step(&theta, &g, 0.1).unwrap();
        }
        assert!((theta.get("w").unwrap().item() - 0.81).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_misaligned_gradients() {
        assert!(sgd_step(&single("w", 1.0), &single("v", 1.0), 0.1).is_err());
        assert!(sgd_step(&single("w", 1.0), &single("w", 1.0), -0.1).is_err());
    }

    #[test]
    fn sam_hand_value() {
        let cfg = SamConfig {
            rho: 0.05,
            lr: 0.1,
            ..SamConfig::default()
        };
        let step = sam_step(&single("w", 1.0), &mut half_square, &cfg).unwrap();
        assert!((step.params.get("w").unwrap().item() - 0.895).abs() < 1e-12);
        assert!((step.perturbation_norm - 0.05).abs() < 1e-12);
    }

    #[test]
    fn sam_at_exact_minimum() {
        let p = single("w", 0.0);
        let step = sam_step(&p, &mut half_square, &SamConfig::default()).unwrap();
        assert!(step.degenerate);
        assert_eq!(step.params.bits(), p.bits());
        let skip = SamConfig {
            zero_grad_policy: ZeroGradPolicy::Skip,
            ..SamConfig::default()
        };
        assert_eq!(sam_step(&p, &mut half_square, &skip).unwrap().params.bits(), p.bits());
    }

    #[test]
    fn sharpness_quadratic_cases() {
        let s = sharpness_probe(&single("w", 0.0), &mut half_square, 0.05, 3, 4, 7).unwrap();
        assert!((s - 0.00125).abs() < 1e-12, "{s}");

        let mut flat = |p: &ParamSet| Ok((2.5, p.zeros_like()));
        assert_eq!(sharpness_probe(&single("w", 0.3), &mut flat, 0.05, 3, 4, 7).unwrap(), 0.0);

        let mut last = 0.0;
        for rho in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let s = sharpness_probe(&single("w", 1.0), &mut half_square, rho, 2, 3, 1).unwrap();
            assert!(s >= last);
            last = s;
        }
    }

    #[test]
    fn sharpness_argument_checks() {
        let p = single("w", 0.0);
        assert!(sharpness_probe(&p, &mut half_square, 0.0, 1, 1, 0).is_err());
        assert!(sharpness_probe(&p, &mut half_square, 0.1, 0, 1, 0).is_err());
        let mut bad = |p: &ParamSet| Ok((f64::NAN, p.clone()));
        assert!(matches!(
            sharpness_probe(&p, &mut bad, 0.1, 1, 1, 0),
            Err(Error::NonFiniteProbe { .. })
        ));
    }
}
