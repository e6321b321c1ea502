//! Central finite-difference checks of reverse-mode gradients.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest step accepted by the checks.
pub const MAX_STEP: f64 = 1e-3;

/// Checks the gradient of a scalar function of one tensor.
///
/// Returns the maximum over coordinates of
/// `|analytic - central_difference| / max(1, |analytic|)`.
pub fn grad_check<F>(build: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| build(g, vars[0]), std::slice::from_ref(point), step)
}

/// Like [`grad_check`] for functions of several tensors; every coordinate of
/// every input is probed.
pub fn grad_check_many<F>(build: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_sampled(build, points, step, usize::MAX)
}

/// Probes at most `max_coords` evenly strided coordinates of each input.
pub fn grad_check_sampled<F>(build: F, points: &[Tensor], step: f64, max_coords: usize) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step <= MAX_STEP) {
        return Err(Error::InvalidArgument(format!("step {step} outside (0, {MAX_STEP}]")));
    }
    if max_coords == 0 {
        return Err(Error::InvalidArgument("max_coords must be positive".into()));
    }
    let mut graph = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| graph.param(p.clone())).collect();
    let root = build(&mut graph, &vars).map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFiniteProbe { probe: 0 },
        other => other,
    })?;
    let analytic = graph.backward(root)?;

    let mut probe = 0;
    let mut evaluate = |graph: &mut Graph, var: Var, value: Tensor| -> Result<f64> {
        probe += 1;
        match graph.forward_eval(&[(var, value)]) {
            Ok(_) => {}
            Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteProbe { probe }),
            Err(e) => return Err(e),
        }
        let v = graph.get(root)?.item();
        if !v.is_finite() {
            return Err(Error::NonFiniteProbe { probe });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for (point, &var) in points.iter().zip(&vars) {
        let grad = analytic.get(var).expect("every param leaf has a gradient");
        let numel = point.numel();
        let stride = numel.div_ceil(max_coords.min(numel));
        for i in (0..numel).step_by(stride) {
            let mut plus = point.to_vec();
            plus[i] += step;
            let mut minus = point.to_vec();
            minus[i] -= step;
            let f_plus = evaluate(&mut graph, var, Tensor::from_parts(point.shape().to_vec(), plus))?;
            let f_minus = evaluate(&mut graph, var, Tensor::from_parts(point.shape().to_vec(), minus))?;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
        // Restore the unperturbed value before probing the next input.
        graph.forward_eval(&[(var, point.clone())])?;
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &Tensor::vector(vec![1.0, 2.0]),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let f = |g: &mut Graph, x: Var| g.sum(x);
        assert!(grad_check(f, &Tensor::scalar(1.0), 0.0).is_err());
        assert!(grad_check(f, &Tensor::scalar(1.0), 1e-2).is_err());
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        // ln(x) at x = 1e-7 leaves the domain when probed with step 1e-3.
        let err = grad_check(
            |g, x| {
                let l = g.log(x)?;
                g.sum(l)
            },
            &Tensor::scalar(1e-7),
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteProbe { .. }), "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A floor-clamped log has zero gradient below the floor but the
        // central difference straddling the floor does not.
        let err = grad_check(
            |g, x| {
                let l = g.log_clamped(x, 0.5)?;
                g.sum(l)
            },
            &Tensor::scalar(0.5),
            1e-4,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
