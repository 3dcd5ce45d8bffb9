use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` builds a scalar loss on a fresh tape from leaves holding `params`
/// (created trainable). Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over every coordinate.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!(
            "grad_check needs eps > 0, got {eps}"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        let v = t.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(
                "objective at a finite-difference probe".into(),
            ));
        }
        Ok(v)
    };

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[pi].shape());
        for j in 0..params[pi].numel() {
            let orig = params[pi].data()[j];
            probe[pi].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        let a = Tensor::matrix(3, 3, vec![2.0, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 3.0]).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.3, -1.2, 0.7]).unwrap();
        let err = grad_check(&[x], 1e-5, |tape, v| {
            let a = tape.constant(a.clone());
            let ax = tape.matmul(v[0], a)?;
            let q = tape.mul(ax, v[0])?;
            Ok(tape.sum(q))
        })
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let x = Tensor::vector(vec![1.0]);
        let res = grad_check(&[x], 1e-3, |tape, v| {
            let s = tape.sum(v[0]);
            Ok(tape.scale(s, f64::INFINITY))
        });
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
