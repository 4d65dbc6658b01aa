use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares autodiff gradients of a scalar function against central finite
/// differences, returning the worst relative error over all coordinates.
///
/// `f` receives a fresh tape and one leaf per entry of `params`; it must
/// return a single-element loss. Per coordinate the error is
/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let eval = |values: &[Tensor<f64>], backward: bool| -> Result<(f64, Tape<f64>, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("grad_check objective"));
        }
        if backward {
            tape.backward(loss)?;
        }
        Ok((value, tape, vars))
    };

    let (_, tape, vars) = eval(params, true)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, grads) in analytic.iter().enumerate() {
        for (ci, &a) in grads.iter().enumerate() {
            let orig = probe[pi].data()[ci];
            probe[pi].data_mut()[ci] = orig + epsilon;
            let plus = eval(&probe, false)?.0;
            probe[pi].data_mut()[ci] = orig - epsilon;
            let minus = eval(&probe, false)?.0;
            probe[pi].data_mut()[ci] = orig;
            let n = (plus - minus) / (2.0 * epsilon);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let w = Tensor::new(vec![4], vec![0.5, -1.5, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                tape.sum_all(sq)
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_epsilon_and_non_finite_objective() {
        let w = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(grad_check(|t, v| t.sum_all(v[0]), std::slice::from_ref(&w), 0.0).is_err());
        let unchecked = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let s = t.scale(v[0], f64::INFINITY)?;
            t.sum_all(s)
        };
        assert!(grad_check(unchecked, &[w], 1e-6).is_err());
    }
}
