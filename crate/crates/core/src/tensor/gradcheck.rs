//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares analytic gradients of `builder` against central differences.
///
/// Returns `max |analytic - numeric| / max(1, |numeric|)` over every entry of
/// every leaf. Leaves are always treated as requiring a gradient.
pub fn grad_check<F>(builder: F, leaves: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("grad_check eps must be positive, got {eps}")));
    }
    let eval = |leaves: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
        let loss = builder(&mut tape, &vars)?;
        Ok(tape.item(loss))
    };

    let leaves: Vec<Tensor<f64>> = leaves.iter().map(|t| t.clone().with_grad()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let loss = builder(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe = leaves.clone();
    for (li, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; leaves[li].len()];
        let analytic = tape.grad(*var).unwrap_or(&zeros).to_vec();
        for j in 0..leaves[li].len() {
            let orig = leaves[li].data()[j];
            probe[li].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[li].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[li].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
            if err.is_nan() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_builder_has_zero_error() {
        let leaf = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let err = grad_check(|t, _| Ok(t.scalar(4.0)), &[leaf], 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let leaf = Tensor::new(vec![1], vec![0.1]).unwrap();
        assert!(grad_check(|t, v| t.sum(v[0]), &[leaf], 0.0).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach hides x from the analytic gradient but not from the numeric one
        let leaf = Tensor::new(vec![2], vec![0.5, -0.3]).unwrap();
        let err = grad_check(
            |t, v| {
                let d = t.detach(v[0])?;
                let sq = t.mul(v[0], d)?;
                t.sum(sq)
            },
            &[leaf],
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }
}
