use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares tape gradients against central finite differences.
///
/// `f` builds a scalar loss on the supplied tape from leaves bound to
/// `params` (in order). Every coordinate of every parameter is perturbed by
/// `±eps`; the returned value is the largest relative error
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::range("eps", "must lie in [1e-6, 1e-3]"));
    }
    let params: Vec<Tensor> = params.iter().map(|p| p.clone().with_grad()).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p)).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.scalar(l))
    };

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("bound with requires_grad");
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            probe[pi].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[pi].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[pi].data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
