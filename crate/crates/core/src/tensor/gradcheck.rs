use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the maximum relative error.
///
/// `f` receives a tape and the leaf holding `x` and must return a scalar
/// variable. The relative error of element `i` is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "finite difference step {h} outside [1e-6, 1e-3]"
        )));
    }
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let out = f(&mut tape, v)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
        }
        Ok(tape.data(out)[0])
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut tape, leaf)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(probe.clone())?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let n = (fp - fm) / (2.0 * h);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
