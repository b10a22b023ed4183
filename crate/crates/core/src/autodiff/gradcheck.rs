//! Central-finite-difference validation of tape gradients.

use crate::autodiff::tape::{Tape, Var};
use crate::{Error, Result};

/// Compare the tape gradient of a scalar function against central finite
/// differences. `f` receives a fresh tape and the input leaf and must return
/// the scalar output node. Returns the max over coordinates of
/// `|analytic − central| / max(1, |analytic|)`.
pub fn grad_check(
    mut f: impl FnMut(&mut Tape, Var) -> Var,
    point: &[f64],
    h: f64,
) -> Result<f64> {
    let eval = |f: &mut dyn FnMut(&mut Tape, Var) -> Var, x: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x);
        let out = f(&mut tape, leaf);
        tape.scalar(out)
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(point);
    let out = f(&mut tape, leaf);
    assert_eq!(tape.len(out), 1, "grad_check needs a scalar output");
    tape.backward(out);
    let analytic = tape.grad(leaf).to_vec();

    let mut max_err = 0.0f64;
    for i in 0..point.len() {
        let mut xp = point.to_vec();
        let mut xm = point.to_vec();
        xp[i] += h;
        xm[i] -= h;
        let fp = eval(&mut f, &xp);
        let fm = eval(&mut f, &xm);
        let fd = (fp - fm) / (2.0 * h);
        if !fd.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check".into(),
                index: i,
            });
        }
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
