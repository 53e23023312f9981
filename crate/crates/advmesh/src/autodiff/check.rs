//! Finite-difference validation of tape gradients.

use super::{Array, Tape, Var};

/// Compare the analytic gradient of `f` at `x` against central differences.
///
/// Returns the maximum over elements of
/// `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
///
/// `f` must be deterministic and produce a scalar.
pub fn grad_check<F>(f: F, x: &Array, eps: f64) -> f64
where
    F: for<'a> Fn(&'a Tape, Var<'a>) -> Var<'a>,
{
    assert!(eps > 0.0, "grad_check: eps must be positive");

    let analytic = {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = f(&tape, xv);
        assert_eq!(y.numel(), 1, "grad_check: f must return a scalar, got {:?}", y.shape());
        tape.backward(y);
        xv.grad().map(|g| g.data).unwrap_or_else(|| vec![0.0; x.numel()])
    };

    let eval = |probe: &Array| -> f64 {
        let tape = Tape::new();
        let xv = tape.leaf(probe.clone());
        f(&tape, xv).item()
    };

    let mut max_err: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let fp = eval(&probe);
        probe.data[i] = orig - eps;
        let fm = eval(&probe);
        probe.data[i] = orig;
        let central = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(central.abs()).max(1e-8);
        let err = (analytic[i] - central).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    max_err
}
