//! Central finite differences, the independent oracle used to certify
//! every analytic gradient in the crate. Deliberately knows nothing about
//! the tape: it only re-evaluates a closure at shifted inputs.

use crate::tensor::Tensor;

/// d loss / d x at every coordinate of `x` by central differences.
pub fn central_diff(x: &Tensor, step: f64, mut loss: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.rows, x.cols);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let up = loss(&probe);
        probe.data[i] = orig - step;
        let down = loss(&probe);
        probe.data[i] = orig;
        g.data[i] = (up - down) / (2.0 * step);
    }
    g
}

/// Max relative error between an analytic gradient and its
/// finite-difference estimate. The additive 1e-5 floor makes near-zero
/// entries compare absolutely (tolerance 1e-4 then means an absolute
/// agreement of 1e-9, above central-difference roundoff at step 1e-5
/// but far below any genuine gradient defect).
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert!(analytic.same_shape(numeric), "gradcheck shape mismatch");
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.data.iter().zip(&numeric.data) {
        let denom = a.abs().max(n.abs()) + 1e-5;
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
