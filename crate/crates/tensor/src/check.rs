//! Central finite differences for gradient verification.

use crate::tensor::Tensor;

/// Central-difference gradient of the scalar function `f` at `x`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.norm().max(numeric.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn assert_grad_close(analytic: &Tensor, numeric: &Tensor, tol: f64) {
    let err = relative_error(analytic, numeric);
    assert!(
        err <= tol,
        "gradient mismatch: rel-err {err:.3e} > {tol:.1e}\nanalytic {:?}\nnumeric  {:?}",
        &analytic.data()[..analytic.numel().min(8)],
        &numeric.data()[..numeric.numel().min(8)]
    );
}
