//! Truncated Taylor series ("jets"). A jet `c` of order `K` stands for
//! `x(t0 + tau) = sum_{k<=K} c[k] tau^k`, so `c[k] = x^(k)(t0) / k!`.

use crate::ocv_cell::OcvModel;

/// Truncated Cauchy product, result has `order + 1` coefficients.
pub fn mul(a: &[f64], b: &[f64], order: usize) -> Vec<f64> {
    let mut out = vec![0.0; order + 1];
    for (i, &ai) in a.iter().enumerate().take(order + 1) {
        if ai == 0.0 {
            continue;
        }
        for (j, &bj) in b.iter().enumerate().take(order + 1 - i) {
            out[i + j] += ai * bj;
        }
    }
    out
}

/// `f(z(t))` as a jet, given `derivs[i] = f^(i)(z[0])` for `i = 0..=order`.
pub fn compose(derivs: &[f64], z: &[f64]) -> Vec<f64> {
    let order = z.len() - 1;
    assert!(
        derivs.len() > order,
        "need f derivatives through order {order}"
    );
    let mut delta = z.to_vec();
    delta[0] = 0.0;
    let mut out = vec![0.0; order + 1];
    out[0] = derivs[0];
    let mut power = vec![0.0; order + 1];
    power[0] = 1.0;
    let mut factorial = 1.0;
    for (i, &d) in derivs.iter().enumerate().take(order + 1).skip(1) {
        power = mul(&power, &delta, order);
        factorial *= i as f64;
        let w = d / factorial;
        for k in i..=order {
            out[k] += w * power[k];
        }
    }
    out
}

/// `g(z(t))` for an OCV curve.
pub fn ocv_jet(model: &OcvModel, z: &[f64]) -> Vec<f64> {
    let d: Vec<f64> = (0..z.len()).map(|i| model.derivative(z[0], i)).collect();
    compose(&d, z)
}

/// `g'(z(t))` for an OCV curve.
pub fn ocv_slope_jet(model: &OcvModel, z: &[f64]) -> Vec<f64> {
    let d: Vec<f64> = (0..z.len())
        .map(|i| model.derivative(z[0], i + 1))
        .collect();
    compose(&d, z)
}

/// `k!` as a float.
pub fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}
