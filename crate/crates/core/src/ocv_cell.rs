//! Single-cell equivalent circuit: open-circuit voltage curve, terminal
//! voltage and state derivative.
//!
//! Sign convention: positive current charges the cell, so `dz/dt = I / Q`.
//! Discharge profiles are negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest order accepted by [`ocv_eval`].
pub const MAX_EVAL_ORDER: usize = 4;

/// Highest order available to the jet machinery of the observability module.
pub const MAX_DERIVATIVE_ORDER: usize = 8;

/// Grid used to check that a parameterization is strictly increasing on [0, 1].
const MONOTONE_GRID: usize = 1000;

/// Open-circuit voltage `g(z) = p1 e^(alpha1 z) + p2 e^(alpha2 z) + p3 z^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcvModel {
    pub p1: f64,
    pub alpha1: f64,
    pub p2: f64,
    pub alpha2: f64,
    pub p3: f64,
}

impl OcvModel {
    /// Validates finiteness and strict monotonicity on a grid over [0, 1].
    pub fn new(p1: f64, alpha1: f64, p2: f64, alpha2: f64, p3: f64) -> Result<Self> {
        let model = OcvModel {
            p1,
            alpha1,
            p2,
            alpha2,
            p3,
        };
        model.validate()?;
        Ok(model)
    }

    /// Illustrative Graphite/NMC-like coefficients, fitted offline to a
    /// monotone curve running from about 3.0 V to 4.2 V. Not measured data.
    #[allow(clippy::approx_constant)]
    pub fn graphite_nmc() -> Self {
        OcvModel {
            p1: 3.3839,
            alpha1: 0.2421,
            p2: -0.3926,
            alpha2: -31.3,
            p3: -0.1412,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let coeffs = [
            ("p1", self.p1),
            ("alpha1", self.alpha1),
            ("p2", self.p2),
            ("alpha2", self.alpha2),
            ("p3", self.p3),
        ];
        for (name, v) in coeffs {
            if !v.is_finite() {
                return Err(Error::invalid(format!("ocv.{name}"), "must be finite"));
            }
        }
        for k in 0..=MONOTONE_GRID {
            let z = k as f64 / MONOTONE_GRID as f64;
            let value = self.value(z);
            let slope = self.derivative(z, 1);
            if !value.is_finite() || !slope.is_finite() {
                return Err(Error::invalid("ocv", format!("g is not finite at z = {z}")));
            }
            if slope <= 0.0 {
                return Err(Error::invalid(
                    "ocv",
                    format!("g is not strictly increasing: g'({z}) = {slope}"),
                ));
            }
        }
        Ok(())
    }

    pub fn value(&self, z: f64) -> f64 {
        self.derivative(z, 0)
    }

    /// `g^(order)(z)` in closed form, for any order.
    pub fn derivative(&self, z: f64, order: usize) -> f64 {
        let k = order as i32;
        let exp_terms = self.p1 * self.alpha1.powi(k) * (self.alpha1 * z).exp()
            + self.p2 * self.alpha2.powi(k) * (self.alpha2 * z).exp();
        let quadratic = match order {
            0 => self.p3 * z * z,
            1 => 2.0 * self.p3 * z,
            2 => 2.0 * self.p3,
            _ => 0.0,
        };
        exp_terms + quadratic
    }

    /// `[g(z), g'(z), ..., g^(n)(z)]`.
    pub fn derivatives(&self, z: f64, n: usize) -> Result<Vec<f64>> {
        if n > MAX_DERIVATIVE_ORDER {
            return Err(Error::UnsupportedOrder {
                order: n,
                max: MAX_DERIVATIVE_ORDER,
            });
        }
        Ok((0..=n).map(|k| self.derivative(z, k)).collect())
    }
}

/// Evaluates `g^(order)(z)` for `order` in `0..=4`.
pub fn ocv_eval(model: &OcvModel, z: f64, order: usize) -> Result<f64> {
    if order > MAX_EVAL_ORDER {
        return Err(Error::UnsupportedOrder {
            order,
            max: MAX_EVAL_ORDER,
        });
    }
    Ok(model.derivative(z, order))
}

/// Outcome of comparing closed-form OCV derivatives with finite differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcvCheck {
    pub grid: Vec<f64>,
    /// `max_rel_error[k - 1]` for derivative order `k`.
    pub max_rel_error: Vec<f64>,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks orders `1..=MAX_EVAL_ORDER` at `points` midpoints of [0, 1] against
/// Richardson-extrapolated central differences of the next lower order.
pub fn ocv_self_test(model: &OcvModel, points: usize, tolerance: f64) -> OcvCheck {
    let step = 1e-4;
    let grid: Vec<f64> = (0..points)
        .map(|k| (k as f64 + 0.5) / points as f64)
        .collect();
    let central = |order: usize, z: f64, h: f64| {
        (model.derivative(z + h, order - 1) - model.derivative(z - h, order - 1)) / (2.0 * h)
    };
    let max_rel_error: Vec<f64> = (1..=MAX_EVAL_ORDER)
        .map(|order| {
            grid.iter()
                .map(|&z| {
                    let fd = (4.0 * central(order, z, step / 2.0) - central(order, z, step)) / 3.0;
                    let exact = model.derivative(z, order);
                    (exact - fd).abs() / exact.abs()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let passed = max_rel_error.iter().all(|&e| e < tolerance);
    OcvCheck {
        grid,
        max_rel_error,
        step,
        tolerance,
        passed,
    }
}

/// Electrical parameters of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    /// Ohmic resistance r (ohm).
    pub r_ohmic: f64,
    /// Relaxation-branch resistance R (ohm); only used with the RC branch.
    pub r_rc: f64,
    /// Relaxation-branch capacitance C (farad); only used with the RC branch.
    pub c_rc: f64,
    /// Capacity Q (ampere-seconds).
    pub q_capacity: f64,
    pub ocv: OcvModel,
}

impl CellParams {
    /// Cell without an RC branch.
    pub fn resistive(r_ohmic: f64, q_capacity: f64, ocv: OcvModel) -> Self {
        CellParams {
            r_ohmic,
            r_rc: 0.0,
            c_rc: 0.0,
            q_capacity,
            ocv,
        }
    }

    pub fn validate(&self, include_rc: bool, field: &str) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(
                    format!("{field}.{name}"),
                    format!("must be positive and finite, got {v}"),
                ))
            }
        };
        positive("r_ohmic", self.r_ohmic)?;
        positive("q_capacity", self.q_capacity)?;
        if include_rc {
            positive("r_rc", self.r_rc)?;
            positive("c_rc", self.c_rc)?;
        }
        self.ocv.validate()
    }

    pub fn rc_time_constant(&self) -> f64 {
        self.r_rc * self.c_rc
    }
}

/// SOC and relaxation voltage of one cell. `u_rc` is zero when the RC
/// branch is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellState {
    pub z: f64,
    pub u_rc: f64,
}

/// Terminal voltage `g(z) + U + r I`.
pub fn cell_voltage(params: &CellParams, state: &CellState, current: f64) -> f64 {
    params.ocv.value(state.z) + state.u_rc + params.r_ohmic * current
}

/// Time derivative of the cell state. The RC row is dropped when
/// `include_rc` is false.
pub fn cell_derivative(
    params: &CellParams,
    state: &CellState,
    current: f64,
    include_rc: bool,
) -> CellState {
    let dz = current / params.q_capacity;
    let du = if include_rc {
        -state.u_rc / params.rc_time_constant() + current / params.c_rc
    } else {
        0.0
    };
    CellState { z: dz, u_rc: du }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quadratic_only() -> OcvModel {
        OcvModel {
            p1: 0.0,
            alpha1: 0.0,
            p2: 0.0,
            alpha2: 0.0,
            p3: 1.0,
        }
    }

    #[test]
    fn self_test_passes_for_default_curve() {
        let check = ocv_self_test(&OcvModel::graphite_nmc(), 50, 1e-6);
        assert!(check.passed, "{:?}", check.max_rel_error);
        assert_eq!(check.grid.len(), 50);
    }

    #[test]
    fn quadratic_term_orders() {
        let m = quadratic_only();
        assert_eq!(ocv_eval(&m, 0.5, 0).unwrap(), 0.25);
        assert_eq!(ocv_eval(&m, 0.5, 1).unwrap(), 1.0);
        assert_eq!(ocv_eval(&m, 0.5, 2).unwrap(), 2.0);
        assert_eq!(ocv_eval(&m, 0.5, 3).unwrap(), 0.0);
        assert_eq!(ocv_eval(&m, 0.5, 4).unwrap(), 0.0);
    }

    #[test]
    fn order_above_four_is_rejected() {
        let err = ocv_eval(&OcvModel::graphite_nmc(), 0.5, 5).unwrap_err();
        assert!(matches!(err, Error::UnsupportedOrder { order: 5, max: 4 }));
    }

    #[test]
    fn first_derivative_matches_central_difference() {
        let m = OcvModel::graphite_nmc();
        let h = 1e-5;
        let fd = (m.value(0.5 + h) - m.value(0.5 - h)) / (2.0 * h);
        let exact = ocv_eval(&m, 0.5, 1).unwrap();
        assert!(((exact - fd) / exact).abs() < 1e-6);
    }

    #[test]
    fn default_curve_is_valid_and_spans_expected_range() {
        let m = OcvModel::graphite_nmc();
        m.validate().unwrap();
        assert!((m.value(0.0) - 3.0).abs() < 0.05);
        assert!((m.value(1.0) - 4.2).abs() < 0.05);
    }

    #[test]
    fn decreasing_curve_is_rejected() {
        assert!(OcvModel::new(-3.5, 0.1, 0.0, 0.0, 0.0).is_err());
        assert!(OcvModel::new(f64::NAN, 0.1, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn voltage_examples() {
        let ocv = OcvModel::graphite_nmc();
        let p = CellParams::resistive(0.1, 1500.0, ocv);
        let s = CellState { z: 0.5, u_rc: 0.0 };
        assert_eq!(cell_voltage(&p, &s, 0.0), ocv.value(0.5));
        assert_relative_eq!(
            cell_voltage(&p, &s, 2.0),
            ocv.value(0.5) + 0.2,
            epsilon = 1e-15
        );
        // module 1, cell 1 of the reference 2P2S pack
        let s = CellState { z: 0.2, u_rc: 0.0 };
        assert_relative_eq!(
            cell_voltage(&p, &s, 1.0),
            ocv.value(0.2) + 0.1,
            epsilon = 1e-15
        );
    }

    #[test]
    fn voltage_is_affine_in_current() {
        let p = CellParams::resistive(0.22, 1800.0, OcvModel::graphite_nmc());
        let s = CellState { z: 0.3, u_rc: 0.01 };
        let v0 = cell_voltage(&p, &s, 0.0);
        let v1 = cell_voltage(&p, &s, 1.0);
        let v3 = cell_voltage(&p, &s, 3.0);
        assert_relative_eq!(v1 - v0, 0.22, epsilon = 1e-14);
        assert_relative_eq!((v3 - v1) / 2.0, 0.22, epsilon = 1e-14);
    }

    #[test]
    fn derivative_examples() {
        let mut p = CellParams::resistive(0.1, 1500.0, OcvModel::graphite_nmc());
        let rest = cell_derivative(&p, &CellState::default(), 0.0, false);
        assert_eq!(rest, CellState { z: 0.0, u_rc: 0.0 });
        let d = cell_derivative(&p, &CellState { z: 0.4, u_rc: 0.0 }, 1.5, false);
        assert_relative_eq!(d.z, 0.001, epsilon = 1e-18);

        p.r_rc = 10.0;
        p.c_rc = 100.0;
        let d = cell_derivative(&p, &CellState { z: 0.4, u_rc: 1.0 }, 0.0, true);
        assert_relative_eq!(d.u_rc, -0.001, epsilon = 1e-18);
        assert_eq!(d.z, 0.0);
        let rest = cell_derivative(&p, &CellState { z: 0.4, u_rc: 0.0 }, 0.0, true);
        assert_eq!(rest, CellState { z: 0.0, u_rc: 0.0 });
    }

    #[test]
    fn soc_rate_ignores_state() {
        let p = CellParams::resistive(0.1, 1200.0, OcvModel::graphite_nmc());
        let a = cell_derivative(&p, &CellState { z: 0.1, u_rc: 0.0 }, 2.0, false);
        let b = cell_derivative(&p, &CellState { z: 0.9, u_rc: 0.5 }, 2.0, false);
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn rc_params_must_be_positive_when_enabled() {
        let p = CellParams::resistive(0.1, 1500.0, OcvModel::graphite_nmc());
        assert!(p.validate(false, "cell").is_ok());
        assert!(p.validate(true, "cell").is_err());
    }
}
