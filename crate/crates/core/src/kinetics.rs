//! Three-species kinetics benchmark with a scalar stiffness parameter.
//!
//! The state is `x = (u, v, w)` and the scalar parameter `s` divides most
//! reaction terms, so small `s` makes the system stiff. The study convention
//! is `s` in `[0.005, 1.2]`, `t` in `[0, 1]`, and initial state
//! `(0.5, 0.5, 0.5)`. The analytic state Jacobian is included as the oracle
//! for finite-difference Jacobian tests; the interpolator itself never needs
//! it.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::ModelSystem;

/// Study parameter range for `s`.
pub const S_RANGE: (f64, f64) = (0.005, 1.2);
/// Study time interval.
pub const T_RANGE: (f64, f64) = (0.0, 1.0);
/// Study initial state.
pub const X0: [f64; 3] = [0.5, 0.5, 0.5];

/// Forcing `f(x, s)` of the kinetics system (autonomous).
pub fn forcing(x: &[f64; 3], s: f64) -> Result<[f64; 3]> {
    if !(s > 0.0) {
        return Err(Error::invalid(format!("kinetics needs s > 0, got {s}")));
    }
    Ok(forcing_raw(x, s))
}

#[inline]
pub(crate) fn forcing_raw(x: &[f64; 3], s: f64) -> [f64; 3] {
    let (u, v, w) = (x[0], x[1], x[2]);
    [
        -5.0 * u / s - u * v / s + v * w + 5.0 * v * v / s + w / s - u,
        10.0 * u / s - u * v / s - v * w - 10.0 * v * v / s + w / s + u,
        u * v / s - v * w - w / s + u,
    ]
}

/// Analytic state Jacobian `df/dx` at `(x, s)`.
pub fn jacobian(x: &[f64; 3], s: f64) -> Result<DMatrix<f64>> {
    if !(s > 0.0) {
        return Err(Error::invalid(format!("kinetics needs s > 0, got {s}")));
    }
    let (u, v, w) = (x[0], x[1], x[2]);
    Ok(DMatrix::from_row_slice(
        3,
        3,
        &[
            -5.0 / s - v / s - 1.0,
            -u / s + w + 10.0 * v / s,
            v + 1.0 / s,
            10.0 / s - v / s + 1.0,
            -u / s - w - 20.0 * v / s,
            -v + 1.0 / s,
            v / s + 1.0,
            u / s - w,
            -v - 1.0 / s,
        ],
    ))
}

/// The kinetics system as a [`ModelSystem`] with `p = 3`, `d = 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct KineticsModel;

impl ModelSystem for KineticsModel {
    fn state_dim(&self) -> usize {
        3
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn forcing_into(&self, x: &[f64], _t: f64, s: &[f64], out: &mut [f64]) {
        let f = forcing_raw(&[x[0], x[1], x[2]], s[0]);
        out.copy_from_slice(&f);
    }

    fn state_jacobian(&self, x: &[f64], _t: f64, s: &[f64]) -> Option<DMatrix<f64>> {
        jacobian(&[x[0], x[1], x[2]], s[0]).ok()
    }
}
