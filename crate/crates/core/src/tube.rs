//! Conformal boxes over the full state and their propagation as tubes.
//!
//! A box is `[center - q * half, center + q * half]`. The headway half-width is
//! the ensemble standard deviation; the relative-speed half-width comes from
//! differencing two estimates `dt` apart; ego speed is measured, so its
//! half-width is zero. Half-widths propagate through `A_abs` and never depend
//! on the applied accelerations.

use crate::conformal::Quantile;
use crate::ensemble::EnsembleEstimate;
use crate::error::{ensure_finite, Error, Result};
use crate::kinematics::{KinematicsModel, StateVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConformalBox {
    pub center: StateVector,
    /// Unscaled half-widths, element-wise `>= 0`.
    pub half: [f64; 3],
    pub quantile: Quantile,
    /// Miscoverage rate of the headway interval the box was built from.
    pub alpha: f64,
}

impl ConformalBox {
    /// Lower and upper corners, or `None` for an infinite quantile.
    pub fn bounds(&self) -> Option<(StateVector, StateVector)> {
        let q = self.quantile.finite()?;
        let c = self.center.to_array();
        let lo = std::array::from_fn(|i| c[i] - q * self.half[i]);
        let hi = std::array::from_fn(|i| c[i] + q * self.half[i]);
        Some((StateVector::from_array(lo), StateVector::from_array(hi)))
    }

    pub fn contains(&self, x: StateVector, tol: f64) -> bool {
        match self.bounds() {
            None => true,
            Some((lo, hi)) => {
                let (x, lo, hi) = (x.to_array(), lo.to_array(), hi.to_array());
                (0..3).all(|i| x[i] >= lo[i] - tol && x[i] <= hi[i] + tol)
            }
        }
    }

    /// The eight vertices, or `None` for an infinite quantile.
    pub fn corners(&self) -> Option<[StateVector; 8]> {
        let (lo, hi) = self.bounds()?;
        let (lo, hi) = (lo.to_array(), hi.to_array());
        Some(std::array::from_fn(|k| {
            StateVector::from_array(std::array::from_fn(|i| {
                if k >> i & 1 == 1 {
                    hi[i]
                } else {
                    lo[i]
                }
            }))
        }))
    }

    /// Probability lower bound `1 - 2 alpha`, clamped to `[0, 1]`.
    pub fn coverage_claim(&self) -> f64 {
        (1.0 - 2.0 * self.alpha).clamp(0.0, 1.0)
    }

    pub fn with_quantile(self, quantile: Quantile) -> Self {
        Self { quantile, ..self }
    }
}

/// Box from raw moments of two headway estimates `dt` apart.
#[allow(clippy::too_many_arguments)]
pub fn box_from_moments(
    mu_now: f64,
    sigma_now: f64,
    mu_prev: f64,
    sigma_prev: f64,
    a_prev: f64,
    v_now: f64,
    quantile: Quantile,
    alpha: f64,
    model: &KinematicsModel,
) -> Result<ConformalBox> {
    for (name, v) in [
        ("mu_now", mu_now),
        ("mu_prev", mu_prev),
        ("a_prev", a_prev),
        ("v_now", v_now),
    ] {
        ensure_finite(name, v)?;
    }
    for (name, s) in [("sigma_now", sigma_now), ("sigma_prev", sigma_prev)] {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::invalid(format!("{name} must be positive, got {s}")));
        }
    }
    if let Quantile::Finite(q) = quantile {
        if !(q.is_finite()) {
            return Err(Error::invalid("finite quantile must be a finite number"));
        }
    }
    let dt = model.dt();
    let dv = (mu_now - mu_prev) / dt - a_prev * dt / 2.0;
    let dv_half = (sigma_now + sigma_prev) / dt;
    Ok(ConformalBox {
        center: StateVector::new(mu_now, dv, v_now),
        half: [sigma_now, dv_half, 0.0],
        quantile,
        alpha,
    })
}

/// Box from the current and previous ensemble estimates.
pub fn estimate_box(
    est_now: &EnsembleEstimate,
    est_prev: &EnsembleEstimate,
    a_prev: f64,
    v_now: f64,
    quantile: Quantile,
    alpha: f64,
    model: &KinematicsModel,
) -> Result<ConformalBox> {
    box_from_moments(
        est_now.mu,
        est_now.sigma(),
        est_prev.mu,
        est_prev.sigma(),
        a_prev,
        v_now,
        quantile,
        alpha,
        model,
    )
}

/// One step of the tube recursion.
pub fn propagate(b: &ConformalBox, accel: f64, model: &KinematicsModel) -> ConformalBox {
    ConformalBox {
        center: model.apply(b.center, accel),
        half: model.apply_abs(b.half),
        ..*b
    }
}

/// `n + 1` half-width vectors starting at `r0`.
pub fn half_width_trajectory(r0: [f64; 3], n: usize, model: &KinematicsModel) -> Vec<[f64; 3]> {
    std::iter::successors(Some(r0), |r| Some(model.apply_abs(*r)))
        .take(n + 1)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformalTube {
    pub boxes: Vec<ConformalBox>,
    pub controls: Vec<f64>,
}

impl ConformalTube {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn coverage_claim(&self) -> f64 {
        self.boxes[0].coverage_claim()
    }

    /// True when `states[i]` lies in box `i` for every `i` present.
    pub fn contains_trajectory(&self, states: &[StateVector], tol: f64) -> bool {
        states
            .iter()
            .zip(&self.boxes)
            .all(|(x, b)| b.contains(*x, tol))
    }
}

pub fn rollout(box0: &ConformalBox, accels: &[f64], model: &KinematicsModel) -> Result<ConformalTube> {
    if accels.is_empty() {
        return Err(Error::invalid("rollout needs at least one control"));
    }
    for &a in accels {
        ensure_finite("acceleration", a)?;
    }
    let mut boxes = Vec::with_capacity(accels.len() + 1);
    boxes.push(*box0);
    for &a in accels {
        let next = propagate(boxes.last().unwrap(), a, model);
        boxes.push(next);
    }
    Ok(ConformalTube {
        boxes,
        controls: accels.to_vec(),
    })
}
