//! Discrete-time longitudinal car-following kinematics.
//!
//! The state is `[d, dv, v]`: distance headway, lead-minus-ego speed, and ego
//! speed. Over one step of length `dt`, with the lead speed held constant and
//! the ego accelerating at `a`,
//!
//! ```text
//!     d'  = d + dt * dv - dt^2 / 2 * a
//!     dv' = dv - dt * a
//!     v'  = v + dt * a
//! ```

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Longitudinal state `[d, dv, v]` in (m, m/s, m/s).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateVector {
    /// Distance headway.
    pub d: f64,
    /// Lead speed minus ego speed.
    pub dv: f64,
    /// Ego speed.
    pub v: f64,
}

impl StateVector {
    pub const ZERO: StateVector = StateVector {
        d: 0.0,
        dv: 0.0,
        v: 0.0,
    };

    pub fn new(d: f64, dv: f64, v: f64) -> Self {
        Self { d, dv, v }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.d, self.dv, self.v]
    }

    pub fn is_finite(&self) -> bool {
        self.d.is_finite() && self.dv.is_finite() && self.v.is_finite()
    }

    /// Speed of the lead vehicle, `v + dv`.
    pub fn lead_speed(&self) -> f64 {
        self.v + self.dv
    }
}

impl Add for StateVector {
    type Output = StateVector;
    fn add(self, o: StateVector) -> StateVector {
        StateVector::new(self.d + o.d, self.dv + o.dv, self.v + o.v)
    }
}

impl Sub for StateVector {
    type Output = StateVector;
    fn sub(self, o: StateVector) -> StateVector {
        StateVector::new(self.d - o.d, self.dv - o.dv, self.v - o.v)
    }
}

impl Mul<f64> for StateVector {
    type Output = StateVector;
    fn mul(self, s: f64) -> StateVector {
        StateVector::new(self.d * s, self.dv * s, self.v * s)
    }
}

pub type Mat3 = [[f64; 3]; 3];

pub(crate) fn mat_vec(m: &Mat3, x: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (row, o) in m.iter().zip(out.iter_mut()) {
        *o = row[0] * x[0] + row[1] * x[1] + row[2] * x[2];
    }
    out
}

/// Transition and input matrices for a fixed step length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicsModel {
    dt: f64,
    a: Mat3,
    b: [f64; 3],
    a_abs: Mat3,
}

impl KinematicsModel {
    pub fn new(dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid(format!("step length must be positive, got {dt}")));
        }
        let a = [[1.0, dt, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let b = [-0.5 * dt * dt, -dt, dt];
        let mut a_abs = a;
        for row in a_abs.iter_mut() {
            for v in row.iter_mut() {
                *v = v.abs();
            }
        }
        Ok(Self { dt, a, b, a_abs })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn a(&self) -> &Mat3 {
        &self.a
    }

    pub fn b(&self) -> [f64; 3] {
        self.b
    }

    /// Element-wise absolute value of the transition matrix.
    pub fn a_abs(&self) -> &Mat3 {
        &self.a_abs
    }

    /// `A x + B a` without input validation.
    pub(crate) fn apply(&self, x: StateVector, accel: f64) -> StateVector {
        let ax = mat_vec(&self.a, x.to_array());
        StateVector::new(
            ax[0] + self.b[0] * accel,
            ax[1] + self.b[1] * accel,
            ax[2] + self.b[2] * accel,
        )
    }

    /// `A_abs r`, used for box half-widths.
    pub(crate) fn apply_abs(&self, r: [f64; 3]) -> [f64; 3] {
        mat_vec(&self.a_abs, r)
    }

    /// Advance one step: `x' = A x + B a`.
    pub fn step(&self, x: StateVector, accel: f64) -> Result<StateVector> {
        if !x.is_finite() {
            return Err(Error::invalid(format!("state must be finite, got {x:?}")));
        }
        ensure_finite("acceleration", accel)?;
        Ok(self.apply(x, accel))
    }
}

/// Free-function form of [`KinematicsModel::step`].
pub fn step(x: StateVector, accel: f64, model: &KinematicsModel) -> Result<StateVector> {
    model.step(x, accel)
}

/// Free-function form of [`StateVector::lead_speed`].
pub fn lead_speed(x: &StateVector) -> f64 {
    x.lead_speed()
}
