//! Benchmark plants.
//!
//! Both benchmarks pair a "plant" parameter set (what the simulator
//! integrates) with a "nominal" parameter set (what the controller and the
//! mismatch labels are computed against).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::ControlAffineSystem;

/// Inverted pendulum with the angle measured from the upright equilibrium:
///
/// ```text
/// theta_ddot = (g/l) sin(theta) - b/(m l^2) theta_dot + u/(m l^2)
/// ```
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub damping: f64,
}

#[derive(Debug, Clone)]
pub struct Pendulum {
    params: PendulumParams,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &PendulumParams {
        &self.params
    }
}

impl ControlAffineSystem for Pendulum {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let inertia = p.mass * p.length * p.length;
        DVector::from_column_slice(&[
            x[1],
            (p.gravity / p.length) * x[0].sin() - p.damping / inertia * x[1],
        ])
    }

    fn actuation(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let p = &self.params;
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0 / (p.mass * p.length * p.length)])
    }
}

/// Kinematic bicycle with velocity/steering actuation errors and an unknown
/// longitudinal friction drag.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BicycleParams {
    /// Constant longitudinal drag `f_mu`.
    pub friction: f64,
    /// Acceleration gain `b_v`.
    pub accel_gain: f64,
    /// Steering-rate gain `b_gamma`.
    pub steer_gain: f64,
}

/// Full planar state `[p_x, p_y, v, theta, gamma]`.
#[derive(Debug, Clone)]
pub struct Bicycle {
    params: BicycleParams,
}

impl Bicycle {
    pub fn new(params: BicycleParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &BicycleParams {
        &self.params
    }
}

impl ControlAffineSystem for Bicycle {
    fn state_dim(&self) -> usize {
        5
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let (v, theta, gamma) = (x[2], x[3], x[4]);
        DVector::from_column_slice(&[
            v * theta.cos(),
            v * theta.sin(),
            -self.params.friction,
            v * gamma,
            0.0,
        ])
    }

    fn actuation(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(5, 2);
        g[(2, 0)] = self.params.accel_gain;
        g[(4, 1)] = self.params.steer_gain;
        g
    }
}

/// Straight-line tracking reformulation of the bicycle in error coordinates
/// `e = (p_y, v - v_ref, theta, gamma)`; the reference heading and lateral
/// offset are zero and `p_x` is cyclic, so the origin of `e` is the target
/// equilibrium.
#[derive(Debug, Clone)]
pub struct BicycleTracking {
    params: BicycleParams,
    reference_speed: f64,
}

impl BicycleTracking {
    pub fn new(params: BicycleParams, reference_speed: f64) -> Self {
        Self { params, reference_speed }
    }

    pub fn params(&self) -> &BicycleParams {
        &self.params
    }

    pub fn reference_speed(&self) -> f64 {
        self.reference_speed
    }

    /// Project a full 5-state onto the error coordinates.
    pub fn error_coords(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_column_slice(&[x[1], x[2] - self.reference_speed, x[3], x[4]])
    }
}

impl ControlAffineSystem for BicycleTracking {
    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn drift(&self, e: &DVector<f64>) -> DVector<f64> {
        let v = e[1] + self.reference_speed;
        DVector::from_column_slice(&[v * e[2].sin(), -self.params.friction, v * e[3], 0.0])
    }

    fn actuation(&self, _e: &DVector<f64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(4, 2);
        g[(1, 0)] = self.params.accel_gain;
        g[(3, 1)] = self.params.steer_gain;
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(data: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(data)
    }

    #[test]
    fn pendulum_fields_match_equations() {
        let p = Pendulum::new(PendulumParams { mass: 2.0, length: 1.0, gravity: 9.81, damping: 0.1 });
        let x = v(&[0.3, -1.2]);
        let f = p.drift(&x);
        assert_relative_eq!(f[0], -1.2, epsilon = 1e-15);
        assert_relative_eq!(f[1], 9.81 * 0.3f64.sin() - 0.05 * -1.2, epsilon = 1e-14);
        let g = p.actuation(&x);
        assert_eq!(g.shape(), (2, 1));
        assert_relative_eq!(g[(1, 0)], 0.5, epsilon = 1e-15);
        assert_eq!(g[(0, 0)], 0.0);
    }

    #[test]
    fn pendulum_upright_is_equilibrium() {
        let p = Pendulum::new(PendulumParams { mass: 1.0, length: 1.0, gravity: 9.81, damping: 0.1 });
        assert_eq!(p.drift(&v(&[0.0, 0.0])).norm(), 0.0);
    }

    #[test]
    fn bicycle_fields_at_reference_point() {
        let b = Bicycle::new(BicycleParams { friction: 1.0, accel_gain: 1.5, steer_gain: 0.75 });
        let x = v(&[0.0, 0.25, 2.0, 0.25, 0.25]);
        let f = b.drift(&x);
        assert_relative_eq!(f[0], 2.0 * 0.25f64.cos(), epsilon = 1e-14);
        assert_relative_eq!(f[1], 2.0 * 0.25f64.sin(), epsilon = 1e-14);
        assert_relative_eq!(f[2], -1.0, epsilon = 1e-15);
        assert_relative_eq!(f[3], 0.5, epsilon = 1e-15);
        assert_eq!(f[4], 0.0);
        let g = b.actuation(&x);
        assert_eq!(g.shape(), (5, 2));
        assert_relative_eq!(g[(2, 0)], 1.5, epsilon = 1e-15);
        assert_relative_eq!(g[(4, 1)], 0.75, epsilon = 1e-15);
        assert_eq!(g.iter().filter(|&&e| e != 0.0).count(), 2);
    }

    #[test]
    fn tracking_error_dynamics_are_consistent_with_full_state() {
        let params = BicycleParams { friction: 0.4, accel_gain: 1.2, steer_gain: 0.9 };
        let full = Bicycle::new(params);
        let err = BicycleTracking::new(params, 5.0);
        let x = v(&[3.0, 0.4, 4.2, -0.2, 0.1]);
        let u = v(&[0.7, -0.3]);
        let e = err.error_coords(&x);
        let de = err.derivative(&e, &u);
        let dx = full.derivative(&x, &u);
        // e = (p_y, v - v_ref, theta, gamma): derivatives match rows 1..4.
        for (i, row) in [1usize, 2, 3, 4].iter().enumerate() {
            assert_relative_eq!(de[i], dx[*row], epsilon = 1e-14);
        }
    }

    #[test]
    fn nominal_tracking_origin_is_equilibrium() {
        let nominal = BicycleParams { friction: 0.0, accel_gain: 1.0, steer_gain: 1.0 };
        let sys = BicycleTracking::new(nominal, 5.0);
        assert_eq!(sys.drift(&v(&[0.0, 0.0, 0.0, 0.0])).norm(), 0.0);
    }
}
