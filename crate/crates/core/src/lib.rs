//! Learning state- and input-dependent model uncertainty in the derivative of
//! a control Lyapunov function, and synthesizing min-norm stabilizing
//! controllers that stay robust to the learned uncertainty.
//!
//! The pipeline, bottom to top:
//!
//! * [`kernels`]: squared-exponential base kernels and the affine-dot-product
//!   compound kernel that keeps GP posteriors affine in the control input.
//! * [`gp`]: GP regression on Lyapunov-derivative mismatch data, with the
//!   structured posterior, its second-order-cone factorization, and
//!   marginal-likelihood hyperparameter training.
//! * [`clf`] / [`riccati`]: quadratic Lyapunov functions from LQR design,
//!   Lie derivatives, sublevel-set geometry.
//! * [`dynamics`] / [`systems`]: control-affine vector fields, RK4 rollouts,
//!   mismatch measurements, and the two benchmark plants.
//! * [`conic`]: a dense primal-dual interior-point solver for the small
//!   second-order cone programs the controllers produce.
//! * [`controllers`]: the min-norm CLF-QP, the GP-CLF-SOCP, and the
//!   state-only GP-CLF-QP baseline.
//! * [`episodic`]: episodic data collection that grows a certified region of
//!   attraction estimate.

pub mod clf;
pub mod conic;
pub mod controllers;
pub mod dynamics;
pub mod episodic;
pub mod gp;
pub mod kernels;
pub mod riccati;
pub mod systems;
