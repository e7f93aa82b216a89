//! Convex potential flows.
//!
//! A flow layer is the gradient map `f = grad F` of a strongly convex potential
//! `F`, parameterized by an input-convex neural network. Its Jacobian is the
//! Hessian of `F`, so it is symmetric positive definite and the map is a
//! bijection. Densities follow from the change-of-variables formula, inversion
//! is a convex minimization, and training uses a conjugate-gradient surrogate
//! whose parameter gradient is an unbiased estimate of the log-determinant
//! gradient.

pub mod activations;
pub mod autodiff;
pub mod flow;
pub mod icnn;
pub mod rng;
pub mod solvers;
pub mod training;

#[cfg(test)]
mod testutil;
