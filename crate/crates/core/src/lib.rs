//! Bayesian federated learning over heterogeneous fading uplinks.
//!
//! Devices send the sign of their zero-centered local gradient over a real
//! block-fading AWGN channel, together with two scalar prior descriptors.
//! The server combines the noisy received symbols with those priors and its
//! channel knowledge to form a conditional-mean estimate of the gradient sum.
//!
//! The crate contains the device side ([`prior`]), the uplink ([`channel`]),
//! the server-side estimators ([`aggregate`]), numerical checks of their
//! mean-squared error and of the convergence bound ([`theory`]), the
//! training loops ([`learn`]), synthetic data ([`data`]) and the experiment
//! harness behind the `sbfl` command-line tool ([`harness`]).

pub mod aggregate;
pub mod channel;
pub mod data;
pub mod error;
pub mod harness;
pub mod learn;
pub mod prior;
pub mod quadrature;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
