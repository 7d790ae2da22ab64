//! Learnable terminal-cost families.
//!
//! [`PwqNet`] is a convex piecewise-quadratic function of the state built
//! from squared ReLU features; [`PsdNet`] is a context-dependent quadratic
//! form whose weight matrix is PSD by construction.

mod psd;
mod pwq;

pub use psd::{Mlp, PsdGradients, PsdNet};
pub use pwq::{project_pwq_params, PwqGradients, PwqNet, DEFAULT_B_FLOOR};
