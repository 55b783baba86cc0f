//! Norm bounds, stability criteria and trapping/stability region estimates for
//! time-varying nonlinear systems `ẋ = A(t)x + f(t,x) + F(t)`.
//!
//! The pipeline: integrate the fundamental matrix of `ẋ = A(t)x`
//! ([`transition`]), reduce the system to a scalar comparison equation driven by
//! `p(t)`, `k(t)` and a Lipschitz envelope ([`auxiliary`]), reduce that to an
//! autonomous equation whose fixed points give ellipsoidal region certificates
//! ([`regions`]), and check everything against direct simulation ([`validate`]).

pub mod auxiliary;
pub mod cli;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod regions;
pub mod series;
pub mod transition;
pub mod validate;
