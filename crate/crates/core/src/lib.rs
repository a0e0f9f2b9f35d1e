//! Fast-slow lactate kinetics between extracellular space, capillaries and,
//! in the extended model, neurons and astrocytes.
//!
//! The crate evaluates the two controlled models, integrates them, computes
//! their frozen-input equilibria and critical manifolds, and runs the
//! averaging and shooting machinery that certifies periodic buffering under
//! repeated stimuli.

pub mod averaging;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod equilibria;
pub mod integrator;
pub mod manifold;
pub mod quadrature;
pub mod scenarios;
pub mod signals;

pub use dynamics::{Params2D, Params4D, State2D, State4D, System2D, System4D};
pub use integrator::{integrate, IntegratorConfig, OdeSystem, StiffnessMode, Trajectory};
pub use signals::{Control, Signal};
