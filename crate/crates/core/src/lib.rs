//! Activated Random Walk on `Z^d`, boxes and tori.
//!
//! The crate is organized bottom-up:
//!
//! * [`lattice`]: sites, topologies and particle configurations;
//! * [`stabilizer`]: the abelian stabilization engine;
//! * [`chains`]: point sources, region sources, Poisson sprinkling and the
//!   wired, free and wake Markov chains;
//! * [`statistics`]: estimators for densities, shapes, correlations and
//!   number variance;
//! * [`harness`]: experiment configs, seed derivation and run manifests.

pub mod chains;
pub mod error;
pub mod harness;
pub mod lattice;
pub mod rng;
pub mod stabilizer;
pub mod statistics;

pub use error::{ArwError, Result};
pub use lattice::{Configuration, Neighbor, Site, SiteState, Topology, TopologyKind};
pub use stabilizer::{
    Budget, Instruction, InstructionSource, Mode, SchedulerPolicy, StabilizationOutcome, Stabilizer,
};
