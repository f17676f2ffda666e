//! Inhomogeneous ASEP on the discrete torus, its Gärtner transform under weak
//! asymmetry, the discrete and continuum parabolic Anderson semigroups, and a
//! mild-solution solver for the limiting stochastic heat equation
//! `∂t Z = (½∂xx + R̄′) Z + ξ Z`.
//!
//! Modules are layered bottom-up:
//!
//! * [`torus`]: geometry and Hölder seminorms on `Z/NZ`.
//! * [`environment`]: bond inhomogeneities `rtt(x) = 1 + a(x)` and their partial sums.
//! * [`asep`]: event-driven simulation, heights, the Gärtner field and identities.
//! * [`kernels`]: random-walk kernels (homogeneous and Bouchaud), perturbation series.
//! * [`semigroup`]: discrete `e^{t·ham}` and continuum `e^{tH}` semigroups.
//! * [`she`]: the SPDE solver.
//! * [`diagnostics`]: martingale-problem, moment and convergence experiments.

pub mod asep;
pub mod diagnostics;
pub mod environment;
pub mod error;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod rng;
pub mod semigroup;
pub mod she;
pub mod special;
pub mod stats;
pub mod torus;

pub use asep::{AsepState, FieldPath, GartnerField, ScalingParams};
pub use environment::{ContinuumEnvironment, EnvKind, Environment};
pub use error::{Error, Result};
pub use kernels::{Kernel, Normalization};
pub use semigroup::{ContinuumSemigroup, DiscreteSemigroup, EigenSystem};
pub use she::{MildSolution, NoiseField};
