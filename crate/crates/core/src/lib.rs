//! Situational fusion of perception representations for goal-directed grid
//! navigation.
//!
//! The crate is organized bottom-up:
//!
//! - [`gridworld`]: procedural environments, the octagonal traversal graph and
//!   the shortest-path oracle that labels optimal actions.
//! - [`percept`]: a bank of synthetic representation extractors computed from
//!   simulator ground truth.
//! - [`numcore`]: a small dense network kernel with ADAM and gradient checking.
//! - [`fusion`]: black-box, concat, feature-level and action-level policies plus
//!   voting rules.
//! - [`losses`]: imitation cross-entropy, load balancing, the bilinear affinity
//!   penalty and empirical affinity estimation.
//! - [`train`]: dataset construction and the imitation loop.
//! - [`eval`]: rollouts, robustness sweeps and gate analytics.

pub mod error;
pub mod eval;
pub mod fusion;
pub mod gridworld;
pub mod losses;
pub mod numcore;
pub mod percept;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
pub use fusion::{ActionDistribution, FusionPolicy, GateOutput, Scheme};
pub use gridworld::{Action, Direction, GridMap, NavGraph, ObjectClass, World};
pub use losses::{AffinityMatrix, LossBreakdown};
pub use percept::{Bank, Domain, RepresentationSet};
