//! Monte Carlo laboratory for biased random walks on supercritical
//! Galton-Watson trees with leaves.
//!
//! * [`pgf`]: offspring laws, extinction probability, backbone/trap laws, regimes
//! * [`tree`]: lazily generated conditioned trees and finite trap/oracle trees
//! * [`walk`]: the biased walk, backbone projection, regenerations, excursions
//! * [`stats`]: estimators and goodness-of-fit tests
//! * [`lab`]: the canonical experiments assembled from the pieces above

pub mod error;
pub mod lab;
pub mod pgf;
pub mod rng;
pub mod stats;
pub mod tree;
pub mod walk;

pub use error::{Error, Result};
pub use pgf::{DerivedLaws, OffspringLaw, Regime, RegimeReport};
pub use rng::{derive_seed, CounterRng};
pub use tree::{FiniteTree, TreeHandle, VertexId, VertexRecord};
pub use walk::{RegenerationRecord, Trajectory};
