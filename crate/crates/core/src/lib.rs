//! Offline batch-constrained Q-learning for sequential cash-bonus promotion,
//! paired with a Lagrangian allocator that holds the average bonus cost per
//! customer under a budget.
//!
//! The pipeline: [`env`] simulates check-in users and logs trajectories under
//! a behavior policy; [`bcq`] learns action values from that log; [`allocator`]
//! turns per-customer action values into budget-feasible assignments, both in
//! batch and over a sliding window; [`eval`] scores policies on logged data
//! and in simulation. [`baselines`] holds the comparison policies.

pub mod allocator;
pub mod baselines;
pub mod bcq;
pub mod env;
pub mod eval;
pub mod io;
pub mod model;
pub mod money;
pub mod neural;
pub mod policy;

pub use model::{ActionSet, Dataset, HyperParams, StateVector, Trajectory, Transition};
pub use money::Cents;
