//! Learning weighted temporal logic rules from event sequences.
//!
//! The learner alternates between a convex restricted master problem that
//! re-weights the current rules ([`master`]) and a rule search that proposes
//! the rule with the most negative dual price ([`generator`]). Rules are
//! conjunctions of body predicates with pairwise temporal relations
//! ([`logic`]); they drive the intensity of a head predicate through a
//! log-linear point process ([`tlpp`]).

pub mod logic;
pub mod generator;
pub mod harness;
pub mod master;
pub mod simulator;
pub(crate) mod reduce;
pub mod tlpp;
