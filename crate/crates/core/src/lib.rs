//! Decentralized subspace learning on the Grassmann manifold.
//!
//! A chain of simulated agents each holds a shard of a low-rank matrix
//! completion or multitask regression problem and a local subspace. Pairs of
//! neighbouring agents are sampled by a gossip protocol and take a Riemannian
//! stochastic gradient step on their local task cost plus a consensus penalty,
//! so the local subspaces agree on a shared global subspace.
//!
//! Modules:
//! - [`manifold`]: Grassmann geometry (projection, exponential and logarithm
//!   maps, distances, principal angles, Fréchet mean).
//! - [`problems`]: the local tasks (matrix completion shards and multitask
//!   groups) with closed-form inner solves.
//! - [`gossip`]: the decentralized engine and its variants.
//! - [`data`]: synthetic generators, loaders and partitioners.
//! - [`metrics`]: evaluation metrics, trace and summary writers.
//! - [`cli`]: the experiment runner behind the `subspace-gossip` binary.

pub mod cli;
pub mod data;
pub mod error;
pub mod gossip;
pub mod manifold;
pub mod metrics;
pub mod problems;
pub mod verify;

pub use error::{Error, Result};
pub use manifold::{Subspace, TangentVector};
