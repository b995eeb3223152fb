//! Federated multi-task learning with variational Bayesian neural networks.
//!
//! The crate simulates, in a single process, a server and a set of clients
//! that jointly train a star-shaped hierarchical model: one shared "server"
//! network feeding per-client private networks through lateral connections.
//! Training refines an approximate posterior over the shared weights one
//! client at a time, exchanging compact Gaussian factor messages instead of
//! raw gradients. Point-estimate baselines (federated averaging, purely local
//! training, and centralized training) share the same data pipeline and
//! evaluation harness so results are comparable row for row.
//!
//! Modules build bottom-up:
//!
//! * [`tensor`] — dense `f64` tensors and a tape-based reverse-mode
//!   autodiff engine.
//! * [`variational`] — diagonal Gaussians in moment and natural parameters,
//!   factor algebra, KL divergence, and reparameterized sampling.
//! * [`optim`] — Adam and SGD over flat parameter vectors.
//! * [`model`] — the shared/lateral network architectures and their
//!   log-likelihoods, for both tape (training) and plain (evaluation) paths.
//! * [`refinement`] — the server/client message-passing loop and its free
//!   energy objective.
//! * [`baselines`] — federated averaging, local-only, and centralized
//!   training under a matched epoch budget.
//! * [`data`] — dataset loading, sharding, permutation, and synthetic
//!   generators.
//! * [`harness`] — experiment configuration, execution, and CSV metrics.
//! * [`checkpoint`] — versioned, bit-exact JSON snapshots of server state.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod harness;
pub mod model;
pub mod optim;
pub mod refinement;
pub mod seed;
pub mod tensor;
pub mod variational;

#[cfg(test)]
pub(crate) mod testutil;
