//! Layerwise proximal replay for online continual learning.
//!
//! Each layer's gradient is preconditioned by `Λ = (I + ω ZᵀZ)⁻¹`, where the
//! rows of `Z` are that layer's inputs on replay data. Directions the replay
//! activations excite are damped, which keeps the representation of past data
//! stable while new data is learned.

// `!(x > 0.0)` is used on purpose so that NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod buffer;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod precond;
pub mod rng;
pub mod stream;
pub mod verify;

pub use buffer::{Capacity, Item, ReplayBuffer};
pub use error::{Error, Result};
pub use harness::{run, sweep, Method, RunConfig, RunOutcome, RunSummary, SweepGrid, SweepResult, Trainer};
pub use linalg::Matrix;
pub use metrics::{EvalRecord, GradRatio, RunLog};
pub use net::{Gradients, Network};
pub use precond::{OmegaConfig, PreconditionerState};
pub use rng::SplitMix64;
pub use stream::{Batch, EvalSets, SplitGaussianSpec, StreamKind, TaskStream};
pub use verify::{verify, Fault, VerifyOptions, VerifyReport};
