//! Continual expansion-absorption training for class-incremental learning.
//!
//! A small vision transformer learns a sequence of disjoint class groups
//! without storing any past images. Each new task attaches lightweight
//! parallel branches to a frozen backbone, trains them together with the
//! classifier, then folds the branches back into the host weights exactly,
//! so the parameter count never grows. Old classes are kept alive through
//! frozen per-class prototype features, interpolated pseudo-features, a
//! prototype-aware contrastive term, and distillation from the previous
//! task's model.
//!
//! Everything is built on a recorded-tape reverse-mode differentiator over
//! rank-2 tensors, generic over f32 (training) and f64 (verification
//! oracles), with deterministic kernels throughout: same seed, same bytes.
//!
//! The `examples/` directory is the front door; each file demonstrates one
//! capability end to end. The `ceat` binary wraps the same library surface
//! in `train` / `eval` / `verify-absorb` / `gradcheck` / `report`
//! subcommands.

pub mod absorb;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod prototypes;
pub mod report;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Element, Precision, Tensor};
