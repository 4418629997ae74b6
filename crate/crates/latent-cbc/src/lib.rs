//! Joint training and formal verification of a Lipschitz-certified neural
//! control barrier certificate (CBC) and a safe control policy, driven by
//! rendered visuomotor observations of two built-in environments.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense matrices with reverse-mode autodiff, including a
//!   differentiable log-determinant.
//! - [`nets`]: the four networks (encoder, latent dynamics, barrier, policy),
//!   target copies, and checkpoint persistence.
//! - [`envs`]: ground-truth dynamics, deterministic frame rendering, labeled
//!   dataset sampling, and rollouts for the pendulum and ground vehicle.
//! - [`losses`]: the training losses, including the LMI-based Lipschitz
//!   certificate loss.
//! - [`certify`]: covering radius, margin formulas, Lipschitz probes, and the
//!   margined-condition verifier.
//! - [`train`]: warm start plus the iterative synthesis loop.
//! - [`cli`]: command-line front end (train / verify / rollout / export).
//!
//! See the `book/` guide for a narrative walkthrough of the math.

pub mod certify;
pub mod cli;
pub mod envs;
pub mod losses;
pub mod nets;
pub mod tensor;
pub mod train;
