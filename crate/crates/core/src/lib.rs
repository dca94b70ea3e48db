//! A desk-scale sparse mixture-of-experts transformer laboratory.
//!
//! * [`numerics`]: tensors, a reverse-mode tape and gradient checking.
//! * [`routing`]: gating, token-choice and expert-choice dispatch, auxiliary losses.
//! * [`model`]: expert FFNs, the MoE layer and a prefix-LM transformer stack.
//! * [`training`]: masked prefix-LM loss, Adam with freezing, checkpoint averaging.
//! * [`evalkit`]: task files, prompts, exact-match scoring and synthetic tasks.

pub mod error;
pub mod evalkit;
pub mod model;
pub mod numerics;
pub mod routing;
pub mod training;

pub use error::{Error, Result};
