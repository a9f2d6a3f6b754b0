//! Desk-scale dual-query multimodal alignment stack.
//!
//! The crate wires a deterministic synthetic scene pipeline into a
//! dual-query transformer (visual + grounding queries over frozen-style
//! global/local features), four masked pre-training objectives, and a
//! LoRA-adapted generative stage over a small causal language model, with
//! evaluation utilities for grounding and QA tasks.

pub mod codec;
pub mod eval;
pub mod genstage;
pub mod model;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod scene;
pub mod templates;
pub mod tensor;
pub mod trainer;

pub use tensor::{AttnMask, Gradients, Tape, Var};
