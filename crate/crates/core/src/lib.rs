//! Adaptive LSTM encoder-decoder for dialogue generation.
//!
//! The recurrent weight matrices of the encoder and decoder are not fixed
//! parameters: they are generated per conversation from a low-rank factor pair
//! `U·diag(s)·Vᵀ`, where `s` is either a per-step context code produced by a
//! small adapter LSTM or the conversation's inferred topic distribution (or a
//! gated mix of both). Topics come from a neural variational topic inferrer
//! trained jointly through an evidence lower bound.
//!
//! Everything runs on the small reverse-mode tape in [`tensor`].

pub mod adapters;
pub mod app;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod recurrent;
pub mod synth;
pub mod tensor;
pub mod topic;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
