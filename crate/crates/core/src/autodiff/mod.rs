//! Minimal tape-based autodiff and the layers built on it.

pub mod nn;
pub mod params;
pub mod tape;

pub use params::{clip_global_norm, Adam, AdamConfig, ParamStore};
pub use tape::{concat, Grads, Tape, Var};
