//! Windowed layer offloading for layered models, simulated on a virtual clock.
//!
//! A model whose weights do not fit in device memory is executed by keeping a
//! window of `k` layers resident, evicting `k'` of them as soon as they are
//! computed and prefetching the next `k'` in their place. The crate provides
//! the model numerics, a byte-exact device arena, the residency policies, a
//! discrete-event execution engine, traces and metrics, and a configuration
//! tuner.

pub mod arena;
pub mod engine;
pub mod model;
pub mod par;
pub mod rng;
pub mod scheduler;
pub mod trace;
pub mod tuner;
