//! Spiking-network toolkit for event-camera classification: event ingestion,
//! LIF simulation, surrogate-gradient training, post-training quantization,
//! analytic cost models and joint design-space exploration over precision,
//! timesteps and attention window.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod cost;
pub mod dse;
pub mod event_io;
pub mod ops;
pub mod quantizer;
pub mod spiking;
pub mod training;
