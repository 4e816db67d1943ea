//! Serverless federated learning on a single machine.
//!
//! The crate wires together a controller, authenticated client functions
//! running on a simulated FaaS fabric, a chunked parameter store, a
//! memory-bounded FedAvg aggregator, local differential privacy and a
//! FaaS-versus-IaaS cost model.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregator;
pub mod auth;
pub mod client;
pub mod clock;
pub mod controller;
pub mod cost;
pub mod data;
pub mod fabric;
pub mod seed;
pub mod store;
pub mod tensor;
