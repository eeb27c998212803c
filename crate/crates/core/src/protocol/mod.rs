//! MPSL round state machines and training drivers.
//!
//! Each round, every client uploads its cut-layer activations and receives
//! the server's prediction; it evaluates its loss against labels that
//! never leave it and returns the loss value, `|B_n|` and the gradient of
//! its loss with respect to the prediction. Once every client has
//! answered, the server runs one backward pass over the aggregated loss,
//! steps its parameters and sends each client its cut-layer gradient.

mod client;
mod config;
mod driver;
mod server;

pub use client::{ClientMachine, MpslClient};
pub use config::{allocate_batches, Federation, TrainingConfig};
pub use driver::{
    accept_links, run_client, run_mpsl_sequential, run_mpsl_tcp, run_mpsl_threaded, serve_mpsl, Link, LocalLink,
    RunOptions, TrainedArtifacts,
};
pub(crate) use driver::{collect_pushes, fill_trainable, join_clients, recv, register_links};
pub use server::{MpslServer, Phase, RoundResult, ServerRoundState};
