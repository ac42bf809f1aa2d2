//! Control service and command-line tool for the drum-pattern VAE.
//!
//! [`session::Session`] holds the corpus, training runs, the current model
//! and the live sequencer. [`api`] exposes it over HTTP and a WebSocket
//! event stream; [`cli`] wraps the offline workflows.

pub mod api;
pub mod cli;
pub mod session;
