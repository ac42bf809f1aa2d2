//! Drum-pattern variational autoencoder workbench.
//!
//! Load GM drum MIDI files, cut them into two-bar 9×32 grids, train a small
//! VAE with a 2-D latent space, and turn latent coordinates back into
//! microtimed patterns that a step sequencer plays or a MIDI file stores.

pub mod encoding;
pub mod midi;
pub mod nn;
pub mod sequencer;
pub mod synth;
pub mod vae;
