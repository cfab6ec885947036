//! Desk-scale extreme summarization toolkit.
//!
//! The pipeline runs end to end on a single machine: corpus preparation and
//! vocabulary building ([`corpus`]), collapsed-Gibbs LDA topics ([`topiclda`]),
//! a topic-conditioned convolutional seq2seq model ([`convs2s`]) built on a
//! hand-rolled reverse-mode autodiff tape ([`diffcore`]), training with
//! Nesterov momentum and gradient renormalization ([`trainer`]), beam-search
//! decoding ([`inference`]), and extractive baselines plus ROUGE scoring and
//! corpus analysis ([`evalsuite`]). The `xsumforge` binary in this crate wires
//! everything into a CLI ([`cli`]).

pub mod cli;
pub mod convs2s;
pub mod corpus;
pub mod diffcore;
pub mod evalsuite;
pub mod inference;
pub mod threads;
pub mod topiclda;
pub mod trainer;
