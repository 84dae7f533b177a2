//! Musical instrument retrieval from mixture audio.
//!
//! The crate covers the whole pipeline: synthesizing a dataset of
//! single-instrument clips and mixtures from MIDI and parametric
//! instruments ([`synth`]), log-mel features ([`dsp`]), a single-instrument
//! encoder trained as a classifier and a multi-instrument encoder trained
//! with a permutation-invariant cosine loss ([`encoder`], [`pit`]),
//! retrieval against an embedding library ([`retrieval`]) and the
//! evaluation protocols ([`eval`]).

pub mod rng;
pub mod synth;
pub mod dsp;
pub mod pit;
pub mod encoder;
pub mod retrieval;
pub mod eval;
