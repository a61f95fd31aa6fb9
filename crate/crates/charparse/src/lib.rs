//! Character-level language model pipeline for POS tagging and dependency
//! parsing of noisy, low-resource text.
//!
//! The pipeline encodes words from their characters (multi-width CNNs with
//! highway layers), feeds them to a small transformer encoder, pretrains with
//! masked language modeling, and fine-tunes a biaffine graph parser with an
//! MLP tagger on top. A closed-vocabulary subword encoder is included as a
//! baseline so the two word-representation strategies can be compared under
//! injected orthographic noise.

pub mod autodiff;
pub mod char_encoder;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod model;
pub mod parser;
pub mod subword;
pub mod train;
