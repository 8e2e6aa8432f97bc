//! Joint social representations: user, word and entity vectors plus
//! relation matrices trained by negative-sampling SGD over what users write,
//! who they are friends with, and which attribute triples hold for them.
//!
//! On top of frozen user vectors the crate trains attribute and pairwise
//! relation classifiers, answers group-level conditional queries by fitting
//! a group embedding, and runs the split/ablation evaluation protocol on
//! labelled corpora, including synthetic planted-partition data.

pub mod cli;
pub mod corpus;
pub mod harness;
pub mod inference;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;
