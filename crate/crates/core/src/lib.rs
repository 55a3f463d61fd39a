//! Spoken language understanding from speech: CTC acoustic models whose
//! output alphabet carries concept tags, trained through a chain of
//! increasingly specific tasks.

pub mod alphabet;
pub mod ctc;
pub mod curriculum;
pub mod decoder;
pub mod experiment;
pub mod featurizer;
pub mod logmath;
pub mod manifest;
pub mod metrics;
pub mod net;
pub mod ngram_lm;
pub mod synthdata;
pub mod tag_codec;
