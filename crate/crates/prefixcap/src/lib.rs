//! Prefix-conditioned image captioning at desk scale.
//!
//! A frozen synthetic scene encoder produces a dense embedding; a trained
//! mapping network (MLP or transformer with learned constants) translates it
//! into k prefix embeddings that steer a decoder-only autoregressive
//! language model. Training uses masked cross-entropy over prefix-caption
//! concatenations; decoding is greedy or beam search; evaluation covers
//! BLEU@4, ROUGE-L, and CIDEr plus prefix interpretability and
//! prefix-length ablations.

pub mod checkpoint;
pub mod config;
pub mod data_synth;
pub mod decode;
pub mod encoder;
pub mod gradcheck;
pub mod interpret;
pub mod lm;
pub mod mapper;
pub mod metrics;
pub mod par;
pub mod param;
pub mod pipeline;
pub mod tensor;
pub mod text;
pub mod train;
pub mod transformer;
