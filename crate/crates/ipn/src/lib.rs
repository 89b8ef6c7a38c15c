//! Interactive perception plug-in around a frozen toy language model.
//!
//! The learnable surface is four linear layers plus two special-token
//! embeddings wrapped around frozen backbones (a decoder-only language
//! model, a visual encoder, and a bidirectional text encoder). A first
//! forward pass elicits a query-specific request from the language model;
//! the request interacts with fine-grained image features inside the frozen
//! text encoder; the result is transmitted back as the final prefix element
//! of a second pass that generates the answer.

pub mod backbones;
pub mod bundle;
pub mod config;
pub mod data;
pub mod decode;
pub mod gradcheck;
pub mod hash;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;
