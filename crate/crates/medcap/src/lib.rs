//! Image captioning built from first principles: a patch-transformer image
//! encoder, a BERT-style text encoder pretrained with masked language
//! modeling, and a two-layer LSTM decoder trained to predict caption
//! embeddings under a hybrid cosine-MSE loss. Caption tokens are recovered
//! at inference time by cosine similarity against the vocabulary embedding
//! table, with greedy, top-k, and top-p decoding.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use tensor::{backward, Gradients, Scalar, Tensor};
