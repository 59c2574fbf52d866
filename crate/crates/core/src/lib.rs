//! Desk-scale laboratory for unexpected code-switching in language models.
//!
//! The crate trains a character-level micro transformer on synthetic
//! multi-script corpora, fits sparse autoencoders to its residual stream,
//! ranks language-specific features by monolinguality, and uses those
//! features both for inference-time directional ablation and as an auxiliary
//! fine-tuning signal that keeps forbidden-language pre-activations in check.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
mod error;

pub use error::{Error, Result};
pub mod corpus;
pub mod eval;
pub mod langfeat;
pub mod pipeline;
pub mod microlm;
pub mod sae;
pub mod sasft;
pub mod steer;
pub mod scripts;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream `stream` under master seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
