//! Retrieval-augmented question answering trained end to end.
//!
//! Gradients of the marginal answer likelihood reach the question encoder,
//! the passage encoder and the generator. Because the passage encoder keeps
//! changing, the knowledge-base index goes stale; a [`refresher::Refresher`]
//! re-encodes the knowledge base and rebuilds the index every N steps on a
//! background thread, publishing immutable generation-numbered snapshots
//! while training continues against whichever snapshot is newest.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod index;
pub mod model;
pub mod refresher;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream for `(seed, tag)`.
pub fn seeded_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(tag.as_bytes());
    ChaCha8Rng::seed_from_u64(corpus::fnv1a(&bytes))
}
