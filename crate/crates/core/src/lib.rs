//! Text-derived concept activation vectors.
//!
//! Two affine maps link a target classifier's penultimate feature space with
//! a vision-language model's joint embedding space. Mapping concept text
//! embeddings through `h` gives concept vectors in the target space, and the
//! classifier head's weight rows give the logit gradients they are scored
//! against.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cav;
pub mod concepts;
pub mod error;
pub mod linalg;
pub mod num_format;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
