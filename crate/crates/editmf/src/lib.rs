//! A desk-scale laboratory for knowledge-edit fingerprinting of compact
//! decoder-only transformers.
//!
//! An owner identity is hashed into (author, novel, protagonist) triples
//! drawn from three 256-entry fictional vocabularies. Causal tracing finds
//! the layers mediating each triple, a hidden-state perturbation is
//! optimized for the new protagonist, and a null-space-projected closed-form
//! update writes it into the layer's association matrix without disturbing
//! preserved corpus keys. Verification needs only greedy text completion:
//! every canonical query must return the embedded protagonist exactly.

pub mod attacks;
pub mod codebook;
pub mod corpus;
pub mod editor;
pub mod error;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tokenizer;
pub mod tracing;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
