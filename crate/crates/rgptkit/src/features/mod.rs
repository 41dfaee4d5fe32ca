//! From backbone grid to decoder-ready embeddings: learned upsampling
//! ([`refine`]), region and global pooling ([`pool`]), and the shared
//! projection into the language embedding space ([`connector`]).

pub mod connector;
pub mod pool;
pub mod refine;

pub use connector::{Connector, ConnectorCache, ConnectorConfig};
pub use pool::{adaptive_pool, adaptive_pool_backward, mask_pool, mask_pool_backward};
pub use refine::{RefineCache, RefineVariant, Refiner, RefinementConfig};
