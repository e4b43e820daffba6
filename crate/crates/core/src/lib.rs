//! Personalized item-to-item retrieval.
//!
//! The pipeline has two stages. An offline indexing stage turns click logs into a
//! truncated item-to-item table using user-weighted Swing similarity
//! ([`indexer`]). A personalized retrieval stage fans out candidates from that
//! table for every item in a user's history and ranks them with a
//! target-attention scoring network ([`model`]) trained on negatives drawn from
//! the same trigger-target relationships ([`sampler`]). [`retrieval`] wires the
//! two together and hosts the hit-rate evaluation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod features;
pub mod indexer;
pub mod model;
pub mod retrieval;
pub mod sampler;
pub mod seed;
pub mod synth;

pub use corpus::{DatasetSplit, HeldOut, Interaction, SideInfo, UserHistory, Vocab, Vocabularies};
pub use error::{Error, Result};
pub use features::FeatureStore;
pub use indexer::{CoClickStats, I2ITable, IndexEntry, IndexParams};
pub use model::{AttentionMode, ModelParams, TrainConfig, TriggerMode};
pub use retrieval::{EvalQuery, EvalReport, RetrievalRun};
pub use sampler::{SampleStats, SamplerConfig, TrainingSample};

/// Dense item identifier. Row 0 of every embedding table is reserved for unknown ids.
pub type ItemId = u32;
/// Dense user identifier.
pub type UserId = u32;
