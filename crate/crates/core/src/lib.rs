//! Mask-guided dynamic sparse attention for block diffusion decoding.
//!
//! The crate contains a seeded toy block-diffusion transformer, the
//! mask-guided KV selection algorithm with its AR-style baselines, the
//! decoding loop, recall/skewness analyses, an analytic latency model and
//! the forward path of the sparse-aware fine-tuning objective.

pub mod baselines;
pub mod config;
pub mod costmodel;
pub mod decoder;
pub mod error;
pub mod kvcache;
pub mod mage;
pub mod metrics;
pub mod plan;
pub mod tensor;
pub mod trace;
pub mod traindata;
pub mod toymodel;

pub use error::{MageError, Result};
pub use kvcache::{build_page_meta, KvCache, KvSlab, PageMeta};
pub use plan::{LayerPlan, PlanSource, SelectionPlan};
pub use toymodel::{build_model, forward_block, BlockState, Model, ModelConfig, StepAttention};
