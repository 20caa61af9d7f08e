//! Multimodal depression screening engine.
//!
//! Per-modality attention encoders are pretrained with a siamese contrastive
//! objective, fused late into a single unit-norm session embedding, and
//! classified against a clinician-curated reference corpus by cosine
//! similarity. Sessions are then ordered into a triage queue by predicted
//! severity.

pub mod checkpoint;
pub mod corpus;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use corpus::{
    classify, phq8_to_label, similarity_index, triage_rank, ClassBoundary, Exemplar, Label, Prediction, Provenance,
    ReferenceCorpus,
};
pub use error::{Error, Result};
pub use model::ModelBundle;
pub use tensor::{Tape, Tensor, Var};
