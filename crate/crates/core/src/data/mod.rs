//! Session ingestion and preprocessing.
//!
//! Feature matrices (OpenFace/COVAREP-style CSV exports) and transcripts are
//! loaded per session, interviewer speech is scrubbed from both, the
//! remaining stream is cut into fixed windows, and each window is
//! mean-pooled to a bounded number of timesteps.

mod features;
mod manifest;
mod segment;
mod synth;
mod transcript;

pub use features::{load_feature_csv, parse_feature_csv, write_feature_csv, FeatureMatrix, Modality};
pub use manifest::{load_dataset, load_session, split_by_id, Dataset, SessionData, SessionManifest, DATASET_INDEX};
pub use segment::{mean_pool, segment_stream, PreprocessConfig, Segment};
pub use synth::{apportion, synth_dataset, write_dataset, SynthConfig, SynthSession};
pub use transcript::{
    clean_text, load_transcript, parse_transcript, scrub_interviewer, write_transcript, ScrubbedTranscript, Speaker,
    TranscriptTurn,
};
