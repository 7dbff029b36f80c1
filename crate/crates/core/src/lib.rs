//! Active speaker detection by face-voice association, operating on
//! pre-extracted face-frame and voice embeddings.
//!
//! The pipeline: segment speaker-homogeneous utterances from audio feature
//! streams ([`segmentation`]), aggregate each visible identity's face frames
//! into one embedding and score every utterance against all visible
//! identities ([`model`]), spread the resulting probabilities over concurrent
//! face-track frames and score them with VOC-style mAP ([`eval`]).

pub mod corpus;
pub mod error;
pub mod kernel;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod model;
pub mod eval;
pub mod segmentation;
pub mod selflift;
pub mod synthgen;
