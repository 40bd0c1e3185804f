//! Training-time and decoding-time repetition suppression for toy
//! sequence-to-sequence models, with the measurement tools to compare them.
//!
//! The crate is organised around a small dense-tensor reverse-mode autodiff
//! engine ([`tensor`]), a configurable toy transformer ([`model`]), the five
//! training objectives under study ([`objectives`]), inference-time
//! suppression baselines ([`decoding`]), repetition/quality metrics
//! ([`metrics`]), attention-attribution analyses ([`attribution`]), a
//! synthetic hallucination-prone corpus generator ([`corpus`]), and a
//! deterministic training/sweep harness ([`trainer`]).

pub mod attribution;
pub mod corpus;
pub mod decoding;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod report;
pub mod rig;
pub mod tensor;
pub mod trainer;

pub use corpus::{CorpusPair, Vocab};
pub use decoding::{decode, DecodeConfig, Strategy};
pub use metrics::MetricsReport;
pub use model::{ForwardTrace, ModelConfig, ModelParams};
pub use objectives::{LossConfig, LossKind};
pub use tensor::{grad_check, GradTensor, Tape};
pub use trainer::TrainConfig;
