//! genaf-core: robust fine-tuning of pre-trained image encoders.
//!
//! The toolkit takes a (possibly adversary-known) pre-trained encoder and
//! produces a downstream classifier hardened against encoder-derived
//! adversarial examples, in two stages: dual-track adversarial
//! fine-tuning with a feature-graph regularizer, followed by standard
//! fine-tuning of the least robustness-sensitive layers. Evaluation
//! attacks (per-sample PGD and a universal perturbation), TA/RA/ASR
//! metrics, checkpointing, and an experiment pipeline round out the
//! artifact.

pub mod attack;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod feature_graph;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod packed;
pub mod pipeline;
pub mod plots;
pub mod pretrain;
pub mod sensitivity;
pub mod stage1;
pub mod stage2;
pub mod synth;
pub mod tensor;
pub mod trainlog;
pub mod util;

pub use error::{Error, Result};
