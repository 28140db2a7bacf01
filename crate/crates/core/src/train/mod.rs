//! Optimization infrastructure: decoupled-weight-decay Adam, the two-stage
//! toy pipeline (pretrain-and-freeze the LM, then train the projector and
//! optionally LoRA), and finite-difference gradient checking.

pub mod adamw;
pub mod gradcheck;
pub mod pipeline;
pub mod runlog;

pub use adamw::{AdamW, Precision, TrainConfig};
pub use gradcheck::{grad_check, grad_check_multi};
pub use pipeline::{
    pretrain_toy_lm, train_projector, ConnectorCorpus, PretrainConfig, TrainedConnector,
};
pub use runlog::RunLog;
