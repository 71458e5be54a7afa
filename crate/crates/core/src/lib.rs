//! Multimodal fusion by channel exchanging.
//!
//! A small deterministic tensor/autodiff stack, normalization with private
//! per-modality scaling factors, the exchange mechanism they drive, fusion
//! baselines, synthetic multimodal tasks and numerical checks of the
//! attraction-to-zero behaviour of l1-penalized scaling factors.

pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod exchange;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod net;
pub mod norm;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod synthdata;
pub mod tensor;
pub mod theorem;
pub mod train;

pub use error::{Error, Result};
pub use exchange::{ExchangePlan, ExchangeReport, LayerExchange};
pub use net::{
    Arch, CenModel, ForwardOutput, FusionKind, FusionStrategy, LossConfig, Mode, ModelConfig,
    ParamCounts, Sharing, Stage, Target, TaskLoss,
};
pub use graph::{Gradients, Graph, ParamId, ParamStore, Var};
pub use norm::{NormMode, NormState};
pub use optim::Sgd;
pub use tensor::Tensor;
