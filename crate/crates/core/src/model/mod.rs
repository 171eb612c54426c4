//! Model assembly: configuration, parameters, and the forward pass.

pub mod config;
pub mod forward;
pub mod params;

pub use config::{Ablations, Mode, MscConfig};
pub use forward::{model_forward, Consumer, ConsumerGates, DropoutCtx, ForwardTrace, ModelCtx};
pub use params::{
    count_params, is_l2_regularized, modes_share_params, ContextCellParams, CtxFusionParams,
    DecBlockParams, EncLayerParams, GateParams, ModelParams,
};
