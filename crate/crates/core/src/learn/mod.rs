//! Reverse-mode differentiation, the convolutional prior, learnable
//! reconstruction networks and their training loop.

pub mod model;
pub mod nn;
pub mod tape;
pub mod train;

pub use model::{
    direct_inversion, infer, run_tv, run_unrolled, Context, DirectModel, InitKind, PriorKind, Trainable, TvNetwork,
    UnrolledModel, UnrolledOptions,
};
pub use nn::{weight_init, Mode, ParamGroup, ParamSet, PriorConfig, PriorNet};
pub use tape::{Tape, Tensor, Var};
pub use train::{train, AdamConfig, OptimizerState, TrainConfig, TrainReport, TrainSample, Trainer};
