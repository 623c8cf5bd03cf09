//! Proximal operators and the prompt-tuning loops built on them.

mod prox;
mod train;

pub use prox::{
    l1_norm, l21_norm, nonzero_rows, prox_l1, prox_l1_in_place, prox_l21, prox_l21_in_place,
    regularizer_l1, regularizer_l21, ProxError,
};
pub use train::{
    train_gsfp, train_gsmfp, tune, tune_observed, EpochRecord, Gradients, LossTrace, Method,
    ProxEvent, ProxScaling, TrainError, TrainObserver, TrainableState, TuneConfig, TuneOutcome,
    TuneTask,
};
