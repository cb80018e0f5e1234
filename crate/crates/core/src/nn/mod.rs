//! Layers, initialisers, the AdamW optimizer and the cosine schedule.

pub mod checkpoint;
mod init;
mod layers;
mod optim;

pub use init::{hyperfan_init, kaiming_init, zero_init};
pub use layers::{
    hyper_linear_forward, linear_forward, BoundLinear, BoundMlp, HyperLinearLayer, LinearLayer, Mlp, MlpLayer, Module,
};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
