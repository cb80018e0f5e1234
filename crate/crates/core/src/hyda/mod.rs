//! Domain-conditioned networks: a domain classifier whose embedding drives a
//! hypernetwork that generates selected layers of a primary network.

mod model;
mod persist;
mod train;

pub use model::{
    BoundDomain, BoundHyda, BoundHyper, BoundPrimary, DomainClassifier, GeneratedParams, GeneratedVars, HydaModel,
    HyperHead, Hypernetwork, ModelConfig, PrimaryNetwork,
};
pub use persist::{load_model, save_model, Architecture, ARCHITECTURE_FILE};
pub use train::{
    domain_accuracy, domain_objective, pretrain_domain, task_objective, train_baseline, train_joint, BaselineMlp,
    EpochLog, Objective, TrainConfig, TrainingLog, MSIM_H_TERM,
};
