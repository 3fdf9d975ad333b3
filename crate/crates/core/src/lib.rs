//! Fair allocation of indivisible goods with Round Robin, a differentiable
//! relaxation of it (SoftRR), and NeuralRR, which learns the agent order that
//! Round Robin runs in.
//!
//! Every allocation produced at inference time is exact Round Robin under
//! some order, so it is envy-free up to one good.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod fairdiv;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod soft;
pub mod svd;
pub mod training;

pub use autodiff::{finite_difference_check, Graph, Tensor};
pub use data::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetMeta, Labeler, Sample};
pub use error::{Error, Result};
pub use fairdiv::{
    allocation_welfare, is_ef, is_ef1, muw_allocation, round_robin, round_robin_induced,
    utilitarian_welfare, AgentPermutation, IntegralAllocation, ValuationProfile,
};
pub use matrix::Matrix;
pub use metrics::{evaluate, EvalSummary, Mechanism};
pub use model::{nrr_forward_train, nrr_infer, nrr_order, NrrParams};
pub use rng::RngStream;
pub use soft::{one_round, soft_round, soft_rr, Temperature};
pub use training::{train, TrainConfig, TrainReport};
