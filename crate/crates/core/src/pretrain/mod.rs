//! Persistent contrastive divergence pretraining of 2-d MLP energies and the
//! synthetic datasets it is trained on.

pub mod datasets;
pub mod pcd;

pub use datasets::{blob_centers, generate_dataset, Dataset2D, DatasetKind, S_SCALE};
pub use pcd::{
    clamped_ula_step, desk_architecture, paper_architecture, pcd_loss_and_grad, pcd_train, run_clamped_chains,
    PcdConfig, PcdLoss, PcdReport, ReplayBuffer,
};
