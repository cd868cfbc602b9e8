//! BCR sparsity: masks, the greedy projection and ADMM pruning.

mod admm;
mod mask;
mod projection;
mod train;

pub use admm::{admm_u_step, admm_w_step, admm_z_step, AdmmSchedule, PruneState};
pub use mask::{is_feasible, sparsity_accounting, BcrMask, BlockPartition, SparsityConstraint};
pub use projection::{project_bcr, retained_energy};
pub use train::{evaluate_network, prune_network, Dataset, LayerReport, PruneReport, TrainOptions};
