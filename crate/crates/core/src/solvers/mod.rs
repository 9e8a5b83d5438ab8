//! Constrained least-squares engines.

mod implicit;
mod layer_peeled;
mod nmf;
mod nnls;

pub use implicit::{chain_input_jacobian, nnls_implicit_jacobian};
pub use layer_peeled::{layer_peeled_optimize, LayerPeeledResult};
pub use nmf::{nmf_admm, NmfResult};
pub use nnls::{kkt_residual, nnls_batch, nnls_solve, NnlsResult, SolverOptions};
