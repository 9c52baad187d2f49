//! Deterministic single-process simulation of eager-SPMD distributed tensors.

pub mod comm;
pub mod dispatch;
pub mod dtensor;
pub mod engine;
pub mod mesh;
pub mod placement;
pub mod plan;
pub mod report;
pub mod rng;
pub mod sweep;
pub mod train;

use comm::CommError;
use dispatch::DispatchError;
use engine::EngineError;
use mesh::MeshError;
use placement::PlacementError;
use plan::PlanError;
use rng::RngError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Rng(#[from] RngError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("unsupported transition {src} -> {dst} on mesh dim {mesh_dim}")]
    UnsupportedTransition { src: String, dst: String, mesh_dim: usize },
    #[error("tensor on mesh `{actual}` where `{expected}` was expected")]
    MeshMismatch { expected: String, actual: String },
    #[error("gradient {0} mixes reduce ops across Partial dims")]
    MixedPartialOps(usize),
}
