//! Meta-learning a shared low-dimensional subspace of a reproducing kernel
//! Hilbert space from many small regression tasks, then regressing a new task
//! inside that subspace.
//!
//! Pipeline: [`regression::fit_split`] per source task, [`pretrain::pretrain`]
//! for the subspace, [`inference::fit_target`] for the target. Numerical
//! routines are generic over [`Scalar`] (`f32` or `f64`); the synthetic worlds
//! and rate formulas work in `f64`.

pub mod error;
pub mod inference;
pub mod kernels;
pub mod numerics;
pub mod pretrain;
pub mod rates;
pub mod regression;
pub mod scalar;
pub mod synthetic;

pub use error::{Error, Result};
pub use inference::{default_lambda_star, embed, fit_target, predict_target, LambdaStar, TargetModel};
pub use kernels::{KernelFamily, KernelSpec, MaternNu, Regularity};
pub use pretrain::{pretrain, SubspaceModel, TaskData};
pub use regression::{fit_krr, fit_split, rkhs_inner, SplitTaskFit, TaskRegressor};
pub use scalar::Scalar;
pub use synthetic::{generate_world, InputDist, SyntheticWorld, TaskId, WorldConfig};

pub type KernelSpecF32 = KernelSpec<f32>;
pub type KernelSpecF64 = KernelSpec<f64>;
pub type TaskRegressorF32 = TaskRegressor<f32>;
pub type TaskRegressorF64 = TaskRegressor<f64>;
pub type SubspaceModelF32 = SubspaceModel<f32>;
pub type SubspaceModelF64 = SubspaceModel<f64>;
pub type TargetModelF32 = TargetModel<f32>;
pub type TargetModelF64 = TargetModel<f64>;
