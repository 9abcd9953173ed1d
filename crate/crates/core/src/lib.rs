//! Tree-kernel-constrained differentiable graph pooling.
//!
//! Constituency trees are parsed from bracketed text ([`treebank`]), compared
//! with subtree / subset-tree / partial-tree kernels ([`kernels`]), and fed to
//! a GCN + DiffPool classifier ([`model`]) whose soft assignment matrices are
//! regularized toward kernel-valid tree fragments ([`constraints`]). Training
//! uses projected dual ascent on the constraint multipliers ([`trainer`]);
//! learned fragments are read back from the pooling layers ([`fragments`]).

pub mod constraints;
pub mod error;
pub mod experiment;
pub mod fragments;
pub mod kernels;
pub mod model;
pub mod numcore;
pub mod synth;
pub mod trainer;
pub mod treebank;
pub mod verify;

pub use constraints::{ConstraintKind, ConstraintSet, PoolingAssignment};
pub use error::{KernelError, MetricsError, ModelError, NumError, TrainError, TreebankError};
pub use kernels::{KernelConfig, KernelKind};
pub use model::{ModelConfig, PoolActivation};
pub use numcore::{Tape, Tensor, Var};
pub use trainer::{LambdaMode, TrainConfig};
pub use treebank::{ConstituencyTree, TreeGraph, Vocabulary};
