//! The MultiMixture DSL for tabular data.
//!
//! A program partitions the table's columns into blocks; each block is an
//! independent finite mixture over rows whose clusters carry integer weights
//! summing to the row count.

mod moves;
mod program;
mod table;

pub use moves::{canonicalize, mixture_synthesize, model_fingerprint, MixtureConfig, MixtureSampler, MixtureState, MoveKind, ScoredBlock};
pub use program::{
    dirichlet_log_density, ln_factorial, log_sum_exp, sample_dirichlet, Block, Cluster, Dist, Hyper, MixtureError,
    MixtureProgram,
};
pub use table::{format_row, Column, ColumnType, Row, Table, TableError, TableSchema};
