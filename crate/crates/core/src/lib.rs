//! Bayesian synthesis of probabilistic programs.
//!
//! Programs in a domain-specific language are tagged s-expressions drawn from
//! a prior (a tagged probabilistic grammar, or a custom prior for the mixture
//! DSL) and scored by a likelihood on observed data. Markov chain Monte Carlo
//! over program text produces ensembles of programs that are then queried for
//! structure, used for forecasting, simulation and density estimation, or
//! translated to Venture source.

pub mod cli;
pub mod gp;
pub mod grammar;
pub mod mixture;
pub mod queries;
pub mod sexpr;
pub mod synthesis;
pub mod translate;

pub use grammar::{Grammar, NonterminalId, TerminalDist};
pub use sexpr::{parse, Address, Atom, Expr};
