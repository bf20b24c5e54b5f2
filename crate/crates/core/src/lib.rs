//! Teugels martingale bases, Lévy path simulation and a Picard/least-squares
//! Monte Carlo solver for fully coupled forward-backward SDEs driven by
//! Teugels martingales.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod fbsde_problem;
pub mod levy_model;
pub mod linalg;
pub mod path_engine;
pub mod quadrature;
pub mod solver;
pub mod teugels_basis;
