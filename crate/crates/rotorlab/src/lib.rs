//! Desk-scale quadcopter rate-control laboratory.
//!
//! The crate simulates the rotational dynamics of a small quad-X airframe,
//! trains a neural rate controller on it with clipped-surrogate policy
//! optimization, tunes a classical PID baseline on the same plant, and
//! compiles trained policies down to a dependency-free inference artifact
//! suitable for a flight-controller build.
//!
//! Everything is driven from one binary (`rotorlab`) whose subcommands cover
//! the pipeline end to end: `train`, `tune-pid`, `export`, `replay`,
//! `compare`, `bench`, `config`.

pub mod codegen;
pub mod config;
pub mod control;
pub mod dynamics;
pub mod env;
pub mod eval;
pub mod manifest;
pub mod policy;
pub mod trainer;
