//! Tuple-compatibility learning for conditional outfit recommendation.
//!
//! An outfit is a set of fashion items from pairwise-distinct fine
//! categories. This crate models the joint probability of an outfit as a
//! chain of next-tuple predictions, where a tuple pairs an item with a
//! category at either fine or coarse granularity. The model (MCAN, a mixed
//! category attention net) attends over the tuples already chosen, mixes the
//! attended item representation with a category embedding, and scores
//! candidate items of a requested category.
//!
//! The crate is self-contained: a tape-based `f64` autodiff engine
//! ([`autograd`]), a line-oriented dataset format ([`data`]), a synthetic
//! generator with exact brute-force oracles ([`syngen`]), the model itself
//! ([`model`]), training losses with three-level negative sampling
//! ([`objectives`]), a deterministic SGD trainer ([`trainer`]), evaluation
//! harnesses for fill-in-the-blank and compatibility AUC ([`evaluator`]),
//! and conditional outfit completion ([`recommender`]).

pub mod autograd;
pub mod data;
pub mod evaluator;
pub mod model;
pub mod objectives;
pub mod recommender;
pub mod seeding;
pub mod syngen;
pub mod textfmt;
pub mod trainer;
