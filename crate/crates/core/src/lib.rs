//! Cold-start cross-domain recommendation with a neural-process model.
//!
//! The crate bundles a small reverse-mode autodiff engine, ingestion of
//! `user,item,rating,timestamp` files, episodic task construction, the
//! model itself, training, evaluation and a synthetic benchmark with known
//! latent structure.
//!
//! ```no_run
//! use cdrnp::{config::RunConfig, pipeline};
//!
//! let cfg = RunConfig::default();
//! let run = pipeline::prepare(&cfg).unwrap();
//! let (model, log) = cdrnp::training::train(cfg.model, cfg.training(), &run.data, &run.split).unwrap();
//! println!("{} epochs, final rec {}", log.records.len(), log.records.last().unwrap().rec);
//! # let _ = model;
//! ```

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
