//! Weakly supervised attention-based multiple instance learning for
//! five-grade Nancy histological index (NHI) prediction.
//!
//! The pipeline runs slide image → tissue mask and QC'd tile grid
//! ([`preprocess`]) → frozen tile encoder and embedding store ([`embedding`])
//! → three attention-MIL task models ([`mil`], [`training`]) → voting
//! ensemble ([`ensemble`]) → evaluation ([`metrics`]).

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod domain;
pub mod embedding;
pub mod ensemble;
pub mod error;
pub mod fsutil;
pub mod heatmap;
pub mod metrics;
pub mod mil;
pub mod par;
pub mod preprocess;
pub mod synthetic;
pub mod training;

pub use domain::{group_of, ActivityGroup, EmbeddingBag, Link, NhiGrade, TaskClass, TaskKind, TaskSpec, TileRef};
pub use error::{Error, Result};
