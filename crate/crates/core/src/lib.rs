//! Versioned, provenance-tracked metadata tables over archive-resident
//! sample datasets.

pub mod archive;
pub mod cache;
pub mod canonical;
pub mod catalog;
pub mod engine;
pub mod error;
pub mod export;
pub mod expr;
pub mod fixture;
pub mod pipeline;
pub mod storage;
pub mod table;

pub use error::{Error, ErrorClass, Result};
