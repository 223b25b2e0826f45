//! Core of a hierarchical transformer for heterogeneous tabular time series.
//!
//! A time series is a sequence of table rows, each row belonging to one of
//! several row types with its own list of categorical, numerical and
//! timestamp fields. The model embeds each field, runs a Field Transformer
//! over the fields of one row, projects the row to a fixed width through a
//! row-type specific matrix, and runs a Sequence Transformer over the rows.
//! It is pretrained with a masked-token objective in which numerical values
//! are predicted as quantized bins with neighborhood label smoothing, and
//! fine-tuned through a `[CLS]` token.
//!
//! The crate is `no_std` and only needs an allocator. File formats, the
//! command-line driver and anything touching the filesystem live in the
//! companion `unittab` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod embedding;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod schema;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Gradients, ParamId, ParamStore, Tape, Tensor, Var};
