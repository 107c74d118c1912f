//! File formats, the HTTP service and the command-line front end for the
//! few-shot retrieval engine in `fsir-core`.

mod binio;
pub mod cli;
pub mod error;
pub mod fsem;
pub mod fsix;
pub mod manifest;
pub mod models;
pub mod runs;
pub mod service;
pub mod triplets;

pub use error::{Error, Result};
