//! File formats, synthetic corpora and report emission.
//!
//! Binary formats are little-endian with a 4-byte magic and a 1-byte version:
//! `RSPL` for a decomposed layer ([`layer_file`]) and `RSPW` for toy-model
//! weights ([`model_file`]). Recipes, score matrices and run manifests are JSON;
//! tabular reports are CSV.

pub mod binary;
pub mod corpus;
pub mod layer_file;
pub mod model_file;
pub mod report;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use corpus::{generate_corpus, CorpusRule, SyntheticCorpus};
pub use report::{format_sig9, Cell, ReportTable};

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}
