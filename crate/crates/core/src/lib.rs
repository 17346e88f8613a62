//! Rank-aware activation sparsity for linear layers.
//!
//! A linear layer `y = W x` is split into a sparse path over the
//! largest-magnitude input channels and a low-rank path for the rest:
//!
//! ```text
//! y ≈ W[:, kept] x[kept] + A_r B_r (x - sparse(x))
//! ```
//!
//! with `A_r B_r` built from singular components chosen by their contribution
//! on calibration inputs. Per-layer keep fractions and ranks are found by an
//! evolutionary search under an I/O budget.
//!
//! Modules, bottom-up:
//! - [`linalg`]: dense matrices, Jacobi SVD, top-k selection.
//! - [`sparsity`]: magnitude thresholding and the multi-phase activation analysis.
//! - [`scores`]: per-(component, channel) importance scores.
//! - [`layer`]: the decomposed layer, its gather kernel and I/O accounting.
//! - [`model`]: a toy decoder hosting decomposed layers, plus its trainer.
//! - [`search`]: recipes and the evolutionary search.
//! - [`io`]: binary and JSON formats, synthetic corpora, CSV reports.

pub mod error;
pub mod io;
pub mod layer;
pub mod linalg;
pub mod model;
pub mod scores;
pub mod search;
pub mod sparsity;

pub use error::{Error, Result};
pub use layer::{DecomposedLayer, SparsityPlan};
pub use linalg::Matrix;
pub use model::{DecomposedModel, ModelConfig, ModelProfile, ToyModel};
pub use scores::ScoreMatrix;
pub use search::{Recipe, SearchConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
