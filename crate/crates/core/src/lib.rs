//! Block-sparse attention with strided antidiagonal block scoring.
//!
//! Pipeline: [`scoring`] samples each `B×B` block of the attention map along
//! strided antidiagonals, [`selection`] turns the per-block probabilities into
//! a [`BlockMask`], and [`sparse`] runs exact attention over the selected
//! blocks only. [`attention`] holds the dense reference, [`metrics`] and
//! [`calibrate`] evaluate and tune the selection, [`workloads`] builds seeded
//! synthetic inputs.

pub mod attention;
pub mod calibrate;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod scoring;
pub mod selection;
pub mod sparse;
pub mod tensor;
pub mod workloads;

pub use attention::{full_attention, AttentionInputs};
pub use calibrate::{predict_min_thresholds, CalibrationResult, FidelityEvaluator, HeadThresholds};
pub use error::{Error, Result};
pub use metrics::{js_divergence, rank_correlation};
pub use scoring::{Pattern, SelectionConfig, Strategy, TileScoreMap};
pub use selection::{build_mask, density, find_blocks, BlockMask};
pub use sparse::{output_error, sparse_attention};
pub use tensor::{load_tensor, save_tensor, Tensor};
pub use workloads::{generate, WorkloadKind, WorkloadSpec};
