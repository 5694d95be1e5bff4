//! Variable-image cases: records, manifest ingestion, preprocessing,
//! grouping by image combination, and a planted-lesion generator.

mod grid;
mod groups;
mod imageio;
mod manifest;
mod preprocess;
mod records;
mod synthetic;

pub use grid::Grid;
pub use groups::{case_group_of, group_batches, mixed_batches, CaseGroup, SideLayout};
pub use imageio::{read_gray, write_gray16, write_gray8};
pub use manifest::{load_manifest, write_manifest, MANIFEST_HEADER};
pub use preprocess::{foreground_bbox, preprocess_image, preprocess_record, Preprocessed, FOREGROUND_FLOOR};
pub use records::{CaseRecord, ImageRecord, Label, LesionKind, Rect, RoiBox, Side, View};
pub use synthetic::{generate_synthetic, stratified_split, CaseShape, SyntheticConfig, SyntheticSplits};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseDataError {
    #[error("unknown {what} token `{token}`")]
    Token { what: &'static str, token: String },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("case {case_id} has two {side}-{view} images")]
    DuplicateImage {
        case_id: String,
        side: Side,
        view: View,
    },
    #[error("{0}")]
    Invariant(String),
    #[error("no foreground")]
    NoForeground,
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("image {path}: {msg}")]
    Image { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
