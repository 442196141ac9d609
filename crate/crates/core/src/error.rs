use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("class id {id} out of range for {num_classes} classes")]
    ClassOutOfRange { id: u8, num_classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("image {image}: {dimension} {size} is smaller than crop {crop}")]
    TooSmall {
        image: String,
        dimension: &'static str,
        size: usize,
        crop: usize,
    },

    #[error("unknown image id in split list: {0}")]
    UnknownImageId(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("corrupt raster {}: {reason}", .path.display())]
    CorruptRaster { path: PathBuf, reason: String },

    #[error("label {id} is {label_h}x{label_w} but image is {image_h}x{image_w}")]
    LabelMismatch {
        id: String,
        image_h: usize,
        image_w: usize,
        label_h: usize,
        label_w: usize,
    },

    #[error("sample index {index} out of range ({len} entries)")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("manifest is unlabeled: {0}")]
    Unlabeled(String),

    #[error("could not place shapes after {attempts} attempts (density {density})")]
    Placement { attempts: usize, density: f64 },

    #[error("crop window does not fit image after {attempts} attempts")]
    CropAttempts { attempts: usize },

    #[error("parameter sets differ; only in teacher: {only_teacher:?}, only in student: {only_student:?}")]
    ParameterMismatch {
        only_teacher: Vec<String>,
        only_student: Vec<String>,
    },

    #[error("zero-norm vector has no direction")]
    ZeroVector,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error at {location}: {reason}")]
    Parse { location: String, reason: String },

    #[error("io error at {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
