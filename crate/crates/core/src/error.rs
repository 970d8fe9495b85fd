use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Shape;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: Shape,
        found: Shape,
    },
    #[error("concat_channels: part {index} has shape {found}, expected (n, h, w) of {expected}")]
    ConcatMismatch {
        index: usize,
        expected: Shape,
        found: Shape,
    },
    #[error("{op}: expected {expected} channels, found {found}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("data length {found} does not match shape {shape}")]
    DataLength { shape: Shape, found: usize },
    #[error("offset field has {found} channels, expected {expected}")]
    OffsetChannels { expected: usize, found: usize },
    #[error("reduction ratio {ratio} does not divide {channels} channels")]
    RatioMismatch { channels: usize, ratio: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} input frames, found {found}")]
    FrameCount { expected: usize, found: usize },
    #[error("parameter set mismatch: missing {missing:?}, extra {extra:?}")]
    ParamMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("parameter {name}: expected dims {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("crop {crop_h}x{crop_w} larger than frame {frame_h}x{frame_w}")]
    CropTooLarge {
        crop_h: usize,
        crop_w: usize,
        frame_h: usize,
        frame_w: usize,
    },
    #[error("sequence has {len} frames, need at least {needed}")]
    SequenceTooShort { len: usize, needed: usize },
    #[error("frame {index} is {found_h}x{found_w}, expected {h}x{w}")]
    FrameSize {
        index: usize,
        h: usize,
        w: usize,
        found_h: usize,
        found_w: usize,
    },
    #[error("malformed batch: {0}")]
    MalformedBatch(String),
    #[error("empty dataset")]
    EmptyDataset,
}
