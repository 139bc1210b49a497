use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter {name:?} expects shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing parameter {0:?}")]
    MissingParam(String),
}
