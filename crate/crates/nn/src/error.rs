use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{op}: shape mismatch {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("tensor of shape {shape:?} cannot hold {len} elements")]
    ElementCount { shape: Vec<usize>, len: usize },

    #[error("{op}: index {index} out of range for {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("backward called on non-scalar node of shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

impl NnError {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        let shapes = shapes.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" vs ");
        NnError::Shape { op, shapes }
    }
}
