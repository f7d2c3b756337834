use thiserror::Error;

pub type Result<T, E = AutogradError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("shape {shape:?} does not hold {len} elements")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("ragged rows")]
    Ragged,
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("non-finite value produced by forward op `{op}` (node {node})")]
    NonFiniteForward { op: &'static str, node: usize },
    #[error("non-finite gradient produced by backward of `{op}` (node {node})")]
    NonFiniteGradient { op: &'static str, node: usize },
    #[error("softmax row {row} has every entry masked")]
    FullyMaskedRow { row: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("stochastic op `{0}` is not allowed during a gradient check")]
    StochasticInCheck(&'static str),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

impl AutogradError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Self::Invalid {
            op,
            msg: msg.into(),
        }
    }
}
