use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of bounds: {0}")]
    OutOfBounds(String),

    #[error("loss node {id} is not scalar (shape {shape:?})")]
    NonScalarLoss { id: usize, shape: Vec<usize> },

    #[error("node {0} does not exist on this tape")]
    UnknownNode(usize),

    #[error("retained state `{0}` is missing; it was released or never recorded")]
    MissingState(&'static str),

    #[error("latency budget {budget} is below the skeleton cost {skeleton_cost}")]
    Infeasible { budget: f64, skeleton_cost: f64 },

    #[error("mutation impossible: every slot has a single candidate")]
    MutationImpossible,

    #[error("invalid genome string: {0}")]
    ParseGenome(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}
