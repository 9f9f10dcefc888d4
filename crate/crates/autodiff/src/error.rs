use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("non-finite value produced by {op} at node {node}")]
    NonFiniteValue { op: &'static str, node: usize },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("non-finite gradient at node {node} ({op})")]
    NonFiniteGradient { op: &'static str, node: usize },

    #[error("unbound input `{0}`")]
    UnboundInput(String),

    #[error("function value is not finite: {0}")]
    NonFiniteFunction(f64),
}
