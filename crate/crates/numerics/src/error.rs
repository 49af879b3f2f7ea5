use std::fmt;

pub type Result<T> = std::result::Result<T, TensorError>;

/// Errors emitted by tensor construction, operators, and the tape.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Two operands have shapes the operation cannot combine.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A shape or axis argument is invalid for the given operand.
    Dimension { op: &'static str, detail: String },
    /// An axis index is out of range for the operand's rank.
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    /// The reduction or attention input has no valid entries to work with.
    DegenerateInput { op: &'static str, detail: String },
    /// A NaN or infinity reached an operation that requires finite input.
    NonFinite { op: &'static str, detail: String },
    /// The API was called in a way its contract forbids.
    Usage { detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch: lhs={lhs:?}, rhs={rhs:?}")
            }
            Self::Dimension { op, detail } => write!(f, "{op}: {detail}"),
            Self::InvalidAxis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            Self::DegenerateInput { op, detail } => write!(f, "{op}: degenerate input: {detail}"),
            Self::NonFinite { op, detail } => write!(f, "{op}: non-finite value: {detail}"),
            Self::Usage { detail } => write!(f, "usage error: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}
