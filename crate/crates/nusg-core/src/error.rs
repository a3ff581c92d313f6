//! Error type shared by all core modules.

use alloc::string::String;

/// Errors produced by tensor ops, model assembly and training math.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes are incompatible; the message names both shapes.
    ShapeMismatch { op: &'static str, detail: String },
    /// An argument is out of its valid range.
    InvalidArg { op: &'static str, detail: String },
    /// A NaN or infinity was produced while finite checks were enabled.
    NonFinite { op: &'static str, index: usize },
    /// A gradient contained NaN/Inf; names the offending parameter.
    NonFiniteGrad { param: String },
    /// `backward` was called on a non-scalar value.
    NotScalar { op: &'static str, len: usize },
    /// Unknown architecture id; the message lists the valid ones.
    UnknownArch { name: String },
    /// Parameter-store bookkeeping failure (duplicate or missing name).
    Param { detail: String },
}

impl core::fmt::Display for CoreError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            CoreError::InvalidArg { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            CoreError::NonFinite { op, index } => {
                write!(f, "{op}: non-finite value at flat index {index}")
            }
            CoreError::NonFiniteGrad { param } => {
                write!(f, "non-finite gradient for parameter '{param}'; step aborted")
            }
            CoreError::NotScalar { op, len } => {
                write!(f, "{op}: expected a scalar (1 element), got {len} elements")
            }
            CoreError::UnknownArch { name } => write!(
                f,
                "unknown arch '{name}'; valid ids: u2net, res-u2net, u2net-lite, res-u2net-lite"
            ),
            CoreError::Param { detail } => write!(f, "parameter store: {detail}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}
