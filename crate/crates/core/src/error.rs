use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A precondition of an operation was violated by the caller.
    Contract(String),
    /// Bad user-supplied data (token ids, file contents, configs).
    Input(String),
    /// Numerical failure, e.g. a Cholesky factorization that did not succeed.
    Numeric(String),
    /// Training produced a non-finite loss.
    Diverged { step: usize, loss: f64 },
    /// Wraps an error with the index of the transformer layer it occurred in.
    Layer { layer: usize, source: alloc::boxed::Box<Error> },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn at_layer(self, layer: usize) -> Self {
        Error::Layer {
            layer,
            source: alloc::boxed::Box::new(self),
        }
    }

    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "dimension",
            Error::Contract(_) => "contract",
            Error::Input(_) => "input",
            Error::Numeric(_) => "numeric",
            Error::Diverged { .. } => "diverged",
            Error::Layer { source, .. } => source.kind(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::Contract(msg) => write!(f, "contract violated: {msg}"),
            Error::Input(msg) => write!(f, "invalid input: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            Error::Diverged { step, loss } => {
                write!(f, "training diverged at step {step} (loss {loss})")
            }
            Error::Layer { layer, source } => write!(f, "layer {layer}: {source}"),
        }
    }
}

impl core::error::Error for Error {}
