//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shape plus a flat row-major value buffer. Image-like
//! data is laid out N x C x H x W. Tensors produced by [`tape::Tape`]
//! operations carry a node id into the tape so gradients can flow back to
//! them; plain tensors are constants.

pub mod adam;
pub mod conv;
pub mod kernels;
pub mod tape;

use std::fmt;
use std::rc::Rc;

pub use adam::{AdamHyper, ParamTensor};
pub use tape::{GradMap, NodeId, Tape};

/// Errors from tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum EngineError {
    /// Incompatible operand shapes; the message names both.
    ShapeMismatch { op: &'static str, detail: String },
    /// An operation produced NaN or Inf from finite inputs.
    NonFinite { op: &'static str },
    /// A scalar was required (for example a backward root).
    NotScalar { op: &'static str, shape: Vec<usize> },
    /// A structurally invalid argument (stride 0, empty shape, bad slope...).
    InvalidArg { op: &'static str, detail: String },
}

impl fmt::Display for EngineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EngineError::ShapeMismatch { op, detail } => {
                write!(f, "{op}: shape mismatch: {detail}")
            }
            EngineError::NonFinite { op } => {
                write!(f, "{op}: produced a non-finite value")
            }
            EngineError::NotScalar { op, shape } => {
                write!(f, "{op}: expected a scalar, got shape {shape:?}")
            }
            EngineError::InvalidArg { op, detail } => {
                write!(f, "{op}: invalid argument: {detail}")
            }
        }
    }
}

impl std::error::Error for EngineError {}

pub type EngineResult<T> = Result<T, EngineError>;

/// Dense N-dimensional f64 array, optionally attached to a tape node.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    /// Build a constant tensor; `data.len()` must equal the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> EngineResult<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(EngineError::ShapeMismatch {
                op: "tensor_new",
                detail: format!("shape {shape:?} needs {expect} values, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Rc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Rc::new(vec![0.0; n]),
            node: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Rc::new(vec![value; n]),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Rc::new(vec![value]),
            node: None,
        }
    }

    /// Same shape as `like`, every element `value`.
    pub fn full_like(like: &Tensor, value: f64) -> Self {
        Tensor::full(like.shape.to_vec(), value)
    }

    pub(crate) fn tracked(shape: Vec<usize>, data: Rc<Vec<f64>>, node: NodeId) -> Self {
        Tensor {
            shape,
            data,
            node: Some(node),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    /// A constant copy: same values, no tape linkage. Gradient flow stops here.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn ensure_finite(op: &'static str, values: &[f64]) -> EngineResult<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EngineError::NonFinite { op })
    }
}
