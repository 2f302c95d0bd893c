//! Dense rank-<=3 f32 tensors. The universal numeric carrier for every block
//! in the model; gradient tracking lives in [`crate::tape`].

use crate::error::{Error, Result};

/// Shape of a tensor: one to three positive extents, row-major layout.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Self {
        assert!(
            !dims.is_empty() && dims.len() <= 3,
            "tensor rank must be 1..=3, got {}",
            dims.len()
        );
        assert!(dims.iter().all(|&d| d > 0), "extents must be positive: {dims:?}");
        Shape(dims.to_vec())
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Rows/cols view of a rank-2 shape.
    pub fn as_matrix(&self) -> Option<(usize, usize)> {
        match self.0[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// Handle of a node on a [`crate::tape::Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(pub(crate) usize);

/// Dense f32 tensor. Immutable once built; operations produce new tensors.
/// `node` links the tensor to the tape entry that produced it (None for
/// constants, which receive no gradient).
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
    pub(crate) node: Option<NodeId>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        let shape = Shape::new(dims);
        if shape.numel() != data.len() {
            return Err(Error::Contract {
                op: "Tensor::new",
                msg: format!("shape {shape} holds {} elements, got {}", shape.numel(), data.len()),
            });
        }
        Ok(Tensor { shape, data, node: None })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let shape = Shape::new(dims);
        let n = shape.numel();
        Tensor { shape, data: vec![0.0; n], node: None }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: Shape::new(&[1]), data: vec![v], node: None }
    }

    pub fn vector(v: &[f32]) -> Self {
        Tensor { shape: Shape::new(&[v.len()]), data: v.to_vec(), node: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(&[rows, cols], data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Whether gradients flow through this tensor.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor {}", self.shape);
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> f32 {
        let (_, c) = self.shape.as_matrix().expect("at2 on non-matrix");
        self.data[i * c + j]
    }

    /// Detached copy: same values, no tape link.
    pub fn detached(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: None }
    }

    pub(crate) fn with_node(shape: Shape, data: Vec<f32>, node: Option<NodeId>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data, node }
    }

    /// Debug-mode scan: forward results on finite inputs must stay finite.
    pub(crate) fn debug_check_finite(&self, op: &'static str) {
        if cfg!(debug_assertions) {
            for (i, v) in self.data.iter().enumerate() {
                assert!(v.is_finite(), "{op} produced non-finite value {v} at flat index {i}");
            }
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
