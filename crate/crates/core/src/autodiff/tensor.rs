use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array of reals with an optional gradient buffer.
///
/// A scalar has shape `[]`. Vectors are `[k]`, matrices `[rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: Vec<T>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Option<Vec<T>> {
        &mut self.grad
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.values.len() {
                return Err(Error::Shape {
                    op: "set_grad",
                    left: self.shape.clone(),
                    right: vec![g.len()],
                });
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Option<T> {
        self.is_scalar().then(|| self.values[0])
    }

    /// `(rows, cols)` view: vectors are a single row.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [] => Some((1, 1)),
            [c] => Some((1, *c)),
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, c) = self.dims2().expect("row access needs a rank <= 2 tensor");
        &self.values[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Converts every element to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect()),
        }
    }
}
