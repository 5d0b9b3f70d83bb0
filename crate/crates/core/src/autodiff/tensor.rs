use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major `f32` array with an optional gradient buffer.
///
/// The data buffer is shared and never mutated after construction, so
/// cloning a tensor (e.g. to register a model parameter in a fresh graph)
/// is cheap.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f32]>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::from_shared(shape.to_vec(), data.into()))
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<[f32]>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::from_shared(shape.to_vec(), vec![value; numel(shape)].into())
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_shared(Vec::new(), vec![value].into())
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let data: Vec<f32> = (0..numel(shape)).map(f).collect();
        Self::from_shared(shape.to_vec(), data.into())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn shared_data(&self) -> Arc<[f32]> {
        Arc::clone(&self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "set_grad",
                format!("gradient has {} values, tensor has {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        match *self.data {
            [v] => Ok(v),
            _ => Err(Error::NonScalarLoss(self.shape.clone())),
        }
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.to_vec()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        let mut t = Self::from_shared(shape.to_vec(), self.shared_data());
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    /// Returns a copy with `f` applied elementwise; gradient state is dropped.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        Self::from_shared(self.shape.clone(), data.into())
    }

    /// Sub-tensor `index` along the leading axis.
    pub fn select(&self, index: usize) -> Result<Tensor> {
        let (&n, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| Error::shape("select", "scalar has no leading axis"))?;
        if index >= n {
            return Err(Error::shape("select", format!("index {index} >= {n}")));
        }
        let stride = numel(rest);
        let data = self.data[index * stride..(index + 1) * stride].to_vec();
        Ok(Self::from_shared(rest.to_vec(), data.into()))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_shared(shape, data.into()))
    }

    /// Concatenates along the leading axis.
    pub fn concat(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("concat", "no tensors to concatenate"))?;
        if first.shape.is_empty() {
            return Err(Error::shape("concat", "scalars have no leading axis"));
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape.len() != first.shape.len() || t.shape[1..] != first.shape[1..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Self::from_shared(shape, data.into()))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_leading(&self, start: usize, end: usize) -> Result<Tensor> {
        let n = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("slice", "scalar has no leading axis"))?;
        if start > end || end > n {
            return Err(Error::shape("slice", format!("range {start}..{end} of {n}")));
        }
        let stride = numel(&self.shape[1..]);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        let data = self.data[start * stride..end * stride].to_vec();
        Ok(Self::from_shared(shape, data.into()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}
