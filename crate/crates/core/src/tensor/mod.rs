//! Dense tensors, parameters and a tape-based reverse-mode autodiff engine.
//!
//! Values are stored in row-major order. Image tensors use the NCHW layout;
//! convolution kernels use `(k, k, c_in, c_out)`. The engine is generic over
//! the element type so the same code runs in `f32` for training and in `f64`
//! for finite-difference gradient checks.

mod kernels;
mod tape;

use std::collections::BTreeMap;
use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use tape::{stable_sigmoid, BatchStats, Gradients, NormMode, Tape, Var, BN_EPS};

/// Floating-point element type of the engine.
pub trait Real:
    Float + FromPrimitive + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static
{
    /// `c = a * b + beta * c` with arbitrary strides.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are
    /// `(row_stride, col_stride)`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * strides.0 + (cols - 1) as isize * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense n-dimensional value with an optional gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::of(v.f64())).collect()),
            requires_grad: self.requires_grad,
        }
    }

    /// Selects entries along one axis, keeping the given indices in order.
    pub fn select(&self, axis: usize, indices: &[usize]) -> Tensor<T> {
        let outer: usize = self.shape[..axis].iter().product();
        let dim = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * dim + i) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: self.requires_grad,
        }
    }
}

/// A named trainable tensor (or a non-trainable buffer such as BN running
/// statistics when `requires_grad` is false).
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Ordered collection of parameters addressable by index or name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    tag: u8,
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    /// `tag` distinguishes stores whose parameters share one tape.
    pub fn new(tag: u8) -> Self {
        Self {
            tag,
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn tag(&self) -> u8 {
        self.tag
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        let name = name.into();
        let idx = self.params.len();
        self.by_name.insert(name.clone(), idx);
        self.params.push(Parameter { name, tensor });
        idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter<T> {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds the tape gradients of every leaf bound to this store.
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Gradients<T>) {
        for (key, grad) in tape.param_grads(grads) {
            if key.0 != self.tag {
                continue;
            }
            let tensor = &mut self.params[key.1].tensor;
            if !tensor.requires_grad {
                continue;
            }
            let dst = tensor
                .grad
                .get_or_insert_with(|| vec![T::zero(); grad.len()]);
            for (d, g) in dst.iter_mut().zip(grad) {
                *d = *d + *g;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tag: self.tag,
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
