//! Dense row-major tensors with a tape-based reverse-mode autodiff engine.
//!
//! Networks run in `f32`. Every kernel is generic over [`Real`] so the same
//! code path can be driven in `f64` when checking gradients against finite
//! differences.

pub mod conv;
mod tape;

pub use tape::{Tape, Var};

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`].
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    /// `c = a · b + beta · c` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
    /// `trans_a` / `trans_b` read the stored operand transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], trans_a: bool, b: &[Self], trans_b: bool, beta: Self, c: &mut [Self]) {
        let lda = if trans_a { m } else { k };
        let ldb = if trans_b { k } else { n };
        Self::gemm_ld(m, k, n, a, lda, trans_a, b, ldb, trans_b, beta, c, n);
    }

    /// [`gemm`](Real::gemm) on strided row-major views: `lda`, `ldb`, `ldc`
    /// are the row strides of the stored operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm_ld(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        lda: usize,
        trans_a: bool,
        b: &[Self],
        ldb: usize,
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
        ldc: usize,
    );

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

/// `(row stride, col stride, stored rows, stored cols)` of a logical
/// `rows×cols` operand.
fn operand(rows: usize, cols: usize, ld: usize, trans: bool) -> (isize, isize, usize, usize) {
    if trans {
        (1, ld as isize, cols, rows)
    } else {
        (ld as isize, 1, rows, cols)
    }
}

fn extent_ok(len: usize, rows: usize, cols: usize, ld: usize) -> bool {
    rows == 0 || cols == 0 || (cols <= ld && len >= (rows - 1) * ld + cols)
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm_ld(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                lda: usize,
                trans_a: bool,
                b: &[Self],
                ldb: usize,
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
                ldc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa, ra, ca) = operand(m, k, lda, trans_a);
                let (rsb, csb, rb, cb) = operand(k, n, ldb, trans_b);
                assert!(
                    extent_ok(a.len(), ra, ca, lda) && extent_ok(b.len(), rb, cb, ldb) && extent_ok(c.len(), m, n, ldc),
                    "gemm operand out of bounds"
                );
                // SAFETY: every addressed element lies inside the slices, as asserted above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        ldc as isize,
                        1,
                    );
                }
            }

            fn of_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// N-dimensional array with an optional gradient buffer. The shape is
/// fixed once the tensor is built.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable values; the shape is fixed.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<T>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Errors if any element is NaN or infinite.
    pub fn validate_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "element {i} of tensor {:?} is {:?}",
                self.shape, self.data[i]
            ))),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::of_f64(v.as_f64())).collect()),
        }
    }

    /// Inner product of the flattened buffers, accumulated in `f64`.
    pub fn dot(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "dot of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }
}

/// Splits a tensor shape into `(outer, channels, inner)` around the channel
/// axis: axis 0 for `[C, ...spatial]` (rank 4) and axis 1 for batched
/// `[B, C, ...spatial]` (rank 5).
pub(crate) fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        4 => Ok((1, shape[0], shape[1..].iter().product())),
        5 => Ok((shape[0], shape[1], shape[2..].iter().product())),
        _ => Err(Error::shape(format!(
            "expected [C,X,Y,Z] or [B,C,X,Y,Z], got {shape:?}"
        ))),
    }
}
