//! Dense row-major n-dimensional arrays.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// A dense, contiguous, row-major array.
///
/// Gradient bookkeeping lives on [`crate::Tape`]; a `Tensor` is only a value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    /// A one-element tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Row-major 2-D tensor from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return dim_err("from_rows", "ragged rows");
        }
        let data = rows.iter().flat_map(|row| row.iter().map(|&v| T::lit(v))).collect();
        Self::new(vec![r, c], data)
    }

    /// Gaussian samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    /// Gaussian samples redrawn until they fall within two standard deviations.
    pub fn trunc_normal<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        })
    }

    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => dim_err("dims2", format!("expected rank 2, got shape {:?}", self.shape)),
        }
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            dim_err("item", format!("tensor of shape {:?} is not a scalar", self.shape))
        }
    }

    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of range on axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return dim_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            );
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len().max(1)).unwrap()
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| (a - b).abs())
                .fold(T::zero(), T::max),
        )
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[r * c..(r + 1) * c]
    }
}
