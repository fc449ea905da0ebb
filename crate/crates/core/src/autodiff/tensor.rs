use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape { op: "tensor", shapes: vec![shape, vec![data.len()]] });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: vec![1, 1], data: vec![value] }
    }

    /// 1×n row vector.
    pub fn row(values: &[S]) -> Self {
        Tensor { shape: vec![1, values.len()], data: values.to_vec() }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// View as a matrix: rank 0 → 1×1, rank 1 → 1×n, rank 2 as is.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [] => Ok((1, 1)),
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape("dims2", &[s])),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|d| d.1).unwrap_or(0)
    }

    pub fn row_slice(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> Result<S> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NonScalarLoss(self.shape.clone()))
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape { op: "reshape", shapes: vec![self.shape, shape] });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: S) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Plain matrix product, outside any tape.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", &[&self.shape, &other.shape]));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nn(m, k, n, &self.data, &other.data, &mut out.data, false);
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Tensor<S>> {
        let (r, c) = self.dims2()?;
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], data)
    }
}

/// `c (+)= a·b`, `a: m×k`, `b: k×n`.
pub(crate) fn gemm_nn<S: Real>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S], acc: bool) {
    let beta = if acc { S::one() } else { S::zero() };
    S::gemm(m, k, n, S::one(), a, (k as isize, 1), b, (n as isize, 1), beta, c, (n as isize, 1));
}

/// `c (+)= a·bᵀ`, `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt<S: Real>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S], acc: bool) {
    let beta = if acc { S::one() } else { S::zero() };
    S::gemm(m, k, n, S::one(), a, (k as isize, 1), b, (1, k as isize), beta, c, (n as isize, 1));
}

/// `c (+)= aᵀ·b`, `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn<S: Real>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S], acc: bool) {
    let beta = if acc { S::one() } else { S::zero() };
    S::gemm(m, k, n, S::one(), a, (1, m as isize), b, (n as isize, 1), beta, c, (n as isize, 1));
}
