//! Dense row-major matrices and the float precision abstraction.
//!
//! Everything in the model is a 2-D matrix; vectors are 1-row (or 1-column)
//! matrices. The `Scalar` trait selects the 32-bit or 64-bit float mode.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssign};

/// On-disk element type codes used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Float element type the whole model is generic over.
pub trait Scalar:
    Float + NumAssign + Copy + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Mat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "element count must match shape");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// 1-row matrix from a slice.
    pub fn row_vec(values: &[T]) -> Self {
        Mat {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// 1-column matrix from a slice.
    pub fn col_vec(values: &[T]) -> Self {
        Mat {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let crow = out.row_mut(i);
            for (k, &aik) in arow.iter().enumerate() {
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (c, &b) in crow.iter_mut().zip(brow.iter()) {
                    *c += aik * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dims");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                let brow = other.row(j);
                let mut acc = T::zero();
                for (&a, &b) in arow.iter().zip(brow.iter()) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dims");
        let mut out = Mat::zeros(self.cols, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let brow = other.row(i);
            for (k, &aik) in arow.iter().enumerate() {
                let orow = &mut out.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += aik * b;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shapes");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    /// Cast every element through f64 into another precision.
    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Exact equality, compared on the raw bit patterns.
    pub fn bits_eq(&self, other: &Mat<T>) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * std::mem::size_of::<T>());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Mat<T> {
        let w = std::mem::size_of::<T>();
        assert_eq!(bytes.len(), rows * cols * w, "byte length must match shape");
        let data = bytes.chunks_exact(w).map(T::read_le).collect();
        Mat { rows, cols, data }
    }
}

impl<T: Scalar> Debug for Mat<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mat[{}x{}]", self.rows, self.cols)
    }
}
