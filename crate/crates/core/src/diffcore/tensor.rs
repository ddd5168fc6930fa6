use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

/// Dense row-major array with an explicit shape.
///
/// A shape of `[]` denotes a scalar. Matrix kernels expect rank 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                context: "tensor construction".into(),
                expected: format!("{expected} elements for shape {shape:?}"),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::ZERO)
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.dim2().0
    }

    pub fn cols(&self) -> usize {
        self.dim2().1
    }

    /// `(rows, cols)` of a rank-2 tensor. Panics on other ranks.
    pub fn dim2(&self) -> (usize, usize) {
        assert_eq!(
            self.shape.len(),
            2,
            "expected a matrix, got shape {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1])
    }

    pub fn get2(&self, r: usize, c: usize) -> F {
        self.data[r * self.shape[1] + c]
    }

    /// The single element of a scalar-sized tensor.
    pub fn item(&self) -> F {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = self.dim2();
        let mut out = vec![F::ZERO; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            for (j, &v) in row.iter().enumerate() {
                out[j * m + i] = v;
            }
        }
        Self {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let (m, k) = self.dim2();
        let (k2, n) = other.dim2();
        assert_eq!(
            k, k2,
            "matmul inner dimensions {:?} x {:?}",
            self.shape, other.shape
        );
        let mut out = vec![F::ZERO; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == F::ZERO {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self {
            shape: vec![m, n],
            data: out,
        }
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Self {
        let (k, m) = self.dim2();
        let (k2, n) = other.dim2();
        assert_eq!(
            k, k2,
            "t_matmul inner dimensions {:?} x {:?}",
            self.shape, other.shape
        );
        let mut out = vec![F::ZERO; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == F::ZERO {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self {
            shape: vec![m, n],
            data: out,
        }
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Self) -> Self {
        let (m, k) = self.dim2();
        let (n, k2) = other.dim2();
        assert_eq!(
            k, k2,
            "matmul_t inner dimensions {:?} x {:?}",
            self.shape, other.shape
        );
        let mut out = vec![F::ZERO; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = F::ZERO;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out[i * n + j] = acc;
            }
        }
        Self {
            shape: vec![m, n],
            data: out,
        }
    }

    /// Column sums of an `m×n` matrix as a `1×n` row.
    pub fn sum_rows(&self) -> Self {
        let (m, n) = self.dim2();
        let mut out = vec![F::ZERO; n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        Self {
            shape: vec![1, n],
            data: out,
        }
    }

    /// Repeats a `1×n` row `m` times.
    pub fn broadcast_rows(&self, m: usize) -> Self {
        let (r, n) = self.dim2();
        assert_eq!(
            r, 1,
            "broadcast_rows expects a single row, got {:?}",
            self.shape
        );
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(&self.data);
        }
        Self {
            shape: vec![m, n],
            data,
        }
    }

    /// Squared Frobenius norm.
    pub fn frobenius_sq(&self) -> F {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Subtracts the per-column mean.
    pub fn center_columns(&self) -> Self {
        let (m, _) = self.dim2();
        let mean = self.sum_rows().map(|v| v / F::from_f64(m as f64));
        let mut out = self.clone();
        for row in out.data.chunks_mut(mean.data.len()) {
            for (v, &mu) in row.iter_mut().zip(&mean.data) {
                *v -= mu;
            }
        }
        out
    }
}

/// Geometry of a square-kernel 2-D convolution over an NHWC activation
/// matrix with `n·h·w` rows and `c` columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn in_shape(&self) -> [usize; 2] {
        [self.n * self.h * self.w, self.c]
    }

    pub fn col_shape(&self) -> [usize; 2] {
        [
            self.n * self.out_h() * self.out_w(),
            self.kernel * self.kernel * self.c,
        ]
    }

    /// Calls `f(col_row, col_offset, input_row)` for every in-bounds patch
    /// element; the column block for a patch element spans `c` entries.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for b in 0..self.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let col_row = (b * oh + oy) * ow + ox;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let in_row = (b * self.h + iy as usize) * self.w + ix as usize;
                            f(col_row, (ky * self.kernel + kx) * self.c, in_row);
                        }
                    }
                }
            }
        }
    }
}

/// Patch extraction; column index is `(ky·k + kx)·c + channel`.
pub fn im2col<F: Scalar>(input: &Tensor<F>, geom: &ConvGeom) -> Tensor<F> {
    assert_eq!(input.shape(), geom.in_shape(), "im2col input shape");
    let [rows, cols] = geom.col_shape();
    let c = geom.c;
    let mut out = vec![F::ZERO; rows * cols];
    let src = input.data();
    geom.for_each_tap(|col_row, off, in_row| {
        let dst = &mut out[col_row * cols + off..col_row * cols + off + c];
        dst.copy_from_slice(&src[in_row * c..(in_row + 1) * c]);
    });
    Tensor {
        shape: vec![rows, cols],
        data: out,
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back to pixels.
pub fn col2im<F: Scalar>(cols_t: &Tensor<F>, geom: &ConvGeom) -> Tensor<F> {
    let [rows, cols] = geom.col_shape();
    assert_eq!(cols_t.shape(), [rows, cols], "col2im input shape");
    let [in_rows, c] = geom.in_shape();
    let mut out = vec![F::ZERO; in_rows * c];
    let src = cols_t.data();
    geom.for_each_tap(|col_row, off, in_row| {
        let s = &src[col_row * cols + off..col_row * cols + off + c];
        for (o, &v) in out[in_row * c..(in_row + 1) * c].iter_mut().zip(s) {
            *o += v;
        }
    });
    Tensor {
        shape: vec![in_rows, c],
        data: out,
    }
}
