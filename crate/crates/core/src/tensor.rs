//! Dense NCHW activation tensors.

use crate::error::{Error, Result};

/// A dense `batch × channels × height × width` array of `f64` in row-major
/// (NCHW) order.
///
/// Vectors and matrices are carried as `(n, c, 1, 1)` tensors, so a single
/// type flows through every layer of the stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Shape {
                op: "tensor",
                dim: "element count",
                expected: len,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Builds a tensor by evaluating `f(b, c, y, x)` at every position.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let [n, c, h, w] = shape;
        let mut i = 0;
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[i] = f(b, ch, y, x);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    /// Row vectors `(rows.len(), width, 1, 1)`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.len() != width {
                return Err(Error::Shape {
                    op: "from_rows",
                    dim: "row width",
                    expected: width,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new([rows.len(), width, 1, 1], data)
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Elements per batch item.
    #[inline]
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.offset(b, c, y, x);
        self.data[i] = v;
    }

    /// The `(h, w)` plane of channel `c` in item `b`.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let start = self.offset(b, c, 0, 0);
        &self.data[start..start + self.plane_len()]
    }

    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.item_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Same data, new shape with the same element count.
    pub fn reshape(mut self, shape: [usize; 4]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                dim: "element count",
                expected: self.data.len(),
                got: len,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// `self += other` (same shape required).
    pub fn add_assign(&mut self, other: &Tensor4) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Tensor4) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of an `(n, c, 1, 1)` matrix view.
    pub fn row(&self, i: usize) -> &[f64] {
        self.item(i)
    }
}

/// `c = alpha * a · b + beta * c` on raw strided buffers.
///
/// `a` is `m × k`, `b` is `k × n`, `c` is `m × n` row-major; strides allow
/// transposed views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k > 0 {
        let max_a = (m as isize - 1) * rsa + (k as isize - 1) * csa;
        let max_b = (k as isize - 1) * rsb + (n as isize - 1) * csb;
        assert!((max_a as usize) < a.len() && (max_b as usize) < b.len(), "gemm bounds");
    }
    // SAFETY: bounds of every strided access were checked above and `c`
    // holds a dense m × n row-major block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(Tensor4::new([1, 0, 1, 1], vec![]).is_err());
        assert!(Tensor4::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor4::from_fn([2, 3, 4, 5], |b, c, y, x| (b * 1000 + c * 100 + y * 10 + x) as f64);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.plane(1, 2)[3 * 5 + 4], 1234.0);
    }

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, (3, 1), &b, (2, 1), 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // a^T (3x2) via strides on the same buffer interpreted as 2x3
        let mut d = [0.0; 9];
        gemm(3, 2, 3, 1.0, &a, (1, 3), &a, (3, 1), 0.0, &mut d);
        assert_eq!(d[0], 1.0 * 1.0 + 4.0 * 4.0);
    }
}
