use serde::{Deserialize, Serialize};

use crate::error::{CrlError, Result};

/// Row-major dense array of `f64` tagged with its shape.
///
/// Most of the toolkit only needs vectors and matrices; higher ranks are
/// allowed but only the element-wise helpers understand them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) && !data.is_empty() {
            return Err(CrlError::shape("DenseTensor::new", &shape, &[data.len()]));
        }
        if expected != data.len() {
            return Err(CrlError::shape("DenseTensor::new", &shape, &[data.len()]));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CrlError::Divergence {
                tensor: format!("DenseTensor::new element {i}"),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(CrlError::shape("DenseTensor::from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Trailing dimension; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(CrlError::shape(op, &self.shape, &[0, 0]));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `self [m×k] · other [k×n]`.
    ///
    /// Every output element is accumulated over `k` in index order, so a row
    /// of the result never depends on which other rows are in the batch.
    pub fn matmul(&self, other: &DenseTensor) -> Result<DenseTensor> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(CrlError::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            let o = &mut out[i * n..(i + 1) * n];
            for (p, &av) in a.iter().enumerate() {
                let b = &other.data[p * n..(p + 1) * n];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        Ok(DenseTensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ [k×m]ᵀ · other [k×n]` → `[m×n]` without materializing the transpose.
    pub fn t_matmul(&self, other: &DenseTensor) -> Result<DenseTensor> {
        let (k, m) = self.require_matrix("t_matmul")?;
        let (k2, n) = other.require_matrix("t_matmul")?;
        if k != k2 {
            return Err(CrlError::shape("t_matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a = &self.data[p * m..(p + 1) * m];
            let b = &other.data[p * n..(p + 1) * n];
            for (i, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let o = &mut out[i * n..(i + 1) * n];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        Ok(DenseTensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self [m×k] · otherᵀ`, with `other [n×k]` → `[m×n]`.
    pub fn matmul_t(&self, other: &DenseTensor) -> Result<DenseTensor> {
        let (m, k) = self.require_matrix("matmul_t")?;
        let (n, k2) = other.require_matrix("matmul_t")?;
        if k != k2 {
            return Err(CrlError::shape("matmul_t", &self.shape, &other.shape));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                out.push(a.iter().zip(b).map(|(x, y)| x * y).sum());
            }
        }
        Ok(DenseTensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<DenseTensor> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(DenseTensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row_vector(&mut self, v: &DenseTensor) -> Result<()> {
        let (_, n) = self.require_matrix("add_row_vector")?;
        if v.len() != n {
            return Err(CrlError::shape("add_row_vector", &self.shape, &v.shape));
        }
        for row in self.data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(&v.data) {
                *x += b;
            }
        }
        Ok(())
    }

    pub fn sum_rows(&self) -> Result<DenseTensor> {
        let (_, n) = self.require_matrix("sum_rows")?;
        let mut out = vec![0.0; n];
        for row in self.data.chunks(n.max(1)) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        Ok(DenseTensor {
            shape: vec![n],
            data: out,
        })
    }

    pub fn add_assign(&mut self, other: &DenseTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(CrlError::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseTensor {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Columns `[start, end)` of a matrix as a new matrix.
    pub fn column_slice(&self, start: usize, end: usize) -> Result<DenseTensor> {
        let (m, n) = self.require_matrix("column_slice")?;
        if start > end || end > n {
            return Err(CrlError::shape("column_slice", &self.shape, &[start, end]));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for row in self.data.chunks(n.max(1)).take(m) {
            out.extend_from_slice(&row[start..end]);
        }
        Ok(DenseTensor {
            shape: vec![m, w],
            data: out,
        })
    }

    /// Selects rows by index, preserving order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<DenseTensor> {
        let (m, n) = self.require_matrix("select_rows")?;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(CrlError::Index {
                    what: "rows",
                    index: i,
                    bound: m,
                });
            }
            out.extend_from_slice(self.row(i));
        }
        Ok(DenseTensor {
            shape: vec![idx.len(), n],
            data: out,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with the given label if any element is NaN or infinite.
    pub fn check_finite(&self, label: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(CrlError::Divergence {
                tensor: label.to_string(),
            })
        }
    }
}

/// Pairwise Euclidean distances between rows of `a [m×d]` and `b [k×d]`.
pub fn l2_distance_matrix(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(CrlError::shape("l2_distance_matrix", a.shape(), b.shape()));
    }
    let (m, k) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * k);
    for i in 0..m {
        let ra = a.row(i);
        for j in 0..k {
            out.push(euclidean(ra, b.row(j)));
        }
    }
    DenseTensor::matrix(m, k, out)
}

/// Direct difference form, so identical rows give exactly zero and the
/// matrix is exactly symmetric.
pub fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseTensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseTensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn rejects_bad_shape_and_nan() {
        assert!(DenseTensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(DenseTensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = DenseTensor::zeros(&[2, 3]);
        let b = DenseTensor::zeros(&[4, 2]);
        match a.matmul(&b) {
            Err(CrlError::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![4, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(4, 5, &mut rng);
        let b = random(4, 3, &mut rng);
        let c = random(6, 5, &mut rng);
        let at = a.transpose().unwrap();
        assert_eq!(a.t_matmul(&b).unwrap(), at.matmul(&b).unwrap());
        let ct = c.transpose().unwrap();
        let lhs = a.matmul_t(&c).unwrap();
        let rhs = a.matmul(&ct).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn distance_examples() {
        let a = DenseTensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(l2_distance_matrix(&a, &a).unwrap().data(), &[0.0]);
        let p = DenseTensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let q = DenseTensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(l2_distance_matrix(&p, &q).unwrap().data(), &[5.0]);
        let r = DenseTensor::zeros(&[1, 3]);
        assert!(matches!(
            l2_distance_matrix(&p, &r),
            Err(CrlError::Shape { .. })
        ));
    }

    #[test]
    fn distance_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(5, 16, &mut rng);
        let b = random(7, 16, &mut rng);
        let d = l2_distance_matrix(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                let mut s = 0.0;
                for c in 0..16 {
                    s += (a.get(i, c) - b.get(j, c)).powi(2);
                }
                assert!((d.get(i, j) - s.sqrt()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn self_distance_symmetric_zero_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(9, 6, &mut rng);
        let d = l2_distance_matrix(&a, &a).unwrap();
        for i in 0..9 {
            assert_eq!(d.get(i, i), 0.0);
            for j in 0..9 {
                assert!((d.get(i, j) - d.get(j, i)).abs() <= 1e-12);
            }
        }
    }
}
