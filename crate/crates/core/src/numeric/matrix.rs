use crate::error::{shape_err, LabError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LabError::NumericalFailure(format!(
                "non-finite entry at flat index {pos}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_err(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            super::dot(self.row(i), other.row(j))
        }))
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// An `H×W×D` patch feature map. Patch `i` sits at `(i / W, i % W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(shape_err(format!("grid {height}x{width}x{dim}")));
        }
        if data.len() != height * width * dim {
            return Err(shape_err(format!(
                "{} values for a {height}x{width}x{dim} grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
            normalized: false,
        })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
            normalized: false,
        }
    }

    /// Builds a grid from a `(H·W)×D` matrix.
    pub fn from_matrix(height: usize, width: usize, m: Matrix) -> Result<Self> {
        if m.rows() != height * width {
            return Err(shape_err(format!("{} rows for a {height}x{width} grid", m.rows())));
        }
        let dim = m.cols();
        Self::new(height, width, dim, m.into_data())
    }

    /// Returns an L2-normalised copy with the `normalized` flag set.
    pub fn normalized(&self) -> Result<Self> {
        let mut out = self.clone();
        for i in 0..out.num_patches() {
            let p = out.patch_mut(i);
            let n = super::norm(p);
            if n == 0.0 || !n.is_finite() {
                return Err(LabError::DegenerateRow(i));
            }
            p.iter_mut().for_each(|v| *v /= n);
        }
        out.normalized = true;
        Ok(out)
    }

    /// Marks the grid as normalised after checking every patch norm is `1 ± 1e-9`.
    pub fn assume_normalized(mut self) -> Result<Self> {
        for i in 0..self.num_patches() {
            let n = super::norm(self.patch(i));
            if (n - 1.0).abs() > 1e-9 {
                return Err(LabError::InvariantViolation(format!("patch {i} has norm {n}")));
            }
        }
        self.normalized = true;
        Ok(self)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }
    #[inline]
    pub fn num_patches(&self) -> usize {
        self.height * self.width
    }
    #[inline]
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.normalized = false;
        &mut self.data
    }
    #[inline]
    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
    pub fn patch_mut(&mut self, i: usize) -> &mut [f64] {
        self.normalized = false;
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.patch(row * self.width + col)
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.height == other.height && self.width == other.width && self.dim == other.dim
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.num_patches(),
            cols: self.dim,
            data: self.data.clone(),
        }
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// `(H_a W_a) × (H_b W_b)` matrix of scaled cosine similarities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap(pub Matrix);

impl CorrespondenceMap {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Flattened row-major scores, one per patch pair.
    pub fn flatten(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }
}
