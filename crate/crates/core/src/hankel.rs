//! Block Hankel matrices of an impulse response, the selection map that
//! vectorizes them, and the optional whitening weights.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::impulse::ImpulseResponse;
use crate::linalg;
use crate::scalar::Real;

/// Block-row count `r` and block-column count `c`, with `r + c - 1 = T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HankelShape {
    pub r: usize,
    pub c: usize,
}

impl HankelShape {
    pub fn lags(&self) -> usize {
        self.r + self.c - 1
    }
}

/// Picks `(r, c)` with `r + c - 1 = T` that makes the `p r x m c` Hankel
/// matrix as square as possible. Ties go to the larger `r`.
pub fn choose_hankel_shape(t: usize, p: usize, m: usize) -> Result<HankelShape> {
    if t < 2 {
        return Err(Error::Parameter(format!("Hankel shape needs T >= 2, got {t}")));
    }
    let mut best = HankelShape { r: 1, c: t };
    let mut best_gap = usize::MAX;
    for r in 1..t {
        let c = t + 1 - r;
        let gap = (p * r).abs_diff(m * c);
        if gap <= best_gap {
            best_gap = gap;
            best = HankelShape { r, c };
        }
    }
    Ok(best)
}

/// Block (a, b) of the result is `g(a + b + 1)` (zero-based block indices).
pub fn build_hankel<T: Real>(ir: &ImpulseResponse<T>, shape: HankelShape) -> Result<DMatrix<T>> {
    check_shape(ir.len(), shape)?;
    let (p, m) = (ir.outputs(), ir.inputs());
    Ok(DMatrix::from_fn(p * shape.r, m * shape.c, |row, col| {
        ir.coeff(row / p + col / m, row % p, col % m)
    }))
}

fn check_shape(t: usize, shape: HankelShape) -> Result<()> {
    if shape.r == 0 || shape.c == 0 || shape.lags() != t {
        return Err(Error::Dimension(format!(
            "Hankel shape r={}, c={} inconsistent with T={t}",
            shape.r, shape.c
        )));
    }
    Ok(())
}

/// Sparse 0/1 map with `P theta = vec(H(theta)^T)`: row `q` of `P` selects
/// `theta[source[q]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VectorizationMap {
    source: Vec<usize>,
    columns: usize,
}

pub fn build_vectorization_map(t: usize, p: usize, m: usize, shape: HankelShape) -> Result<VectorizationMap> {
    check_shape(t, shape)?;
    let (rows_h, cols_h) = (p * shape.r, m * shape.c);
    let mut source = Vec::with_capacity(rows_h * cols_h);
    // vec(H^T) walks the rows of H.
    for row in 0..rows_h {
        let (a, i) = (row / p, row % p);
        for col in 0..cols_h {
            let (b, j) = (col / m, col % m);
            source.push((i * m + j) * t + a + b);
        }
    }
    Ok(VectorizationMap { source, columns: t * m * p })
}

impl VectorizationMap {
    pub fn rows(&self) -> usize {
        self.source.len()
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn source(&self) -> &[usize] {
        &self.source
    }

    pub fn apply<T: Real>(&self, theta: &DVector<T>) -> DVector<T> {
        DVector::from_iterator(self.source.len(), self.source.iter().map(|&s| theta[s]))
    }

    /// How many times each coefficient appears in the Hankel matrix.
    pub fn column_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.columns];
        for &s in &self.source {
            counts[s] += 1;
        }
        counts
    }

    pub fn dense<T: Real>(&self) -> DMatrix<T> {
        let mut out = DMatrix::zeros(self.rows(), self.columns);
        for (q, &s) in self.source.iter().enumerate() {
            out[(q, s)] = T::one();
        }
        out
    }
}

/// Hankel geometry plus the weights of `W2^T H W1^T`.
#[derive(Debug, Clone)]
pub struct HankelSpec<T: Real> {
    pub lags: usize,
    pub outputs: usize,
    pub inputs: usize,
    pub shape: HankelShape,
    pub map: VectorizationMap,
    /// (c m) x (c m), acts on the right as `W1^T`.
    pub w1: DMatrix<T>,
    /// (r p) x (r p), acts on the left as `W2^T`.
    pub w2: DMatrix<T>,
}

impl<T: Real> HankelSpec<T> {
    /// Unweighted Hankel matrix (`W1 = I`, `W2 = I`) of the squarest shape.
    pub fn identity(t: usize, p: usize, m: usize) -> Result<Self> {
        let shape = choose_hankel_shape(t, p, m)?;
        Self::with_weights(t, p, m, shape, DMatrix::identity(m * shape.c, m * shape.c), DMatrix::identity(p * shape.r, p * shape.r))
    }

    /// Weighted variant with data-driven whitening weights.
    pub fn weighted(d: &Dataset<T>, t: usize) -> Result<Self> {
        let shape = choose_hankel_shape(t, d.outputs(), d.inputs())?;
        let (w1, w2) = surrogate_weights(d, shape)?;
        Self::with_weights(t, d.outputs(), d.inputs(), shape, w1, w2)
    }

    pub fn with_weights(t: usize, p: usize, m: usize, shape: HankelShape, w1: DMatrix<T>, w2: DMatrix<T>) -> Result<Self> {
        let map = build_vectorization_map(t, p, m, shape)?;
        if w1.shape() != (m * shape.c, m * shape.c) || w2.shape() != (p * shape.r, p * shape.r) {
            return Err(Error::Dimension(format!(
                "weights {:?}/{:?} do not fit a {}x{} Hankel matrix",
                w1.shape(),
                w2.shape(),
                p * shape.r,
                m * shape.c
            )));
        }
        Ok(Self { lags: t, outputs: p, inputs: m, shape, map, w1, w2 })
    }

    /// Rows of the (weighted) Hankel matrix, `r p`.
    pub fn hankel_rows(&self) -> usize {
        self.outputs * self.shape.r
    }

    pub fn hankel_cols(&self) -> usize {
        self.inputs * self.shape.c
    }

    pub fn hankel(&self, ir: &ImpulseResponse<T>) -> Result<DMatrix<T>> {
        self.check(ir)?;
        build_hankel(ir, self.shape)
    }

    /// `W2^T H(theta) W1^T`.
    pub fn weighted_hankel(&self, ir: &ImpulseResponse<T>) -> Result<DMatrix<T>> {
        let h = self.hankel(ir)?;
        Ok(self.w2.tr_mul(&h) * self.w1.transpose())
    }

    fn check(&self, ir: &ImpulseResponse<T>) -> Result<()> {
        if ir.len() != self.lags || ir.outputs() != self.outputs || ir.inputs() != self.inputs {
            return Err(Error::Dimension(format!(
                "impulse response (p={}, m={}, T={}) does not match Hankel spec (p={}, m={}, T={})",
                ir.outputs(),
                ir.inputs(),
                ir.len(),
                self.outputs,
                self.inputs,
                self.lags
            )));
        }
        Ok(())
    }
}

/// Whitening weights from sample covariances of stacked future outputs
/// `f(t) = [y(t); ...; y(t+r-1)]` and past inputs `q(t) = [u(t-1); ...; u(t-c)]`.
///
/// With `R_f = L_f L_f^T` and `R_q = L_q L_q^T`, the weighted Hankel matrix is
/// `L_f^{-1} H L_q`, so `W2 = L_f^{-T}` and `W1 = L_q^T`. For an
/// output-error system `R_f >= H R_q H^T`, which keeps every singular value
/// of the weighted matrix in `[0, 1]` (an estimate of the canonical
/// correlations between past inputs and future outputs).
pub fn surrogate_weights<T: Real>(d: &Dataset<T>, shape: HankelShape) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let (n, p, m) = (d.samples(), d.outputs(), d.inputs());
    let (r, c) = (shape.r, shape.c);
    if n < r * p + c * m || n < r + c {
        return Err(Error::DegenerateExcitation(format!(
            "{n} samples cannot support a {}x{} weighted Hankel matrix",
            r * p,
            c * m
        )));
    }
    let first = c;
    let last = n - r; // inclusive, zero-based
    let future = DMatrix::from_fn(r * p, last - first + 1, |row, s| d.y()[(first + s + row / p, row % p)]);
    let past = DMatrix::from_fn(c * m, last - first + 1, |row, s| d.u()[(first + s - 1 - row / m, row % m)]);

    let l_f = regularized_factor(&future, "future outputs")?;
    let l_q = regularized_factor(&past, "past inputs")?;
    let w2 = linalg::invert_lower(&l_f)?.transpose();
    let w1 = l_q.transpose();
    Ok((w1, w2))
}

fn regularized_factor<T: Real>(samples: &DMatrix<T>, what: &str) -> Result<DMatrix<T>> {
    let (dim, count) = samples.shape();
    let mean = samples.column_mean();
    let centered = DMatrix::from_fn(dim, count, |i, s| samples[(i, s)] - mean[i]);
    let mut cov = (&centered * centered.transpose()) / T::from_count(count);
    linalg::symmetrize(&mut cov);
    let jitter = T::cst(1e-8) * cov.trace() / T::from_count(dim);
    if !(jitter > T::zero()) {
        return Err(Error::DegenerateExcitation(format!("{what} have zero sample variance")));
    }
    for i in 0..dim {
        cov[(i, i)] += jitter;
    }
    let l = linalg::lower_factor(&cov, || format!("covariance of {what}"))
        .map_err(|_| Error::DegenerateExcitation(format!("covariance of {what} is not positive definite")))?;
    if (0..dim).any(|i| !(l[(i, i)] > T::zero())) {
        return Err(Error::DegenerateExcitation(format!("covariance of {what} is singular")));
    }
    Ok(l)
}
