//! Truncated MIMO impulse responses.
//!
//! Coefficients are stored channel-major: the block for channel (i, j)
//! (output i, input j) holds `g(1)[i][j], ..., g(T)[i][j]`, and blocks are
//! ordered (0,0), (0,1), ..., (0,m-1), (1,0), ..., (p-1,m-1). All indices in
//! this API are zero-based, so lag `k` refers to the coefficient `g(k + 1)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse<T: Real> {
    p: usize,
    m: usize,
    t: usize,
    theta: DVector<T>,
}

impl<T: Real> ImpulseResponse<T> {
    pub fn new(p: usize, m: usize, t: usize, theta: DVector<T>) -> Result<Self> {
        if p == 0 || m == 0 || t == 0 {
            return Err(Error::Dimension(format!("p={p}, m={m}, T={t} must all be >= 1")));
        }
        if theta.len() != t * m * p {
            return Err(Error::Dimension(format!(
                "theta has length {} but T*m*p = {}",
                theta.len(),
                t * m * p
            )));
        }
        Ok(Self { p, m, t, theta })
    }

    pub fn zeros(p: usize, m: usize, t: usize) -> Self {
        Self::new(p, m, t, DVector::zeros(t * m * p)).expect("valid dimensions")
    }

    /// Builds a response from `f(lag, output, input)`.
    pub fn from_fn(p: usize, m: usize, t: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut ir = Self::zeros(p, m, t);
        for i in 0..p {
            for j in 0..m {
                for k in 0..t {
                    let idx = ir.index(k, i, j);
                    ir.theta[idx] = f(k, i, j);
                }
            }
        }
        ir
    }

    #[inline]
    pub fn outputs(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn inputs(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.t
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    /// Position of `g(lag + 1)[output][input]` in `theta`.
    #[inline]
    pub fn index(&self, lag: usize, output: usize, input: usize) -> usize {
        debug_assert!(lag < self.t && output < self.p && input < self.m);
        (output * self.m + input) * self.t + lag
    }

    #[inline]
    pub fn coeff(&self, lag: usize, output: usize, input: usize) -> T {
        self.theta[self.index(lag, output, input)]
    }

    pub fn set_coeff(&mut self, lag: usize, output: usize, input: usize, v: T) {
        let idx = self.index(lag, output, input);
        self.theta[idx] = v;
    }

    /// The p x m Markov parameter `g(lag + 1)`.
    pub fn markov(&self, lag: usize) -> DMatrix<T> {
        DMatrix::from_fn(self.p, self.m, |i, j| self.coeff(lag, i, j))
    }

    /// The T coefficients of channel (output, input).
    pub fn channel(&self, output: usize, input: usize) -> &[T] {
        let start = self.index(0, output, input);
        &self.theta.as_slice()[start..start + self.t]
    }

    pub fn theta(&self) -> &DVector<T> {
        &self.theta
    }

    pub fn into_theta(self) -> DVector<T> {
        self.theta
    }

    pub fn cast<U: Real>(&self) -> ImpulseResponse<U> {
        ImpulseResponse {
            p: self.p,
            m: self.m,
            t: self.t,
            theta: self.theta.map(|v| U::cst(v.as_f64())),
        }
    }
}

/// Serialized form used by the estimate export and the true-system files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponseRecord {
    pub p: usize,
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub theta: Vec<f64>,
}

impl<T: Real> From<&ImpulseResponse<T>> for ImpulseResponseRecord {
    fn from(ir: &ImpulseResponse<T>) -> Self {
        Self {
            p: ir.p,
            m: ir.m,
            t: ir.t,
            theta: ir.theta.iter().map(|v| v.as_f64()).collect(),
        }
    }
}

impl ImpulseResponseRecord {
    pub fn to_impulse_response<T: Real>(&self) -> Result<ImpulseResponse<T>> {
        ImpulseResponse::new(
            self.p,
            self.m,
            self.t,
            DVector::from_iterator(self.theta.len(), self.theta.iter().map(|&v| T::cst(v))),
        )
    }
}
