//! Input-output records, output stacking and the FIR regressor.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::impulse::ImpulseResponse;
use crate::scalar::Real;

/// N samples of an m-input, p-output system. Row t holds sample t + 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Real> {
    u: DMatrix<T>,
    y: DMatrix<T>,
}

impl<T: Real> Dataset<T> {
    pub fn new(u: DMatrix<T>, y: DMatrix<T>) -> Result<Self> {
        if u.nrows() != y.nrows() {
            return Err(Error::Dimension(format!(
                "u has {} rows but y has {}",
                u.nrows(),
                y.nrows()
            )));
        }
        if u.nrows() == 0 || u.ncols() == 0 || y.ncols() == 0 {
            return Err(Error::Dimension("dataset needs N, m, p >= 1".into()));
        }
        Ok(Self { u, y })
    }

    #[inline]
    pub fn samples(&self) -> usize {
        self.u.nrows()
    }

    #[inline]
    pub fn inputs(&self) -> usize {
        self.u.ncols()
    }

    #[inline]
    pub fn outputs(&self) -> usize {
        self.y.ncols()
    }

    pub fn u(&self) -> &DMatrix<T> {
        &self.u
    }

    pub fn y(&self) -> &DMatrix<T> {
        &self.y
    }

    /// Keeps samples `range` (zero-based rows).
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.samples() {
            return Err(Error::Dimension(format!("bad sample range {range:?}")));
        }
        let len = range.end - range.start;
        Self::new(
            self.u.rows(range.start, len).into_owned(),
            self.y.rows(range.start, len).into_owned(),
        )
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            u: self.u.map(|v| U::cst(v.as_f64())),
            y: self.y.map(|v| U::cst(v.as_f64())),
        }
    }

    /// Writes `t,u1..um,y1..yp`, one row per sample.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.inputs()).map(|j| format!("u{j}")));
        header.extend((1..=self.outputs()).map(|i| format!("y{i}")));
        wr.write_record(&header)?;
        for t in 0..self.samples() {
            let mut rec = vec![(t + 1).to_string()];
            rec.extend(self.u.row(t).iter().map(|v| v.as_f64().to_string()));
            rec.extend(self.y.row(t).iter().map(|v| v.as_f64().to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let cols: Vec<&str> = header.iter().map(str::trim).collect();
        if cols.first() != Some(&"t") {
            return Err(Error::Format("first column must be `t`".into()));
        }
        let m = cols.iter().filter(|c| c.starts_with('u')).count();
        let p = cols.iter().filter(|c| c.starts_with('y')).count();
        let expected: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=m).map(|j| format!("u{j}")))
            .chain((1..=p).map(|i| format!("y{i}")))
            .collect();
        if cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Format(format!(
                "header must be `{}`, got `{}`",
                expected.join(","),
                cols.join(",")
            )));
        }
        let mut u = Vec::new();
        let mut y = Vec::new();
        let mut last_t = f64::NEG_INFINITY;
        for (row, rec) in rd.records().enumerate() {
            let rec = rec?;
            if rec.len() != 1 + m + p {
                return Err(Error::Format(format!("row {} has {} fields", row + 1, rec.len())));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("row {}: `{s}`: {e}", row + 1)))
            };
            let t = parse(&rec[0])?;
            if t <= last_t {
                return Err(Error::Format(format!("row {}: time not ascending", row + 1)));
            }
            last_t = t;
            for j in 0..m {
                u.push(T::cst(parse(&rec[1 + j])?));
            }
            for i in 0..p {
                y.push(T::cst(parse(&rec[1 + m + i])?));
            }
        }
        let n = u.len() / m.max(1);
        if n == 0 {
            return Err(Error::Format("dataset has no rows".into()));
        }
        Self::new(DMatrix::from_row_slice(n, m, &u), DMatrix::from_row_slice(n, p, &y))
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Stacks outputs channel-major, time-inner: `[y_1(1..N) | ... | y_p(1..N)]`.
pub fn stack_outputs<T: Real>(d: &Dataset<T>) -> DVector<T> {
    let (n, p) = (d.samples(), d.outputs());
    DVector::from_fn(n * p, |q, _| d.y[(q % n, q / n)])
}

/// FIR regressor. The full matrix is `blockdiag(phi, ..., phi)` with p copies;
/// only `phi` (N x T*m) is stored.
#[derive(Debug, Clone)]
pub struct Regressor<T: Real> {
    phi: DMatrix<T>,
    outputs: usize,
    lags: usize,
}

/// `phi[t, j*T + k] = u_j(t - k - 1)` (zero-based rows), with inputs before
/// the first sample taken as zero.
pub fn build_regressor<T: Real>(d: &Dataset<T>, lags: usize) -> Regressor<T> {
    let (n, m) = (d.samples(), d.inputs());
    let mut phi = DMatrix::zeros(n, lags * m);
    for j in 0..m {
        for k in 0..lags {
            for t in (k + 1)..n {
                phi[(t, j * lags + k)] = d.u[(t - k - 1, j)];
            }
        }
    }
    Regressor { phi, outputs: d.outputs(), lags }
}

impl<T: Real> Regressor<T> {
    /// The single-output block `phi`.
    pub fn phi(&self) -> &DMatrix<T> {
        &self.phi
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn lags(&self) -> usize {
        self.lags
    }

    /// Parameters per output channel (T*m).
    pub fn block_width(&self) -> usize {
        self.phi.ncols()
    }

    /// The full block-diagonal matrix (N*p x T*m*p).
    pub fn dense(&self) -> DMatrix<T> {
        let (n, w) = self.phi.shape();
        let mut out = DMatrix::zeros(n * self.outputs, w * self.outputs);
        for i in 0..self.outputs {
            out.view_mut((i * n, i * w), (n, w)).copy_from(&self.phi);
        }
        out
    }

    /// Stacked one-step predictions for `ir`.
    pub fn predict(&self, ir: &ImpulseResponse<T>) -> DVector<T> {
        self.apply(ir.theta())
    }

    pub fn apply(&self, theta: &DVector<T>) -> DVector<T> {
        let (n, w) = self.phi.shape();
        let mut out = DVector::zeros(n * self.outputs);
        for i in 0..self.outputs {
            let block = &self.phi * theta.rows(i * w, w);
            out.rows_mut(i * n, n).copy_from(&block);
        }
        out
    }

    /// `phi^T phi`; the full Gram matrix is p copies of it on the diagonal.
    pub fn gram(&self) -> DMatrix<T> {
        self.phi.tr_mul(&self.phi)
    }

    /// `Phi^T v` for a stacked vector `v` of length N*p.
    pub fn transpose_apply(&self, v: &DVector<T>) -> DVector<T> {
        let (n, w) = self.phi.shape();
        let mut out = DVector::zeros(w * self.outputs);
        for i in 0..self.outputs {
            let block = self.phi.tr_mul(&v.rows(i * n, n).into_owned());
            out.rows_mut(i * w, w).copy_from(&block);
        }
        out
    }
}
