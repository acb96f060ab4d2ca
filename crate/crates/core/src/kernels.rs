//! Stable-spline kernels and the block-diagonal MIMO prior covariance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelOrder {
    /// `K(i, j) = alpha^max(i, j)`
    First,
    /// `K(i, j) = alpha^(i + j + max(i, j)) / 2 - alpha^(3 max(i, j)) / 6`
    Second,
}

impl KernelOrder {
    pub fn from_number(order: u8) -> Result<Self> {
        match order {
            1 => Ok(Self::First),
            2 => Ok(Self::Second),
            o => Err(Error::Parameter(format!("kernel order must be 1 or 2, got {o}"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Self::First => 1,
            Self::Second => 2,
        }
    }
}

fn check_alpha<T: Real>(alpha: T) -> Result<()> {
    if alpha > T::zero() && alpha < T::one() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("stable-spline decay alpha={alpha} must lie in (0, 1)")))
    }
}

/// T x T stable-spline Gram matrix on lags `1..=T`.
pub fn stable_spline_gram<T: Real>(order: KernelOrder, alpha: T, lags: usize) -> Result<DMatrix<T>> {
    check_alpha(alpha)?;
    let pow = |e: usize| alpha.powi(e as i32);
    let two = T::cst(2.0);
    let six = T::cst(6.0);
    Ok(DMatrix::from_fn(lags, lags, |a, b| {
        let (i, j) = (a + 1, b + 1);
        let mx = i.max(j);
        match order {
            KernelOrder::First => pow(mx),
            KernelOrder::Second => pow(i + j + mx) / two - pow(3 * mx) / six,
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelKernel<T> {
    pub alpha: T,
    pub scale: T,
}

/// Per-channel stable-spline priors for a p x m system.
///
/// `channels[i * m + j]` regularizes the block of output i and input j,
/// matching the layout of [`crate::ImpulseResponse`].
#[derive(Debug, Clone, PartialEq)]
pub struct KernelModel<T: Real> {
    pub order: KernelOrder,
    pub lags: usize,
    pub outputs: usize,
    pub inputs: usize,
    pub channels: Vec<ChannelKernel<T>>,
}

impl<T: Real> KernelModel<T> {
    pub fn new(order: KernelOrder, lags: usize, outputs: usize, inputs: usize, channels: Vec<ChannelKernel<T>>) -> Result<Self> {
        if channels.len() != outputs * inputs {
            return Err(Error::Dimension(format!(
                "{} channel kernels for a {outputs}x{inputs} system",
                channels.len()
            )));
        }
        for ch in &channels {
            check_alpha(ch.alpha)?;
            if !(ch.scale > T::zero()) {
                return Err(Error::Parameter(format!("kernel scale {} must be positive", ch.scale)));
            }
        }
        Ok(Self { order, lags, outputs, inputs, channels })
    }

    /// Same `(alpha, scale)` on every channel.
    pub fn uniform(order: KernelOrder, lags: usize, outputs: usize, inputs: usize, alpha: T, scale: T) -> Result<Self> {
        Self::new(order, lags, outputs, inputs, vec![ChannelKernel { alpha, scale }; outputs * inputs])
    }

    pub fn channel(&self, output: usize, input: usize) -> ChannelKernel<T> {
        self.channels[output * self.inputs + input]
    }

    /// `scale * Gram(alpha)` for one channel, without jitter.
    pub fn channel_gram(&self, output: usize, input: usize) -> Result<DMatrix<T>> {
        let ch = self.channel(output, input);
        Ok(stable_spline_gram(self.order, ch.alpha, self.lags)? * ch.scale)
    }

    /// Block-diagonal prior covariance plus `1e-10 * trace / dim` jitter.
    pub fn assemble_prior(&self) -> Result<DMatrix<T>> {
        let mut blocks = Vec::with_capacity(self.channels.len());
        for i in 0..self.outputs {
            for j in 0..self.inputs {
                blocks.push(self.channel_gram(i, j)?);
            }
        }
        let mut k = linalg::block_diag(&blocks);
        add_relative_jitter(&mut k, T::cst(1e-10));
        Ok(k)
    }
}

pub(crate) fn add_relative_jitter<T: Real>(k: &mut DMatrix<T>, rel: T) {
    let n = k.nrows();
    if n == 0 {
        return;
    }
    let jitter = rel * k.trace() / T::from_count(n);
    for i in 0..n {
        k[(i, i)] += jitter;
    }
}
