//! JSON form of a fitted impulse response.

use serde::{Deserialize, Serialize};

use super::ssr::SsrState;
use crate::error::Result;
use crate::impulse::ImpulseResponse;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub k: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub nll: f64,
}

impl<T: Real> From<&SsrState<T>> for TraceEntry {
    fn from(s: &SsrState<T>) -> Self {
        Self { k: s.iteration, lambda1: s.lambda1.as_f64(), lambda2: s.lambda2.as_f64(), nll: s.nll.as_f64() }
    }
}

/// `theta` uses the channel-major layout of [`ImpulseResponse`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimator: String,
    pub p: usize,
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub theta: Vec<f64>,
    #[serde(default)]
    pub trace: Vec<TraceEntry>,
    pub sigma: Vec<f64>,
}

impl EstimateRecord {
    pub fn new<T: Real>(estimator: &str, theta: &ImpulseResponse<T>, trace: Vec<TraceEntry>, sigma: &[T]) -> Self {
        Self {
            estimator: estimator.to_string(),
            p: theta.outputs(),
            m: theta.inputs(),
            t: theta.len(),
            theta: theta.theta().iter().map(|v| v.as_f64()).collect(),
            trace,
            sigma: sigma.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn impulse_response<T: Real>(&self) -> Result<ImpulseResponse<T>> {
        ImpulseResponse::new(self.p, self.m, self.t, self.theta.iter().map(|&v| T::cst(v)).collect::<Vec<_>>().into())
    }
}
