use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

/// Frequency count of the sinusoidal positional encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingConfig {
    pub frequencies: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self { frequencies: 6 }
    }
}

impl EncodingConfig {
    pub fn new(frequencies: usize) -> Self {
        assert!(frequencies >= 1, "positional encoding needs at least one frequency");
        Self { frequencies }
    }

    pub fn dim(&self) -> usize {
        3 + 6 * self.frequencies
    }

    /// Write `(p, sin(2^0 p), cos(2^0 p), ..., sin(2^(L-1) p), cos(2^(L-1) p))` into `out`.
    pub fn encode_into(&self, p: Vec3, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        let p = p.to_array();
        out[..3].copy_from_slice(&p);
        let mut scale = 1.0;
        for k in 0..self.frequencies {
            let base = 3 + 6 * k;
            for axis in 0..3 {
                let (s, c) = (scale * p[axis]).sin_cos();
                out[base + axis] = s;
                out[base + 3 + axis] = c;
            }
            scale *= 2.0;
        }
    }

    pub fn encode(&self, p: Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.encode_into(p, &mut out);
        out
    }

    /// Pull the feature adjoint `dfeat` back to the point.
    pub fn backward(&self, p: Vec3, dfeat: &[f64]) -> Vec3 {
        let p = p.to_array();
        let mut dp = [dfeat[0], dfeat[1], dfeat[2]];
        let mut scale = 1.0;
        for k in 0..self.frequencies {
            let base = 3 + 6 * k;
            for axis in 0..3 {
                let (s, c) = (scale * p[axis]).sin_cos();
                dp[axis] += scale * (c * dfeat[base + axis] - s * dfeat[base + 3 + axis]);
            }
            scale *= 2.0;
        }
        dp.into()
    }
}
