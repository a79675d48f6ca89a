//! The neural occupancy field: positional encoding followed by a ReLU MLP with a
//! sigmoid output, plus the optimizer and checkpoint format that go with it.

mod adam;
mod checkpoint;
mod encoding;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use encoding::EncodingConfig;
pub use mlp::{sigmoid, Activations, MlpParams, MlpShape};

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::Vec3;

/// Points per forward chunk when no gradients are needed.
const EVAL_CHUNK: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub encoding: EncodingConfig,
    pub depth: usize,
    pub width: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            encoding: EncodingConfig::default(),
            depth: 8,
            width: 256,
        }
    }
}

impl FieldConfig {
    pub fn shape(&self) -> MlpShape {
        MlpShape {
            input: self.encoding.dim(),
            depth: self.depth,
            width: self.width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyField {
    pub encoding: EncodingConfig,
    pub params: MlpParams,
}

/// Recorded forward pass over a batch of points.
#[derive(Debug, Clone)]
pub struct GradTape {
    points: Vec<Vec3>,
    acts: Activations,
}

impl GradTape {
    pub fn values(&self) -> &[f64] {
        &self.acts.output
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }
}

/// Gradients of a scalar with respect to the network parameters and the input points.
#[derive(Debug, Clone)]
pub struct FieldGradients {
    pub params: Vec<f64>,
    pub points: Vec<Vec3>,
}

impl OccupancyField {
    pub fn new(config: FieldConfig, rng: &mut impl Rng) -> Self {
        Self {
            encoding: config.encoding,
            params: MlpParams::init(config.shape(), rng),
        }
    }

    pub fn config(&self) -> FieldConfig {
        FieldConfig {
            encoding: self.encoding,
            depth: self.params.shape.depth,
            width: self.params.shape.width,
        }
    }

    fn encode(&self, points: &[Vec3]) -> Array2<f64> {
        let dim = self.encoding.dim();
        let mut x = Array2::zeros((points.len(), dim));
        for (row, &p) in x.outer_iter_mut().zip(points) {
            let mut row = row;
            self.encoding
                .encode_into(p, row.as_slice_mut().expect("contiguous row"));
        }
        x
    }

    /// Set the output bias so that, before any training, the field is `value` everywhere.
    pub fn set_uniform_output(&mut self, value: f64) {
        assert!(value > 0.0 && value < 1.0, "uniform output must lie in (0, 1)");
        let last = self.params.shape.depth;
        let (weights, bias) = self.params.layer_ranges(last);
        self.params.data[weights].fill(0.0);
        self.params.data[bias].fill((value / (1.0 - value)).ln());
    }

    pub fn occupancy(&self, p: Vec3) -> f64 {
        self.params.forward(self.encode(&[p]))[0]
    }

    /// Occupancy at many points; chunks run in parallel and are reassembled in order.
    pub fn occupancy_batch(&self, points: &[Vec3]) -> Vec<f64> {
        points
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| self.params.forward(self.encode(chunk)))
            .collect::<Vec<_>>()
            .concat()
    }

    pub fn forward(&self, points: &[Vec3]) -> GradTape {
        GradTape {
            points: points.to_vec(),
            acts: self.params.forward_recorded(self.encode(points)),
        }
    }

    /// Pull the adjoint of the recorded outputs back to parameters and points.
    pub fn backward(&self, tape: &GradTape, d_values: &[f64]) -> Result<FieldGradients> {
        let mut params = vec![0.0; self.params.len()];
        let dx = self.params.backward(&tape.acts, d_values, &mut params)?;
        let points = tape
            .points
            .iter()
            .zip(dx.outer_iter())
            .map(|(&p, row)| self.encoding.backward(p, row.as_slice().expect("contiguous row")))
            .collect();
        Ok(FieldGradients { params, points })
    }
}

/// Anything that can report occupancy at a batch of points.
pub trait Occupancy: Sync {
    fn occupancy_at(&self, points: &[Vec3]) -> Vec<f64>;
}

impl Occupancy for OccupancyField {
    fn occupancy_at(&self, points: &[Vec3]) -> Vec<f64> {
        self.occupancy_batch(points)
    }
}

/// A closed-form occupancy function, for oracles and tests.
pub struct Analytic<F>(pub F);

impl<F: Fn(Vec3) -> f64 + Sync> Occupancy for Analytic<F> {
    fn occupancy_at(&self, points: &[Vec3]) -> Vec<f64> {
        points.par_iter().map(|&p| (self.0)(p)).collect()
    }
}
