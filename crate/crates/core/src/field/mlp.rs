use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fully connected ReLU network with a single sigmoid output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    /// Number of hidden ReLU layers.
    pub depth: usize,
    /// Channels per hidden layer.
    pub width: usize,
}

impl MlpShape {
    /// `(fan_in, fan_out)` of every layer, the sigmoid output layer last.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth + 1);
        let mut fan_in = self.input;
        for _ in 0..self.depth {
            dims.push((fan_in, self.width));
            fan_in = self.width;
        }
        dims.push((fan_in, 1));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Network parameters in one flat buffer: per layer, a row-major `fan_in x fan_out`
/// weight block followed by `fan_out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub shape: MlpShape,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Span {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

impl MlpParams {
    pub fn zeros(shape: MlpShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.param_count()],
        }
    }

    /// Kaiming-uniform hidden layers; the output layer starts at zero so the
    /// initial field is exactly 0.5 everywhere.
    pub fn init(shape: MlpShape, rng: &mut impl Rng) -> Self {
        let mut params = Self::zeros(shape);
        let spans = params.spans();
        for span in &spans[..spans.len() - 1] {
            let bound = (6.0 / span.fan_in as f64).sqrt();
            let bias_bound = 1.0 / (span.fan_in as f64).sqrt();
            for w in &mut params.data[span.weights..span.bias] {
                *w = rng.random_range(-bound..bound);
            }
            for b in &mut params.data[span.bias..span.bias + span.fan_out] {
                *b = rng.random_range(-bias_bound..bias_bound);
            }
        }
        params
    }

    pub fn from_data(shape: MlpShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.param_count() {
            return Err(Error::ShapeMismatch {
                expected: shape.param_count(),
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn spans(&self) -> Vec<Span> {
        let mut offset = 0;
        self.shape
            .layers()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let span = Span {
                    fan_in,
                    fan_out,
                    weights: offset,
                    bias: offset + fan_in * fan_out,
                };
                offset = span.bias + fan_out;
                span
            })
            .collect()
    }

    /// Index range of the weights and biases of layer `k` inside [`data`](Self::data).
    pub fn layer_ranges(&self, k: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let s = self.spans()[k];
        (s.weights..s.bias, s.bias..s.bias + s.fan_out)
    }

    fn weights(&self, s: &Span) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((s.fan_in, s.fan_out), &self.data[s.weights..s.bias]).expect("layout")
    }

    fn bias(&self, s: &Span) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[s.bias..s.bias + s.fan_out])
    }

    /// Sigmoid outputs for a batch of encoded inputs (`n x input`).
    pub fn forward(&self, input: Array2<f64>) -> Vec<f64> {
        self.forward_recorded(input).output
    }

    /// Forward pass keeping every activation for [`backward`](Self::backward).
    pub fn forward_recorded(&self, input: Array2<f64>) -> Activations {
        let spans = self.spans();
        let mut acts = Vec::with_capacity(spans.len());
        acts.push(input);
        for (k, span) in spans.iter().enumerate() {
            let prev = acts.last().expect("input");
            let mut z = Array2::zeros((prev.nrows(), span.fan_out));
            z += &self.bias(span);
            general_mat_mul(1.0, prev, &self.weights(span), 1.0, &mut z);
            if k + 1 < spans.len() {
                z.mapv_inplace(|v| v.max(0.0));
                acts.push(z);
            } else {
                let output = z.column(0).iter().map(|&v| sigmoid(v)).collect();
                return Activations { layers: acts, output };
            }
        }
        unreachable!("network has an output layer")
    }

    /// Accumulate parameter gradients into `grad` and return the input adjoint (`n x input`).
    pub fn backward(&self, acts: &Activations, d_output: &[f64], grad: &mut [f64]) -> Result<Array2<f64>> {
        let n = acts.output.len();
        if d_output.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                actual: d_output.len(),
            });
        }
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: self.data.len(),
                actual: grad.len(),
            });
        }
        let spans = self.spans();
        let mut dz = Array2::from_shape_fn((n, 1), |(i, _)| {
            let f = acts.output[i];
            d_output[i] * f * (1.0 - f)
        });
        for (k, span) in spans.iter().enumerate().rev() {
            let prev = &acts.layers[k];
            {
                let (w_part, b_part) = grad[span.weights..span.bias + span.fan_out].split_at_mut(span.fan_in * span.fan_out);
                let mut gw = ArrayViewMut2::from_shape((span.fan_in, span.fan_out), w_part).expect("layout");
                general_mat_mul(1.0, &prev.t(), &dz, 1.0, &mut gw);
                let mut gb = ArrayViewMut1::from(b_part);
                gb += &dz.sum_axis(Axis(0));
            }
            let mut da = Array2::zeros((n, span.fan_in));
            general_mat_mul(1.0, &dz, &self.weights(span).t(), 0.0, &mut da);
            if k > 0 {
                // ReLU gate: the stored activation is positive exactly where the unit was active.
                da.zip_mut_with(prev, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            dz = da;
        }
        Ok(dz)
    }
}

/// Recorded forward values of one batch.
#[derive(Debug, Clone)]
pub struct Activations {
    /// `layers[0]` is the encoded input; `layers[k]` the output of hidden layer `k`.
    pub layers: Vec<Array2<f64>>,
    pub output: Vec<f64>,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
