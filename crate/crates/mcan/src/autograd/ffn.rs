//! Feed-forward networks: affine layers with ReLU between them.
//!
//! A single-layer [`Ffn`] is a plain affine map; deeper nets apply ReLU
//! after every layer except the last. Weights are stored `[in × out]` so a
//! batch of row vectors is applied with one matmul per layer.

use rand::Rng;

use super::{Tape, Tensor, TensorError, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub layers: Vec<Affine>,
}

/// Tape handles for one bound [`Ffn`].
#[derive(Debug, Clone)]
pub struct FfnVars {
    layers: Vec<(TensorId, TensorId)>,
}

impl Ffn {
    /// Builds a net with the given layer widths, e.g. `[8, 16, 1]` for one
    /// hidden layer. Weights uniform with fan-in scaling
    /// (`±sqrt(6 / fan_in)`), biases zero; a flat tiny range stalls SGD by
    /// shrinking gradients through every stacked layer.
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Ffn {
        assert!(dims.len() >= 2, "an Ffn needs at least one layer");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = (6.0 / fan_in as f64).sqrt();
                Affine {
                    w: uniform_tensor(rng, vec![fan_in, fan_out], scale),
                    b: Tensor::zeros(vec![fan_out]).with_grad(),
                }
            })
            .collect();
        Ffn { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().w.shape()[1]
    }

    pub fn bind(&self, tape: &Tape) -> FfnVars {
        FfnVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(&l.w), tape.leaf(&l.b)))
                .collect(),
        }
    }
}

impl FfnVars {
    pub fn from_layers(layers: Vec<(TensorId, TensorId)>) -> FfnVars {
        FfnVars { layers }
    }

    pub fn ids(&self) -> impl Iterator<Item = TensorId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Applies a bound net to a batch of row vectors on the tape.
pub fn ffn_graph(tape: &Tape, vars: &FfnVars, x: TensorId) -> Result<TensorId, TensorError> {
    let mut cur = x;
    let last = vars.layers.len() - 1;
    for (i, &(w, b)) in vars.layers.iter().enumerate() {
        cur = tape.add_row(tape.matmul(cur, w)?, b)?;
        if i != last {
            cur = tape.relu(cur)?;
        }
    }
    Ok(cur)
}

/// Convenience forward pass outside any training tape.
pub fn ffn_apply(ffn: &Ffn, x: &Tensor) -> Result<Tensor, TensorError> {
    let tape = Tape::new();
    let id = tape.leaf(x);
    let out = ffn_graph(&tape, &ffn.bind(&tape), id)?;
    Ok(tape.tensor(out))
}

/// Fresh tensor with entries uniform in `[-scale, scale]`, grad-enabled.
pub fn uniform_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, values).expect("consistent shape").with_grad()
}
