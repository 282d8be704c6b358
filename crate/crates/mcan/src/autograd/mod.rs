//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is a Wengert tape: [`Tape`] records every primitive executed
//! during the forward pass and replays the records backwards to accumulate
//! gradients. All tensors live inside the tape and are addressed by
//! [`TensorId`]; [`Tensor`] is the plain storage type used to move values in
//! and out (model parameters, dataset features, results).
//!
//! Everything is `f64` and single-threaded per tape. Identical inputs produce
//! bit-identical forward values and gradients: iteration order is fixed and
//! no hashing is involved anywhere on the numeric path.

mod ffn;
mod tape;

pub use ffn::{ffn_apply, ffn_graph, uniform_tensor, Affine, Ffn, FfnVars};
pub use tape::{Gradients, Tape, TensorId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape [{actual}] does not hold {expected} values")]
    BadShape { expected: usize, actual: String },
    #[error("{op}: incompatible shapes {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("{op}: expected a 2-d tensor, got shape {shape}")]
    NotMatrix { op: &'static str, shape: String },
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("{op}: index {index} out of bounds for {bound}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape}")]
    NonScalarLoss { shape: String },
    #[error("unknown tensor id {0}")]
    UnknownTensor(usize),
    #[error("no gradient recorded for tensor {0}; was it registered with requires_grad?")]
    MissingGradient(usize),
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    dims.join("x")
}

/// Dense row-major tensor used for storage outside a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::BadShape {
                expected: values.len(),
                actual: fmt_shape(&shape),
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable leaf when registered on a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// One SGD update, `p <- p - lr * g`, applied in place.
///
/// Every parameter must have a gradient entry in `grads`; a missing entry is
/// a contract error rather than a silent no-op.
pub fn sgd_step(
    params: &mut [(TensorId, &mut Tensor)],
    grads: &Gradients,
    lr: f64,
) -> Result<(), TensorError> {
    for (id, tensor) in params.iter_mut() {
        let g = grads
            .get(*id)
            .ok_or(TensorError::MissingGradient(id.index()))?;
        if g.len() != tensor.values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                lhs: fmt_shape(&tensor.shape),
                rhs: format!("{}", g.len()),
            });
        }
        for (p, gi) in tensor.values.iter_mut().zip(g.iter()) {
            *p -= lr * gi;
        }
    }
    Ok(())
}

/// Compares tape gradients against central finite differences.
///
/// `build` re-creates the scalar loss from the registered leaves; it is
/// called once per perturbed coordinate. Returns the maximum scaled error
/// `|ad - fd| / max(|ad|, |fd|, 1e-4)` over all leaf entries.
pub fn gradcheck<F>(leaves: &[Tensor], build: F, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&Tape, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let tape = Tape::new();
    let ids: Vec<TensorId> = leaves
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let loss = build(&tape, &ids)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&tape, &ids)?;
        Ok(tape.values(loss)[0])
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let ad = grads
            .get(ids[li])
            .ok_or(TensorError::MissingGradient(ids[li].index()))?
            .to_vec();
        for ei in 0..leaf.numel() {
            let orig = leaf.values[ei];
            work[li].values[ei] = orig + h;
            let up = eval(&work)?;
            work[li].values[ei] = orig - h;
            let down = eval(&work)?;
            work[li].values[ei] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (ad[ei] - fd).abs() / ad[ei].abs().max(fd.abs()).max(1e-4);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
