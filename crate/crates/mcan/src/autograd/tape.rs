use std::cell::RefCell;

use super::{fmt_shape, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Relu { a: usize },
    Log { a: usize },
    SoftmaxRows { a: usize, mask: Option<Vec<bool>> },
    LogSoftmaxRows { a: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    ConcatCols { a: usize, b: usize },
    ConcatRows { a: usize, b: usize },
    Reshape { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    Pick { a: usize, idx: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every `requires_grad` tensor
/// on the tape. Tensors that do not feed the loss carry a zero gradient.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Wengert tape: an append-only record of primitive operations.
///
/// Nodes are stored in execution order, which is a topological order by
/// construction, so backward is a single reverse sweep. The tape is not
/// `Sync`; a tape and its tensors belong to one execution context.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Registers a storage tensor as a leaf, copying its values.
    pub fn leaf(&self, t: &Tensor) -> TensorId {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Registers a non-trainable constant.
    pub fn constant(&self, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorId, TensorError> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn shape(&self, id: TensorId) -> Vec<usize> {
        self.nodes.borrow()[id.0].shape.clone()
    }

    pub fn values(&self, id: TensorId) -> Vec<f64> {
        self.nodes.borrow()[id.0].values.clone()
    }

    /// Copies a tape tensor back into storage form.
    pub fn tensor(&self, id: TensorId) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[id.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.values.clone(),
            requires_grad: false,
        }
    }

    fn push(&self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> TensorId {
        debug_assert!(values.iter().all(|v| v.is_finite()), "non-finite tensor");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            values,
            op,
            requires_grad,
        });
        TensorId(nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn dims2(&self, op: &'static str, id: TensorId) -> Result<(usize, usize), TensorError> {
        let nodes = self.nodes.borrow();
        let shape = &nodes[id.0].shape;
        if shape.len() != 2 {
            return Err(TensorError::NotMatrix {
                op,
                shape: fmt_shape(shape),
            });
        }
        Ok((shape[0], shape[1]))
    }

    // ── Primitive operations ──────────────────────────────────────────

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, ka) = self.dims2("matmul", a)?;
        let (kb, n) = self.dims2("matmul", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: format!("{}x{}", m, ka),
                rhs: format!("{}x{}", kb, n),
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            matmul_raw(&nodes[a.0].values, &nodes[b.0].values, m, ka, n)
        };
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(vec![m, n], out, Op::Matmul { a: a.0, b: b.0 }, rg))
    }

    pub fn transpose(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.dims2("transpose", a)?;
        let out = {
            let nodes = self.nodes.borrow();
            transpose_raw(&nodes[a.0].values, m, n)
        };
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(vec![n, m], out, Op::Transpose { a: a.0 }, rg))
    }

    fn elementwise(
        &self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape != nb.shape {
                return Err(TensorError::ShapeMismatch {
                    op: op_name,
                    lhs: fmt_shape(&na.shape),
                    rhs: fmt_shape(&nb.shape),
                });
            }
            let out: Vec<f64> = na
                .values
                .iter()
                .zip(nb.values.iter())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (na.shape.clone(), out)
        };
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(shape, out, op, rg))
    }

    pub fn add(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// Adds a `[n]` (or `[1×n]`) row vector to every row of a `[m×n]` matrix.
    pub fn add_row(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.dims2("add_row", a)?;
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let nb = &nodes[b.0];
            if nb.values.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row",
                    lhs: format!("{}x{}", m, n),
                    rhs: fmt_shape(&nb.shape),
                });
            }
            let na = &nodes[a.0];
            let mut out = na.values.clone();
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += nb.values[j];
                }
            }
            (na.shape.clone(), out)
        };
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(shape, out, Op::AddRow { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&self, a: TensorId, c: f64) -> Result<TensorId, TensorError> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (
                na.shape.clone(),
                na.values.iter().map(|&x| c * x).collect::<Vec<f64>>(),
            )
        };
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(shape, out, Op::Scale { a: a.0, c }, rg))
    }

    pub fn relu(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (
                na.shape.clone(),
                na.values.iter().map(|&x| x.max(0.0)).collect::<Vec<f64>>(),
            )
        };
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(shape, out, Op::Relu { a: a.0 }, rg))
    }

    pub fn log(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (
                na.shape.clone(),
                na.values.iter().map(|&x| x.ln()).collect::<Vec<f64>>(),
            )
        };
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(shape, out, Op::Log { a: a.0 }, rg))
    }

    /// Row-wise softmax with an optional visibility mask (`true` = visible).
    ///
    /// Masked entries are exactly 0 in the output and each row is stabilized
    /// by subtracting its row max over the visible entries. A fully-masked
    /// row is an error.
    pub fn softmax_rows(
        &self,
        a: TensorId,
        mask: Option<&[bool]>,
    ) -> Result<TensorId, TensorError> {
        let (m, n) = self.dims2("softmax_rows", a)?;
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows",
                    lhs: format!("{}x{}", m, n),
                    rhs: format!("mask of {}", mk.len()),
                });
            }
        }
        let out = {
            let nodes = self.nodes.borrow();
            softmax_rows_raw(&nodes[a.0].values, m, n, mask)?
        };
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::SoftmaxRows {
                a: a.0,
                mask: mask.map(|m| m.to_vec()),
            },
            rg,
        ))
    }

    /// Row-wise `log(softmax(x))`, computed stably in one pass (no mask).
    pub fn log_softmax_rows(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.dims2("log_softmax_rows", a)?;
        let out = {
            let nodes = self.nodes.borrow();
            let vals = &nodes[a.0].values;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &vals[i * n..(i + 1) * n];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
                for j in 0..n {
                    out[i * n + j] = row[j] - lse;
                }
            }
            out
        };
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(vec![m, n], out, Op::LogSoftmaxRows { a: a.0 }, rg))
    }

    /// Selects rows by index; repeated indices are allowed and gradients
    /// accumulate into the source row.
    pub fn gather_rows(&self, a: TensorId, idx: &[usize]) -> Result<TensorId, TensorError> {
        let (m, n) = self.dims2("gather_rows", a)?;
        let out = {
            let nodes = self.nodes.borrow();
            let vals = &nodes[a.0].values;
            let mut out = Vec::with_capacity(idx.len() * n);
            for &r in idx {
                if r >= m {
                    return Err(TensorError::IndexOutOfBounds {
                        op: "gather_rows",
                        index: r,
                        bound: m,
                    });
                }
                out.extend_from_slice(&vals[r * n..(r + 1) * n]);
            }
            out
        };
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(
            vec![idx.len(), n],
            out,
            Op::GatherRows {
                a: a.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// `[m×p] ++ [m×q] -> [m×(p+q)]`.
    pub fn concat_cols(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ma, p) = self.dims2("concat_cols", a)?;
        let (mb, q) = self.dims2("concat_cols", b)?;
        if ma != mb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: format!("{}x{}", ma, p),
                rhs: format!("{}x{}", mb, q),
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].values, &nodes[b.0].values);
            let mut out = Vec::with_capacity(ma * (p + q));
            for i in 0..ma {
                out.extend_from_slice(&va[i * p..(i + 1) * p]);
                out.extend_from_slice(&vb[i * q..(i + 1) * q]);
            }
            out
        };
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(
            vec![ma, p + q],
            out,
            Op::ConcatCols { a: a.0, b: b.0 },
            rg,
        ))
    }

    /// `[p×n]` stacked on `[q×n]` -> `[(p+q)×n]`.
    pub fn concat_rows(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (p, na) = self.dims2("concat_rows", a)?;
        let (q, nb) = self.dims2("concat_rows", b)?;
        if na != nb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: format!("{}x{}", p, na),
                rhs: format!("{}x{}", q, nb),
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].values.clone();
            out.extend_from_slice(&nodes[b.0].values);
            out
        };
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(
            vec![p + q, na],
            out,
            Op::ConcatRows { a: a.0, b: b.0 },
            rg,
        ))
    }

    pub fn reshape(&self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let expected: usize = shape.iter().product();
            if expected != na.values.len() {
                return Err(TensorError::BadShape {
                    expected: na.values.len(),
                    actual: fmt_shape(&shape),
                });
            }
            na.values.clone()
        };
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(shape, out, Op::Reshape { a: a.0 }, rg))
    }

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let s = {
            let nodes = self.nodes.borrow();
            nodes[a.0].values.iter().sum::<f64>()
        };
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(vec![1], vec![s], Op::Sum { a: a.0 }, rg))
    }

    /// Mean of all entries, as a `[1]` scalar.
    pub fn mean(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let s = {
            let nodes = self.nodes.borrow();
            let vals = &nodes[a.0].values;
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(vec![1], vec![s], Op::Mean { a: a.0 }, rg))
    }

    /// Selects one entry by flat index, as a `[1]` scalar.
    pub fn pick(&self, a: TensorId, idx: usize) -> Result<TensorId, TensorError> {
        let v = {
            let nodes = self.nodes.borrow();
            let vals = &nodes[a.0].values;
            if idx >= vals.len() {
                return Err(TensorError::IndexOutOfBounds {
                    op: "pick",
                    index: idx,
                    bound: vals.len(),
                });
            }
            vals[idx]
        };
        let rg = self.needs_grad(&[a.0]);
        Ok(self.push(vec![1], vec![v], Op::Pick { a: a.0, idx }, rg))
    }

    // ── Backward ──────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns the gradient of the loss
    /// with respect to every `requires_grad` tensor on the tape; tensors
    /// that do not reach the loss get an explicit zero gradient.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        if loss.0 >= nodes.len() {
            return Err(TensorError::UnknownTensor(loss.0));
        }
        if nodes[loss.0].values.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: fmt_shape(&nodes[loss.0].shape),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            backprop_node(&nodes, i, &gout, &mut grads);
            grads[i] = Some(gout);
        }

        // Materialize zeros for trainable leaves off the loss path.
        for (i, node) in nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.values.len()]);
            }
        }
        // Drop intermediate gradients for non-trainable nodes.
        for (i, node) in nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], target: usize, len: usize, add: impl Fn(&mut [f64])) {
    let slot = grads[target].get_or_insert_with(|| vec![0.0; len]);
    add(slot);
}

fn backprop_node(nodes: &[Node], i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            if nodes[*a].requires_grad {
                let bt = transpose_raw(&nodes[*b].values, k, n);
                let da = matmul_raw(gout, &bt, m, n, k);
                accumulate(grads, *a, m * k, |g| {
                    for (gi, di) in g.iter_mut().zip(da.iter()) {
                        *gi += di;
                    }
                });
            }
            if nodes[*b].requires_grad {
                let at = transpose_raw(&nodes[*a].values, m, k);
                let db = matmul_raw(&at, gout, k, m, n);
                accumulate(grads, *b, k * n, |g| {
                    for (gi, di) in g.iter_mut().zip(db.iter()) {
                        *gi += di;
                    }
                });
            }
        }
        Op::Transpose { a } => {
            let (m, n) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            // gout has shape n×m.
            let da = transpose_raw(gout, n, m);
            accumulate(grads, *a, m * n, |g| {
                for (gi, di) in g.iter_mut().zip(da.iter()) {
                    *gi += di;
                }
            });
        }
        Op::Add { a, b } => {
            for &t in [a, b].iter() {
                if nodes[*t].requires_grad {
                    accumulate(grads, *t, gout.len(), |g| {
                        for (gi, &di) in g.iter_mut().zip(gout.iter()) {
                            *gi += di;
                        }
                    });
                }
            }
        }
        Op::Sub { a, b } => {
            if nodes[*a].requires_grad {
                accumulate(grads, *a, gout.len(), |g| {
                    for (gi, &di) in g.iter_mut().zip(gout.iter()) {
                        *gi += di;
                    }
                });
            }
            if nodes[*b].requires_grad {
                accumulate(grads, *b, gout.len(), |g| {
                    for (gi, &di) in g.iter_mut().zip(gout.iter()) {
                        *gi -= di;
                    }
                });
            }
        }
        Op::Mul { a, b } => {
            if nodes[*a].requires_grad {
                let vb = &nodes[*b].values;
                accumulate(grads, *a, gout.len(), |g| {
                    for ((gi, &di), &y) in g.iter_mut().zip(gout.iter()).zip(vb.iter()) {
                        *gi += di * y;
                    }
                });
            }
            if nodes[*b].requires_grad {
                let va = &nodes[*a].values;
                accumulate(grads, *b, gout.len(), |g| {
                    for ((gi, &di), &x) in g.iter_mut().zip(gout.iter()).zip(va.iter()) {
                        *gi += di * x;
                    }
                });
            }
        }
        Op::AddRow { a, b } => {
            let n = nodes[*b].values.len();
            if nodes[*a].requires_grad {
                accumulate(grads, *a, gout.len(), |g| {
                    for (gi, &di) in g.iter_mut().zip(gout.iter()) {
                        *gi += di;
                    }
                });
            }
            if nodes[*b].requires_grad {
                accumulate(grads, *b, n, |g| {
                    for (r, chunk) in gout.chunks(n).enumerate() {
                        let _ = r;
                        for (gi, &di) in g.iter_mut().zip(chunk.iter()) {
                            *gi += di;
                        }
                    }
                });
            }
        }
        Op::Scale { a, c } => {
            accumulate(grads, *a, gout.len(), |g| {
                for (gi, &di) in g.iter_mut().zip(gout.iter()) {
                    *gi += c * di;
                }
            });
        }
        Op::Relu { a } => {
            let va = &nodes[*a].values;
            accumulate(grads, *a, gout.len(), |g| {
                for ((gi, &di), &x) in g.iter_mut().zip(gout.iter()).zip(va.iter()) {
                    if x > 0.0 {
                        *gi += di;
                    }
                }
            });
        }
        Op::Log { a } => {
            let va = &nodes[*a].values;
            accumulate(grads, *a, gout.len(), |g| {
                for ((gi, &di), &x) in g.iter_mut().zip(gout.iter()).zip(va.iter()) {
                    *gi += di / x;
                }
            });
        }
        Op::SoftmaxRows { a, mask } => {
            let (m, n) = (nodes[i].shape[0], nodes[i].shape[1]);
            let y = &nodes[i].values;
            accumulate(grads, *a, m * n, |g| {
                for r in 0..m {
                    let row = &y[r * n..(r + 1) * n];
                    let grow = &gout[r * n..(r + 1) * n];
                    let dot: f64 = row.iter().zip(grow.iter()).map(|(&yi, &gi)| yi * gi).sum();
                    for j in 0..n {
                        let visible = mask.as_ref().map_or(true, |mk| mk[r * n + j]);
                        if visible {
                            g[r * n + j] += row[j] * (grow[j] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmaxRows { a } => {
            let (m, n) = (nodes[i].shape[0], nodes[i].shape[1]);
            let z = &nodes[i].values;
            accumulate(grads, *a, m * n, |g| {
                for r in 0..m {
                    let grow = &gout[r * n..(r + 1) * n];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..n {
                        let y = z[r * n + j].exp();
                        g[r * n + j] += grow[j] - y * gsum;
                    }
                }
            });
        }
        Op::GatherRows { a, idx } => {
            let n = nodes[*a].shape[1];
            let len = nodes[*a].values.len();
            accumulate(grads, *a, len, |g| {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        g[src * n + j] += gout[r * n + j];
                    }
                }
            });
        }
        Op::ConcatCols { a, b } => {
            let (m, p) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let q = nodes[*b].shape[1];
            if nodes[*a].requires_grad {
                accumulate(grads, *a, m * p, |g| {
                    for r in 0..m {
                        for j in 0..p {
                            g[r * p + j] += gout[r * (p + q) + j];
                        }
                    }
                });
            }
            if nodes[*b].requires_grad {
                accumulate(grads, *b, m * q, |g| {
                    for r in 0..m {
                        for j in 0..q {
                            g[r * q + j] += gout[r * (p + q) + p + j];
                        }
                    }
                });
            }
        }
        Op::ConcatRows { a, b } => {
            let la = nodes[*a].values.len();
            let lb = nodes[*b].values.len();
            if nodes[*a].requires_grad {
                accumulate(grads, *a, la, |g| {
                    for (gi, &di) in g.iter_mut().zip(gout[..la].iter()) {
                        *gi += di;
                    }
                });
            }
            if nodes[*b].requires_grad {
                accumulate(grads, *b, lb, |g| {
                    for (gi, &di) in g.iter_mut().zip(gout[la..].iter()) {
                        *gi += di;
                    }
                });
            }
        }
        Op::Reshape { a } => {
            accumulate(grads, *a, gout.len(), |g| {
                for (gi, &di) in g.iter_mut().zip(gout.iter()) {
                    *gi += di;
                }
            });
        }
        Op::Sum { a } => {
            let len = nodes[*a].values.len();
            accumulate(grads, *a, len, |g| {
                for gi in g.iter_mut() {
                    *gi += gout[0];
                }
            });
        }
        Op::Mean { a } => {
            let len = nodes[*a].values.len();
            let w = 1.0 / len as f64;
            accumulate(grads, *a, len, |g| {
                for gi in g.iter_mut() {
                    *gi += gout[0] * w;
                }
            });
        }
        Op::Pick { a, idx } => {
            let len = nodes[*a].values.len();
            accumulate(grads, *a, len, |g| {
                g[*idx] += gout[0];
            });
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn softmax_rows_raw(
    vals: &[f64],
    m: usize,
    n: usize,
    mask: Option<&[bool]>,
) -> Result<Vec<f64>, TensorError> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &vals[i * n..(i + 1) * n];
        let visible = |j: usize| mask.map_or(true, |mk| mk[i * n + j]);
        let mut mx = f64::NEG_INFINITY;
        for j in 0..n {
            if visible(j) {
                mx = mx.max(row[j]);
            }
        }
        if mx == f64::NEG_INFINITY {
            return Err(TensorError::DegenerateRow { row: i });
        }
        let mut denom = 0.0;
        for j in 0..n {
            if visible(j) {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                denom += e;
            }
        }
        for j in 0..n {
            if visible(j) {
                out[i * n + j] /= denom;
            }
        }
    }
    Ok(out)
}
