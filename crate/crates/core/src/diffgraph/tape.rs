use std::fmt::Write as _;

use super::{GraphError, Gradients, ParamId, ParamStore, Tensor};

/// Probability floor used by [`Tape::cross_entropy`] when its input is not
/// a softmax node.
pub const PROB_FLOOR: f64 = 1e-12;

const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param(ParamId),
    Constant,
    Gather { table: ParamId, ids: Vec<usize> },
    MeanPool { input: Var, len: usize },
    Add(Var, Var),
    AddN(Vec<Var>),
    Concat(Var, Var),
    Affine { weight: Var, input: Var, bias: Var },
    Tanh(Var),
    Softmax(Var),
    CrossEntropy { probs: Var, target: usize, fused: bool },
    ScalarMul(Var, f64),
    MaskedSlice { input: Var, indices: Vec<usize> },
    StackColumns(Vec<Var>),
    Reshape(Var),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::Gather { .. } => "embed_gather",
            Op::MeanPool { .. } => "mean_pool",
            Op::Add(..) => "add",
            Op::AddN(_) => "add_n",
            Op::Concat(..) => "concat",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ScalarMul(..) => "scalar_mul",
            Op::MaskedSlice { .. } => "masked_slice",
            Op::StackColumns(_) => "stack_columns",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Param(_) | Op::Constant | Op::Gather { .. } => vec![],
            Op::MeanPool { input, .. }
            | Op::Tanh(input)
            | Op::Softmax(input)
            | Op::ScalarMul(input, _)
            | Op::MaskedSlice { input, .. }
            | Op::Reshape(input)
            | Op::Sum(input)
            | Op::CrossEntropy { probs: input, .. } => vec![*input],
            Op::Add(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::AddN(vars) | Op::StackColumns(vars) => vars.clone(),
            Op::Affine {
                weight,
                input,
                bias,
            } => vec![*weight, *input, *bias],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Records one forward pass in topological order and replays it backwards.
///
/// Parameters are read from a borrowed [`ParamStore`]; gradients are written
/// into a caller-owned [`Gradients`] so that several tapes can be reduced
/// in a fixed order.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    finished: bool,
    check_finite: bool,
    clamped: usize,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            finished: false,
            check_finite: false,
            clamped: 0,
        }
    }

    /// Fail any op whose output contains NaN or infinity.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Number of cross-entropy evaluations that hit the probability floor.
    pub fn clamped_count(&self) -> usize {
        self.clamped
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var, GraphError> {
        if self.finished {
            return Err(GraphError::Usage("tape already consumed by backward"));
        }
        if self.check_finite && !value.is_finite() {
            return Err(GraphError::NonFinite(op.name()));
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn expect_vector(&self, op: &'static str, v: Var) -> Result<usize, GraphError> {
        match self.shape(v) {
            [n] => Ok(*n),
            other => Err(GraphError::RankMismatch {
                op,
                expected: 1,
                got: other.to_vec(),
            }),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var, GraphError> {
        let value = self.params.get(id).clone();
        self.push(Op::Param(id), value)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, GraphError> {
        self.push(Op::Constant, value)
    }

    /// Rows `ids` of a matrix parameter, as an `ids.len() x d` matrix.
    pub fn embed_gather(&mut self, table: ParamId, ids: &[usize]) -> Result<Var, GraphError> {
        let t = self.params.get(table);
        if t.rank() != 2 {
            return Err(GraphError::RankMismatch {
                op: "embed_gather",
                expected: 2,
                got: t.shape().to_vec(),
            });
        }
        if ids.is_empty() {
            return Err(GraphError::InvalidArgument("embed_gather needs at least one id".into()));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(GraphError::IndexOutOfRange {
                    op: "embed_gather",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::matrix(ids.len(), cols, data)?;
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            value,
        )
    }

    /// Mean of the first `len` rows of a matrix.
    pub fn mean_pool(&mut self, input: Var, len: usize) -> Result<Var, GraphError> {
        let shape = self.shape(input).to_vec();
        let [rows, cols] = shape[..] else {
            return Err(GraphError::RankMismatch {
                op: "mean_pool",
                expected: 2,
                got: shape,
            });
        };
        if len == 0 || len > rows {
            return Err(GraphError::IndexOutOfRange {
                op: "mean_pool",
                index: len,
                bound: rows + 1,
            });
        }
        let x = self.value(input);
        let mut out = vec![0.0; cols];
        for r in 0..len {
            out.iter_mut().zip(x.row(r)).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Op::MeanPool { input, len }, Tensor::vector(out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        if self.shape(a) != self.shape(b) {
            return Err(GraphError::ShapeMismatch {
                op: "add",
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Add(a, b), value)
    }

    /// Elementwise sum of several same-shaped nodes.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var, GraphError> {
        let Some(&first) = vars.first() else {
            return Err(GraphError::InvalidArgument("add_n of nothing".into()));
        };
        let shape = self.shape(first).to_vec();
        let mut data = vec![0.0; self.value(first).numel()];
        for &v in vars {
            if self.shape(v) != shape.as_slice() {
                return Err(GraphError::ShapeMismatch {
                    op: "add_n",
                    expected: shape,
                    got: self.shape(v).to_vec(),
                });
            }
            data.iter_mut()
                .zip(self.value(v).data())
                .for_each(|(d, x)| *d += x);
        }
        let value = Tensor::new(shape, data)?;
        self.push(Op::AddN(vars.to_vec()), value)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.expect_vector("concat", a)?;
        self.expect_vector("concat", b)?;
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        self.push(Op::Concat(a, b), Tensor::vector(data))
    }

    /// `y = xᵀW + b` with `W: in x out`. `x` is a vector of length `in` or
    /// an `n x in` matrix; the bias is broadcast over rows.
    pub fn affine(&mut self, weight: Var, input: Var, bias: Var) -> Result<Var, GraphError> {
        let w_shape = self.shape(weight).to_vec();
        let [fan_in, fan_out] = w_shape[..] else {
            return Err(GraphError::RankMismatch {
                op: "affine",
                expected: 2,
                got: w_shape,
            });
        };
        let x_shape = self.shape(input).to_vec();
        let (rows, width) = match x_shape[..] {
            [n] => (1, n),
            [r, n] => (r, n),
            _ => {
                return Err(GraphError::RankMismatch {
                    op: "affine",
                    expected: 1,
                    got: x_shape,
                })
            }
        };
        if width != fan_in {
            return Err(GraphError::ShapeMismatch {
                op: "affine",
                expected: vec![fan_in],
                got: vec![width],
            });
        }
        if self.shape(bias) != [fan_out] {
            return Err(GraphError::ShapeMismatch {
                op: "affine",
                expected: vec![fan_out],
                got: self.shape(bias).to_vec(),
            });
        }
        let w = self.value(weight).data();
        let x = self.value(input).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(rows * fan_out);
        for r in 0..rows {
            let mut acc = b.to_vec();
            for (i, &xi) in x[r * fan_in..(r + 1) * fan_in].iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                acc.iter_mut()
                    .zip(&w[i * fan_out..(i + 1) * fan_out])
                    .for_each(|(a, wij)| *a += xi * wij);
            }
            out.extend(acc);
        }
        let shape = if x_shape.len() == 1 {
            vec![fan_out]
        } else {
            vec![rows, fan_out]
        };
        let value = Tensor::new(shape, out)?;
        self.push(
            Op::Affine {
                weight,
                input,
                bias,
            },
            value,
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, GraphError> {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.tanh()).collect())?;
        self.push(Op::Tanh(x), value)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, logits: Var) -> Result<Var, GraphError> {
        let v = self.value(logits);
        let cols = v.last_dim();
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols) {
            data.extend(softmax(row));
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push(Op::Softmax(logits), value)
    }

    /// `-ln p[target]` for a probability vector.
    ///
    /// When `probs` is a softmax node the value is computed from its logits
    /// in log-sum-exp form and the gradient flows straight to the logits.
    pub fn cross_entropy(&mut self, probs: Var, target: usize) -> Result<Var, GraphError> {
        let n = self.expect_vector("cross_entropy", probs)?;
        if target >= n {
            return Err(GraphError::IndexOutOfRange {
                op: "cross_entropy",
                index: target,
                bound: n,
            });
        }
        let p = self.value(probs).data();
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOLERANCE || p.iter().any(|&x| x < 0.0) {
            return Err(GraphError::InvalidArgument(format!(
                "cross_entropy expects a probability vector, sum = {total}"
            )));
        }
        let (loss, fused) = match &self.nodes[probs.0].op {
            Op::Softmax(z) => {
                let z = self.value(*z).data();
                (log_sum_exp(z) - z[target], true)
            }
            _ => {
                let pt = p[target];
                if pt < PROB_FLOOR {
                    self.clamped += 1;
                }
                (-pt.max(PROB_FLOOR).ln(), false)
            }
        };
        self.push(
            Op::CrossEntropy {
                probs,
                target,
                fused,
            },
            Tensor::scalar(loss),
        )
    }

    pub fn scalar_mul(&mut self, x: Var, factor: f64) -> Result<Var, GraphError> {
        let v = self.value(x);
        let value = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|a| a * factor).collect(),
        )?;
        self.push(Op::ScalarMul(x, factor), value)
    }

    /// Picks `indices` out of a vector, in the given order.
    pub fn masked_slice(&mut self, x: Var, indices: &[usize]) -> Result<Var, GraphError> {
        let n = self.expect_vector("masked_slice", x)?;
        if indices.is_empty() {
            return Err(GraphError::InvalidArgument("masked_slice with empty index set".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(GraphError::IndexOutOfRange {
                op: "masked_slice",
                index: bad,
                bound: n,
            });
        }
        let src = self.value(x).data();
        let data = indices.iter().map(|&i| src[i]).collect();
        self.push(
            Op::MaskedSlice {
                input: x,
                indices: indices.to_vec(),
            },
            Tensor::vector(data),
        )
    }

    /// Stacks equal-length vectors as the columns of an `n x k` matrix.
    pub fn stack_columns(&mut self, vars: &[Var]) -> Result<Var, GraphError> {
        let Some(&first) = vars.first() else {
            return Err(GraphError::InvalidArgument("stack_columns of nothing".into()));
        };
        let n = self.expect_vector("stack_columns", first)?;
        for &v in vars {
            let m = self.expect_vector("stack_columns", v)?;
            if m != n {
                return Err(GraphError::ShapeMismatch {
                    op: "stack_columns",
                    expected: vec![n],
                    got: vec![m],
                });
            }
        }
        let k = vars.len();
        let mut data = vec![0.0; n * k];
        for (c, &v) in vars.iter().enumerate() {
            for (r, &x) in self.value(v).data().iter().enumerate() {
                data[r * k + c] = x;
            }
        }
        let value = Tensor::matrix(n, k, data)?;
        self.push(Op::StackColumns(vars.to_vec()), value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GraphError> {
        let v = self.value(x);
        let value = Tensor::new(shape.to_vec(), v.data().to_vec()).map_err(|_| {
            GraphError::ShapeMismatch {
                op: "reshape",
                expected: shape.to_vec(),
                got: v.shape().to_vec(),
            }
        })?;
        self.push(Op::Reshape(x), value)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, GraphError> {
        let total = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(total))
    }

    /// Mean of several scalar (or same-shaped) nodes.
    pub fn mean(&mut self, vars: &[Var]) -> Result<Var, GraphError> {
        let total = self.add_n(vars)?;
        self.scalar_mul(total, 1.0 / vars.len() as f64)
    }

    /// Propagates d`loss`/d`node` back to every parameter leaf and adds the
    /// result into `grads`. A tape can be replayed only once.
    pub fn backward(&mut self, loss: Var, grads: &mut Gradients) -> Result<(), GraphError> {
        if self.finished {
            return Err(GraphError::Usage("backward called twice on the same tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(GraphError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.finished = true;

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.add_dense(*id, &g),
                Op::Gather { table, ids } => {
                    let cols = node.value.last_dim();
                    for (r, &id) in ids.iter().enumerate() {
                        grads.add_row(*table, id, &g[r * cols..(r + 1) * cols]);
                    }
                }
                Op::MeanPool { input, len } => {
                    let cols = g.len();
                    let rows = self.nodes[input.0].value.shape()[0];
                    let inv = 1.0 / *len as f64;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..*len {
                        dx[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(d, gv)| *d = gv * inv);
                    }
                    accumulate(&mut adj, *input, &dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    accumulate(&mut adj, *b, &g);
                }
                Op::AddN(vars) => {
                    for &v in vars {
                        accumulate(&mut adj, v, &g);
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[a.0].value.numel();
                    accumulate(&mut adj, *a, &g[..na]);
                    accumulate(&mut adj, *b, &g[na..]);
                }
                Op::Affine {
                    weight,
                    input,
                    bias,
                } => {
                    let w = &self.nodes[weight.0].value;
                    let x = self.nodes[input.0].value.data();
                    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
                    let rows = x.len() / fan_in;
                    let w = w.data();
                    let mut dw = vec![0.0; fan_in * fan_out];
                    let mut dx = vec![0.0; rows * fan_in];
                    let mut db = vec![0.0; fan_out];
                    for r in 0..rows {
                        let gr = &g[r * fan_out..(r + 1) * fan_out];
                        db.iter_mut().zip(gr).for_each(|(d, gv)| *d += gv);
                        for i in 0..fan_in {
                            let xi = x[r * fan_in + i];
                            let wrow = &w[i * fan_out..(i + 1) * fan_out];
                            let dwrow = &mut dw[i * fan_out..(i + 1) * fan_out];
                            let mut acc = 0.0;
                            for j in 0..fan_out {
                                dwrow[j] += xi * gr[j];
                                acc += wrow[j] * gr[j];
                            }
                            dx[r * fan_in + i] = acc;
                        }
                    }
                    accumulate(&mut adj, *weight, &dw);
                    accumulate(&mut adj, *input, &dx);
                    accumulate(&mut adj, *bias, &db);
                }
                Op::Tanh(x) => {
                    let dx: Vec<f64> = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(y, gv)| gv * (1.0 - y * y))
                        .collect();
                    accumulate(&mut adj, *x, &dx);
                }
                Op::Softmax(z) => {
                    let cols = node.value.last_dim();
                    let mut dz = Vec::with_capacity(g.len());
                    for (p, gr) in node.value.data().chunks(cols).zip(g.chunks(cols)) {
                        let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                        dz.extend(p.iter().zip(gr).map(|(pi, gi)| pi * (gi - dot)));
                    }
                    accumulate(&mut adj, *z, &dz);
                }
                Op::CrossEntropy {
                    probs,
                    target,
                    fused,
                } => {
                    let p = self.nodes[probs.0].value.data();
                    if *fused {
                        let Op::Softmax(z) = self.nodes[probs.0].op else {
                            unreachable!("fused cross entropy over non-softmax")
                        };
                        let mut dz: Vec<f64> = p.iter().map(|pi| g[0] * pi).collect();
                        dz[*target] -= g[0];
                        accumulate(&mut adj, z, &dz);
                    } else {
                        let mut dp = vec![0.0; p.len()];
                        let pt = p[*target];
                        if pt >= PROB_FLOOR {
                            dp[*target] = -g[0] / pt;
                        }
                        accumulate(&mut adj, *probs, &dp);
                    }
                }
                Op::ScalarMul(x, factor) => {
                    let dx: Vec<f64> = g.iter().map(|gv| gv * factor).collect();
                    accumulate(&mut adj, *x, &dx);
                }
                Op::MaskedSlice { input, indices } => {
                    let mut dx = vec![0.0; self.nodes[input.0].value.numel()];
                    for (k, &i) in indices.iter().enumerate() {
                        dx[i] += g[k];
                    }
                    accumulate(&mut adj, *input, &dx);
                }
                Op::StackColumns(vars) => {
                    let k = vars.len();
                    for (c, &v) in vars.iter().enumerate() {
                        let dv: Vec<f64> = g.iter().skip(c).step_by(k).copied().collect();
                        accumulate(&mut adj, v, &dv);
                    }
                }
                Op::Reshape(x) => accumulate(&mut adj, *x, &g),
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.numel();
                    accumulate(&mut adj, *x, &vec![g[0]; n]);
                }
            }
        }
        Ok(())
    }

    /// Human-readable listing of the recorded graph.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let inputs: Vec<String> = node.op.inputs().iter().map(|v| format!("%{}", v.0)).collect();
            let extra = match &node.op {
                Op::Param(id) => format!(" {}", self.params.name(*id)),
                Op::Gather { table, ids } => format!(" {} {:?}", self.params.name(*table), ids),
                Op::CrossEntropy { target, .. } => format!(" target={target}"),
                Op::ScalarMul(_, f) => format!(" x{f}"),
                Op::MaskedSlice { indices, .. } => format!(" {indices:?}"),
                _ => String::new(),
            };
            let _ = writeln!(
                out,
                "%{i} = {}({}){} : {:?}",
                node.op.name(),
                inputs.join(", "),
                extra,
                node.value.shape()
            );
        }
        out
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Max-subtracted softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}
