//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! The primitive set is exactly what the toy denoiser needs: matmul, adds,
//! row broadcasts, row softmax, row layer norm, gelu, column slicing for
//! heads, row gather for embedding tables, and a mean-of-squares reduction
//! for the training loss. Values are computed eagerly on construction; the
//! tape is replayed in reverse by [`Tape::backward`].

use super::{softmax_rows, Tensor};
use crate::error::{CoreError, Result};

/// Identifier of a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    /// C = A B
    Matmul(NodeId, NodeId),
    /// C = A B^T
    MatmulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// matrix [n,d] + row [1,d] broadcast over rows
    AddRow(NodeId, NodeId),
    /// matrix [n,d] * row [1,d] broadcast over rows
    MulRow(NodeId, NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId),
    Gelu(NodeId),
    /// row `index` of a table, as a [1,cols] tensor
    GatherRow(NodeId, usize),
    /// columns [start, start+len) of a matrix
    SliceCols(NodeId, usize, usize),
    ConcatCols(NodeId, NodeId),
    /// scalar mean of squared entries
    SquareMean(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar tape output with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. the given node; zero tensor if the output does not
    /// depend on it.
    pub fn get(&self, id: NodeId) -> Result<Tensor> {
        if id.0 >= self.shapes.len() {
            return Err(CoreError::MissingGradient(format!(
                "node {} is not on this tape",
                id.0
            )));
        }
        Ok(match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[id.0].clone()),
        })
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn layer_norm_rows(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = &x.data[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            out[i * d + j] = (row[j] - mean) * inv;
        }
    }
    Tensor::matrix(n, d, out).expect("layer norm shape")
}

/// Ordered record of primitive operations; inputs always precede outputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t)
    }

    /// A constant the backward pass will not differentiate through. On this
    /// tape constants and inputs are recorded identically; the distinction is
    /// only whether the caller asks for their gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t)
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), v))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatmulNt(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        let (mv, rv) = (self.value(m), self.value(row));
        if rv.rows() != 1 || rv.cols() != mv.cols() {
            return Err(CoreError::Dimension(format!(
                "add_row {:?} + {:?}",
                mv.shape, rv.shape
            )));
        }
        let (n, d) = (mv.rows(), mv.cols());
        let mut out = mv.data.clone();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += rv.data[j];
            }
        }
        let v = Tensor::matrix(n, d, out)?;
        Ok(self.push(Op::AddRow(m, row), v))
    }

    pub fn mul_row(&mut self, m: NodeId, row: NodeId) -> Result<NodeId> {
        let (mv, rv) = (self.value(m), self.value(row));
        if rv.rows() != 1 || rv.cols() != mv.cols() {
            return Err(CoreError::Dimension(format!(
                "mul_row {:?} * {:?}",
                mv.shape, rv.shape
            )));
        }
        let (n, d) = (mv.rows(), mv.cols());
        let mut out = mv.data.clone();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] *= rv.data[j];
            }
        }
        let v = Tensor::matrix(n, d, out)?;
        Ok(self.push(Op::MulRow(m, row), v))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let v = layer_norm_rows(self.value(a));
        self.push(Op::LayerNormRows(a), v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(Op::Gelu(a), v)
    }

    pub fn gather_row(&mut self, table: NodeId, index: usize) -> Result<NodeId> {
        let tv = self.value(table);
        if index >= tv.rows() {
            return Err(CoreError::InvalidInput(format!(
                "gather_row index {} out of {} rows",
                index,
                tv.rows()
            )));
        }
        let d = tv.cols();
        let v = Tensor::matrix(1, d, tv.data[index * d..(index + 1) * d].to_vec())?;
        Ok(self.push(Op::GatherRow(table, index), v))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(CoreError::Dimension(format!(
                "slice_cols [{start}, {}) of {} cols",
                start + len,
                av.cols()
            )));
        }
        let (n, d) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&av.data[i * d + start..i * d + start + len]);
        }
        let v = Tensor::matrix(n, len, out)?;
        Ok(self.push(Op::SliceCols(a, start, len), v))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(CoreError::Dimension(format!(
                "concat_cols {:?} | {:?}",
                av.shape, bv.shape
            )));
        }
        let (n, da, db) = (av.rows(), av.cols(), bv.cols());
        let mut out = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            out.extend_from_slice(&av.data[i * da..(i + 1) * da]);
            out.extend_from_slice(&bv.data[i * db..(i + 1) * db]);
        }
        let v = Tensor::matrix(n, da + db, out)?;
        Ok(self.push(Op::ConcatCols(a, b), v))
    }

    pub fn square_mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let n = av.numel() as f64;
        let v = Tensor::scalar(av.data.iter().map(|&x| x * x).sum::<f64>() / n);
        self.push(Op::SquareMean(a), v)
    }

    /// Reverse sweep from a scalar output. Visits each node exactly once, in
    /// reverse topological order (tape order).
    pub fn backward(&self, out: NodeId) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return Err(CoreError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(out).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut seed = Tensor::zeros(self.value(out).shape.clone());
        seed.data[0] = 1.0;
        grads[out.0] = Some(seed);

        for idx in (0..=out.0).rev() {
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Matmul(a, b) => {
                    let da = g.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    self.accumulate(&mut grads, *a, da)?;
                    self.accumulate(&mut grads, *b, db)?;
                }
                Op::MatmulNt(a, b) => {
                    let da = g.matmul(self.value(*b))?;
                    let db = g.transpose().matmul(self.value(*a))?;
                    self.accumulate(&mut grads, *a, da)?;
                    self.accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone())?;
                    self.accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone())?;
                    self.accumulate(&mut grads, *b, g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    let da = g.zip(self.value(*b), |x, y| x * y)?;
                    let db = g.zip(self.value(*a), |x, y| x * y)?;
                    self.accumulate(&mut grads, *a, da)?;
                    self.accumulate(&mut grads, *b, db)?;
                }
                Op::Scale(a, s) => {
                    self.accumulate(&mut grads, *a, g.scale(*s))?;
                }
                Op::AddRow(m, row) => {
                    let d = g.cols();
                    let mut rg = vec![0.0; d];
                    for i in 0..g.rows() {
                        for j in 0..d {
                            rg[j] += g.data[i * d + j];
                        }
                    }
                    self.accumulate(&mut grads, *m, g)?;
                    self.accumulate(&mut grads, *row, Tensor::matrix(1, d, rg)?)?;
                }
                Op::MulRow(m, row) => {
                    let mv = self.value(*m);
                    let rv = self.value(*row);
                    let (n, d) = (mv.rows(), mv.cols());
                    let mut mg = vec![0.0; n * d];
                    let mut rg = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            mg[i * d + j] = g.data[i * d + j] * rv.data[j];
                            rg[j] += g.data[i * d + j] * mv.data[i * d + j];
                        }
                    }
                    self.accumulate(&mut grads, *m, Tensor::matrix(n, d, mg)?)?;
                    self.accumulate(&mut grads, *row, Tensor::matrix(1, d, rg)?)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (n, d) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let yr = &y.data[i * d..(i + 1) * d];
                        let gr = &g.data[i * d..(i + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dx[i * d + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::matrix(n, d, dx)?)?;
                }
                Op::LayerNormRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let (n, d) = (x.rows(), x.cols());
                    let df = d as f64;
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let xr = &x.data[i * d..(i + 1) * d];
                        let yr = &y.data[i * d..(i + 1) * d];
                        let gr = &g.data[i * d..(i + 1) * d];
                        let mean = xr.iter().sum::<f64>() / df;
                        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let gmean = gr.iter().sum::<f64>() / df;
                        let gymean = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<f64>() / df;
                        for j in 0..d {
                            dx[i * d + j] = inv * (gr[j] - gmean - yr[j] * gymean);
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::matrix(n, d, dx)?)?;
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let dx = g.zip(&x.map(gelu_deriv), |gi, di| gi * di)?;
                    self.accumulate(&mut grads, *a, dx)?;
                }
                Op::GatherRow(table, index) => {
                    let tv = self.value(*table);
                    let mut tg = Tensor::zeros(tv.shape.clone());
                    let d = tv.cols();
                    tg.data[index * d..(index + 1) * d].copy_from_slice(&g.data);
                    self.accumulate(&mut grads, *table, tg)?;
                }
                Op::SliceCols(a, start, len) => {
                    let av = self.value(*a);
                    let (n, d) = (av.rows(), av.cols());
                    let mut ag = Tensor::zeros(vec![n, d]);
                    for i in 0..n {
                        for j in 0..*len {
                            ag.data[i * d + start + j] = g.data[i * len + j];
                        }
                    }
                    self.accumulate(&mut grads, *a, ag)?;
                }
                Op::ConcatCols(a, b) => {
                    let (da, db) = (self.value(*a).cols(), self.value(*b).cols());
                    let n = g.rows();
                    let mut ga = Vec::with_capacity(n * da);
                    let mut gb = Vec::with_capacity(n * db);
                    for i in 0..n {
                        ga.extend_from_slice(&g.data[i * (da + db)..i * (da + db) + da]);
                        gb.extend_from_slice(&g.data[i * (da + db) + da..(i + 1) * (da + db)]);
                    }
                    self.accumulate(&mut grads, *a, Tensor::matrix(n, da, ga)?)?;
                    self.accumulate(&mut grads, *b, Tensor::matrix(n, db, gb)?)?;
                }
                Op::SquareMean(a) => {
                    let x = self.value(*a);
                    let n = x.numel() as f64;
                    let dx = x.scale(2.0 * g.data[0] / n);
                    self.accumulate(&mut grads, *a, dx)?;
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
        match &mut grads[id.0] {
            Some(existing) => *existing = existing.add(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}
