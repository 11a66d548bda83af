//! Reverse-mode tape. Operations append nodes; `backward` walks the tape in
//! reverse recording order. Parents always precede children, so a single
//! reverse sweep is a valid topological order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{Mask, Tensor, TensorError};
use crate::ctc;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
#[allow(dead_code)]
enum Op {
    Leaf,
    Param,
    StopGrad(Var),
    Matmul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, mul: f64, add: f64 },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows { x: Var, mask: Option<Mask> },
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    ExclusiveCumprodRows(Var),
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize, end: usize },
    Reshape(Var),
    Transpose(Var),
    EmbedRows { table: Var, ids: Vec<usize> },
    SumAll(Var),
    Conv2d { x: Var, w: Var, b: Var, k: usize, pad: usize },
    FlattenChw(Var),
    DropMask { x: Var, mask: Vec<f64> },
    CtcNll { log_probs: Var, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Computation tape plus a registry of named parameters bound for this
/// forward pass. Rebuilt from scratch every pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value on tape");
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked1(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn tracked(&self, v: Var) -> bool {
        self.tracked1(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Copy of the value, severed from the tape.
    pub fn detach(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.params
    }

    // ── Node constructors ──────────────────────────────────────────────

    /// Constant input; never receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input, registered under `name` for the optimizer.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        debug_assert!(
            self.params.iter().all(|(n, _)| n != name),
            "duplicate parameter {name}"
        );
        let v = self.push(value.clone(), Op::Param, true);
        self.params.push((name.to_string(), v));
        v
    }

    /// Forward identity that blocks gradient flow.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::StopGrad(x), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = kernels::matmul(ta.data(), m, k, tb.data(), n);
        let tracked = self.tracked1(a) || self.tracked1(b);
        Ok(self.push(Tensor::new(vec![m, n], data).unwrap(), Op::Matmul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::DimMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let tracked = self.tracked1(a) || self.tracked1(b);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    /// Add a length-m row vector to every row of an `n x m` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (tx, tr) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        if tx.shape().len() != 2 || tr.len() != tx.cols() {
            return Err(TensorError::DimMismatch {
                op: "add_row",
                lhs: tx.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let (n, m) = (tx.rows(), tx.cols());
        let mut data = tx.data().to_vec();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += tr.data()[j];
            }
        }
        let tracked = self.tracked1(x) || self.tracked1(row);
        Ok(self.push(Tensor::new(vec![n, m], data).unwrap(), Op::AddRow(x, row), tracked))
    }

    /// Add a scalar (shape `[1]`) variable to every entry.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (tx, ts) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        if ts.len() != 1 {
            return Err(TensorError::DimMismatch {
                op: "add_scalar",
                lhs: tx.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let sv = ts.data()[0];
        let data: Vec<f64> = tx.data().iter().map(|v| v + sv).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let tracked = self.tracked1(x) || self.tracked1(s);
        Ok(self.push(value, Op::AddScalar(x, s), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::DimMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let tracked = self.tracked1(a) || self.tracked1(b);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    /// Elementwise `mul * x + add` with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let tx = &self.nodes[x.0].value;
        let data: Vec<f64> = tx.data().iter().map(|v| mul * v + add).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let tracked = self.tracked1(x);
        self.push(value, Op::Affine { x, mul, add }, tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let data: Vec<f64> = tx.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let tracked = self.tracked1(x);
        self.push(value, Op::Relu(x), tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let data: Vec<f64> = tx.data().iter().map(|v| kernels::sigmoid_scalar(*v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let tracked = self.tracked1(x);
        self.push(value, Op::Sigmoid(x), tracked)
    }

    /// Row-wise softmax with an optional allow-mask. Rows with no allowed
    /// entries come out as all zeros and contribute no gradient.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        if tx.shape().len() != 2 {
            return Err(TensorError::NotAMatrix {
                op: "softmax_rows",
                shape: tx.shape().to_vec(),
            });
        }
        let (n, m) = (tx.rows(), tx.cols());
        if let Some(mk) = mask {
            if mk.rows() != n || mk.cols() != m {
                return Err(TensorError::DimMismatch {
                    op: "softmax_rows",
                    lhs: vec![n, m],
                    rhs: vec![mk.rows(), mk.cols()],
                });
            }
        }
        let (data, _) = kernels::softmax_rows(tx.data(), n, m, mask);
        let tracked = self.tracked1(x);
        Ok(self.push(
            Tensor::new(vec![n, m], data).unwrap(),
            Op::SoftmaxRows { x, mask: mask.cloned() },
            tracked,
        ))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        if tx.shape().len() != 2 {
            return Err(TensorError::NotAMatrix {
                op: "log_softmax_rows",
                shape: tx.shape().to_vec(),
            });
        }
        let (n, m) = (tx.rows(), tx.cols());
        let data = kernels::log_softmax_rows(tx.data(), n, m);
        let tracked = self.tracked1(x);
        Ok(self.push(
            Tensor::new(vec![n, m], data).unwrap(),
            Op::LogSoftmaxRows(x),
            tracked,
        ))
    }

    /// Per-row zero-mean unit-variance normalization followed by a
    /// learned per-column gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        if tx.shape().len() != 2 || tg.len() != tx.cols() || tb.len() != tx.cols() {
            return Err(TensorError::DimMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let (n, m) = (tx.rows(), tx.cols());
        let (data, _, _) = kernels::layer_norm_rows(tx.data(), n, m, tg.data(), tb.data(), eps);
        let tracked = self.tracked1(x) || self.tracked1(gain) || self.tracked1(bias);
        Ok(self.push(
            Tensor::new(vec![n, m], data).unwrap(),
            Op::LayerNorm { x, gain, bias, eps },
            tracked,
        ))
    }

    /// Exclusive running product along each row; entry 0 of every row is 1.
    pub fn exclusive_cumprod_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        if tx.shape().len() != 2 {
            return Err(TensorError::NotAMatrix {
                op: "exclusive_cumprod_rows",
                shape: tx.shape().to_vec(),
            });
        }
        let (n, m) = (tx.rows(), tx.cols());
        let data = kernels::exclusive_cumprod_rows(tx.data(), n, m);
        let tracked = self.tracked1(x);
        Ok(self.push(
            Tensor::new(vec![n, m], data).unwrap(),
            Op::ExclusiveCumprodRows(x),
            tracked,
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(TensorError::DimMismatch {
                op: "concat_rows",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let value = Tensor::new(vec![ta.rows() + tb.rows(), ta.cols()], data).unwrap();
        let tracked = self.tracked1(a) || self.tracked1(b);
        Ok(self.push(value, Op::ConcatRows(a, b), tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_cols" });
        }
        let n = self.nodes[parts[0].0].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape().len() != 2 || t.rows() != n {
                return Err(TensorError::DimMismatch {
                    op: "concat_cols",
                    lhs: vec![n],
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let t = &self.nodes[p.0].value;
            for i in 0..n {
                data[i * total + off..i * total + off + w].copy_from_slice(t.row(i));
            }
            off += w;
        }
        let tracked = parts.iter().any(|p| self.tracked1(*p));
        Ok(self.push(
            Tensor::new(vec![n, total], data).unwrap(),
            Op::ConcatCols(parts.to_vec()),
            tracked,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        if tx.shape().len() != 2 || start > end || end > tx.rows() {
            return Err(TensorError::DimMismatch {
                op: "slice_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let m = tx.cols();
        let data = tx.data()[start * m..end * m].to_vec();
        let tracked = self.tracked1(x);
        Ok(self.push(
            Tensor::new(vec![end - start, m], data).unwrap(),
            Op::SliceRows { x, start, end },
            tracked,
        ))
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        let expected: usize = shape.iter().product();
        if expected != tx.len() {
            return Err(TensorError::ShapeData {
                shape,
                expected,
                got: tx.len(),
            });
        }
        let value = Tensor::new(shape, tx.data().to_vec()).unwrap();
        let tracked = self.tracked1(x);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        if tx.shape().len() != 2 {
            return Err(TensorError::NotAMatrix {
                op: "transpose",
                shape: tx.shape().to_vec(),
            });
        }
        let (n, m) = (tx.rows(), tx.cols());
        let data = kernels::transpose(tx.data(), n, m);
        let tracked = self.tracked1(x);
        Ok(self.push(Tensor::new(vec![m, n], data).unwrap(), Op::Transpose(x), tracked))
    }

    /// Gather rows of `table` by index; the embedding lookup.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tt = &self.nodes[table.0].value;
        if tt.shape().len() != 2 {
            return Err(TensorError::NotAMatrix {
                op: "embed_rows",
                shape: tt.shape().to_vec(),
            });
        }
        let m = tt.cols();
        let mut data = Vec::with_capacity(ids.len() * m);
        for &id in ids {
            if id >= tt.rows() {
                return Err(TensorError::DimMismatch {
                    op: "embed_rows",
                    lhs: tt.shape().to_vec(),
                    rhs: vec![id],
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let tracked = self.tracked1(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), m], data).unwrap(),
            Op::EmbedRows { table, ids: ids.to_vec() },
            tracked,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let tracked = self.tracked1(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), tracked)
    }

    /// Stride-2 square convolution with symmetric zero padding.
    /// `x` is `(c_in, h, w)`, `w` is `(c_out, c_in, k, k)`, `b` is `(c_out)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var, TensorError> {
        let (tx, tw, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if tx.shape().len() != 3 || tw.shape().len() != 4 {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (c_in, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (c_out, k) = (tw.shape()[0], tw.shape()[2]);
        if tw.shape()[1] != c_in || tw.shape()[3] != k || tb.len() != c_out || h + 2 * pad < k {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (data, h_out, w_out) =
            kernels::conv2d(tx.data(), c_in, h, wd, tw.data(), c_out, k, pad, tb.data());
        let tracked = self.tracked1(x) || self.tracked1(w) || self.tracked1(b);
        Ok(self.push(
            Tensor::new(vec![c_out, h_out, w_out], data).unwrap(),
            Op::Conv2d { x, w, b, k, pad },
            tracked,
        ))
    }

    /// `(c, h, w)` to `(h, c*w)`: rows become time steps, channels and
    /// width flatten into features.
    pub fn flatten_chw(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        if tx.shape().len() != 3 {
            return Err(TensorError::DimMismatch {
                op: "flatten_chw",
                lhs: tx.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for t in 0..h {
                for x_ in 0..w {
                    data[t * (c * w) + ch * w + x_] = tx.data()[ch * h * w + t * w + x_];
                }
            }
        }
        let tracked = self.tracked1(x);
        Ok(self.push(
            Tensor::new(vec![h, c * w], data).unwrap(),
            Op::FlattenChw(x),
            tracked,
        ))
    }

    /// Inverted dropout; identity when `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Var {
        if rate == 0.0 {
            return x;
        }
        let tx = &self.nodes[x.0].value;
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..tx.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data: Vec<f64> = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let tracked = self.tracked1(x);
        self.push(value, Op::DropMask { x, mask }, tracked)
    }

    /// CTC negative log-likelihood node. Feasibility is checked by the
    /// caller in [`crate::ctc`]; this records the op on the tape.
    pub(crate) fn ctc_nll_node(&mut self, log_probs: Var, labels: Vec<usize>, nll: f64) -> Var {
        let tracked = self.tracked1(log_probs);
        self.push(
            Tensor::scalar(nll),
            Op::CtcNll { log_probs, labels },
            tracked,
        )
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from `loss`, which must be a tracked scalar.
    /// Gradients are then available through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        {
            let n = &self.nodes[loss.0];
            if n.value.len() != 1 {
                return Err(TensorError::NonScalarLoss {
                    shape: n.value.shape().to_vec(),
                });
            }
            if !n.tracked {
                return Err(TensorError::UntrackedBackward);
            }
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            if !nodes[i].tracked || grads[i].is_none() {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let g = rest[0].as_ref().unwrap().clone();
            let node = &nodes[i];

            let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
                if !nodes[v.0].tracked {
                    return;
                }
                let slot = &mut before[v.0];
                let buf = slot.get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                contrib(buf);
            };

            match &node.op {
                Op::Leaf | Op::Param | Op::StopGrad(_) => {}
                Op::Matmul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let bt = kernels::transpose(tb.data(), k, n);
                    let ga = kernels::matmul(&g, m, n, &bt, k);
                    acc(*a, &|buf| {
                        for (o, v) in buf.iter_mut().zip(&ga) {
                            *o += v;
                        }
                    });
                    let at = kernels::transpose(ta.data(), m, k);
                    let gb = kernels::matmul(&at, k, m, &g, n);
                    acc(*b, &|buf| {
                        for (o, v) in buf.iter_mut().zip(&gb) {
                            *o += v;
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &|buf| {
                        for (o, v) in buf.iter_mut().zip(&g) {
                            *o += v;
                        }
                    });
                    acc(*b, &|buf| {
                        for (o, v) in buf.iter_mut().zip(&g) {
                            *o += v;
                        }
                    });
                }
                Op::AddRow(x, row) => {
                    let m = nodes[row.0].value.len();
                    acc(*x, &|buf| {
                        for (o, v) in buf.iter_mut().zip(&g) {
                            *o += v;
                        }
                    });
                    acc(*row, &|buf| {
                        for (idx, v) in g.iter().enumerate() {
                            buf[idx % m] += v;
                        }
                    });
                }
                Op::AddScalar(x, s) => {
                    acc(*x, &|buf| {
                        for (o, v) in buf.iter_mut().zip(&g) {
                            *o += v;
                        }
                    });
                    let total: f64 = g.iter().sum();
                    acc(*s, &|buf| buf[0] += total);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(*a, &|buf| {
                        for idx in 0..buf.len() {
                            buf[idx] += g[idx] * tb.data()[idx];
                        }
                    });
                    acc(*b, &|buf| {
                        for idx in 0..buf.len() {
                            buf[idx] += g[idx] * ta.data()[idx];
                        }
                    });
                }
                Op::Affine { x, mul, .. } => {
                    let mul = *mul;
                    acc(*x, &|buf| {
                        for (o, v) in buf.iter_mut().zip(&g) {
                            *o += mul * v;
                        }
                    });
                }
                Op::Relu(x) => {
                    let tx = &nodes[x.0].value;
                    acc(*x, &|buf| {
                        for idx in 0..buf.len() {
                            if tx.data()[idx] > 0.0 {
                                buf[idx] += g[idx];
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let out = &node.value;
                    acc(*x, &|buf| {
                        for idx in 0..buf.len() {
                            let s = out.data()[idx];
                            buf[idx] += g[idx] * s * (1.0 - s);
                        }
                    });
                }
                Op::SoftmaxRows { x, mask } => {
                    let out = &node.value;
                    let (n, m) = (out.rows(), out.cols());
                    acc(*x, &|buf| {
                        for r in 0..n {
                            let orow = &out.data()[r * m..(r + 1) * m];
                            let grow = &g[r * m..(r + 1) * m];
                            let mut inner = 0.0;
                            for j in 0..m {
                                inner += grow[j] * orow[j];
                            }
                            for j in 0..m {
                                if mask.as_ref().map_or(true, |mk| mk.allowed(r, j)) {
                                    buf[r * m + j] += orow[j] * (grow[j] - inner);
                                }
                            }
                        }
                    });
                }
                Op::LogSoftmaxRows(x) => {
                    let out = &node.value;
                    let (n, m) = (out.rows(), out.cols());
                    acc(*x, &|buf| {
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            let gsum: f64 = grow.iter().sum();
                            for j in 0..m {
                                let p = out.data()[r * m + j].exp();
                                buf[r * m + j] += grow[j] - p * gsum;
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let tx = &nodes[x.0].value;
                    let tg = &nodes[gain.0].value;
                    let tb = &nodes[bias.0].value;
                    let (n, m) = (tx.rows(), tx.cols());
                    let (_, normed, inv_std) =
                        kernels::layer_norm_rows(tx.data(), n, m, tg.data(), tb.data(), *eps);
                    acc(*x, &|buf| {
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            let nrow = &normed[r * m..(r + 1) * m];
                            let mut mean_dxh = 0.0;
                            let mut mean_dxh_xh = 0.0;
                            for j in 0..m {
                                let dxh = grow[j] * tg.data()[j];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * nrow[j];
                            }
                            mean_dxh /= m as f64;
                            mean_dxh_xh /= m as f64;
                            for j in 0..m {
                                let dxh = grow[j] * tg.data()[j];
                                buf[r * m + j] +=
                                    inv_std[r] * (dxh - mean_dxh - nrow[j] * mean_dxh_xh);
                            }
                        }
                    });
                    acc(*gain, &|buf| {
                        for r in 0..n {
                            for j in 0..m {
                                buf[j] += g[r * m + j] * normed[r * m + j];
                            }
                        }
                    });
                    acc(*bias, &|buf| {
                        for r in 0..n {
                            for j in 0..m {
                                buf[j] += g[r * m + j];
                            }
                        }
                    });
                }
                Op::ExclusiveCumprodRows(x) => {
                    let tx = &nodes[x.0].value;
                    let out = &node.value;
                    let (n, m) = (tx.rows(), tx.cols());
                    // d out_j / d x_k = out_k * prod_{k<t<j} x_t for j > k;
                    // fold from the right so each row costs O(m).
                    acc(*x, &|buf| {
                        for r in 0..n {
                            let xrow = &tx.data()[r * m..(r + 1) * m];
                            let grow = &g[r * m..(r + 1) * m];
                            let orow = &out.data()[r * m..(r + 1) * m];
                            let mut suffix = 0.0;
                            for k in (0..m).rev() {
                                if k + 1 < m {
                                    suffix = grow[k + 1] + xrow[k + 1] * suffix;
                                }
                                buf[r * m + k] += orow[k] * suffix;
                            }
                        }
                    });
                }
                Op::ConcatRows(a, b) => {
                    let na = nodes[a.0].value.len();
                    acc(*a, &|buf| {
                        for idx in 0..na {
                            buf[idx] += g[idx];
                        }
                    });
                    acc(*b, &|buf| {
                        for (idx, o) in buf.iter_mut().enumerate() {
                            *o += g[na + idx];
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let n = node.value.rows();
                    let total = node.value.cols();
                    let mut off = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        let off_p = off;
                        acc(*p, &|buf| {
                            for r in 0..n {
                                for j in 0..w {
                                    buf[r * w + j] += g[r * total + off_p + j];
                                }
                            }
                        });
                        off += w;
                    }
                }
                Op::SliceRows { x, start, .. } => {
                    let m = nodes[x.0].value.cols();
                    let s = *start;
                    acc(*x, &|buf| {
                        for (idx, v) in g.iter().enumerate() {
                            buf[s * m + idx] += v;
                        }
                    });
                }
                Op::Reshape(x) => {
                    acc(*x, &|buf| {
                        for (o, v) in buf.iter_mut().zip(&g) {
                            *o += v;
                        }
                    });
                }
                Op::Transpose(x) => {
                    let (n, m) = (node.value.rows(), node.value.cols());
                    let gt = kernels::transpose(&g, n, m);
                    acc(*x, &|buf| {
                        for (o, v) in buf.iter_mut().zip(&gt) {
                            *o += v;
                        }
                    });
                }
                Op::EmbedRows { table, ids } => {
                    let m = nodes[table.0].value.cols();
                    acc(*table, &|buf| {
                        for (row, &id) in ids.iter().enumerate() {
                            for j in 0..m {
                                buf[id * m + j] += g[row * m + j];
                            }
                        }
                    });
                }
                Op::SumAll(x) => {
                    let gv = g[0];
                    acc(*x, &|buf| {
                        for o in buf.iter_mut() {
                            *o += gv;
                        }
                    });
                }
                Op::Conv2d { x, w, b, k, pad } => {
                    let tx = &nodes[x.0].value;
                    let tw = &nodes[w.0].value;
                    let (c_in, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                    let c_out = tw.shape()[0];
                    let (h_out, w_out) = (node.value.shape()[1], node.value.shape()[2]);
                    let (k, pad, stride) = (*k, *pad, 2usize);
                    acc(*b, &|buf| {
                        for co in 0..c_out {
                            for idx in 0..h_out * w_out {
                                buf[co] += g[co * h_out * w_out + idx];
                            }
                        }
                    });
                    acc(*w, &|buf| {
                        for co in 0..c_out {
                            for oy in 0..h_out {
                                for ox in 0..w_out {
                                    let gv = g[co * h_out * w_out + oy * w_out + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        for ky in 0..k {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..k {
                                                let ix =
                                                    (ox * stride + kx) as isize - pad as isize;
                                                if ix < 0 || ix >= wd as isize {
                                                    continue;
                                                }
                                                buf[((co * c_in + ci) * k + ky) * k + kx] += gv
                                                    * tx.data()[ci * h * wd
                                                        + iy as usize * wd
                                                        + ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                    acc(*x, &|buf| {
                        for co in 0..c_out {
                            for oy in 0..h_out {
                                for ox in 0..w_out {
                                    let gv = g[co * h_out * w_out + oy * w_out + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        for ky in 0..k {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..k {
                                                let ix =
                                                    (ox * stride + kx) as isize - pad as isize;
                                                if ix < 0 || ix >= wd as isize {
                                                    continue;
                                                }
                                                buf[ci * h * wd + iy as usize * wd + ix as usize] +=
                                                    gv * tw.data()
                                                        [((co * c_in + ci) * k + ky) * k + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::FlattenChw(x) => {
                    let tx = &nodes[x.0].value;
                    let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                    acc(*x, &|buf| {
                        for ch in 0..c {
                            for t in 0..h {
                                for xx in 0..w {
                                    buf[ch * h * w + t * w + xx] += g[t * (c * w) + ch * w + xx];
                                }
                            }
                        }
                    });
                }
                Op::DropMask { x, mask } => {
                    acc(*x, &|buf| {
                        for idx in 0..buf.len() {
                            buf[idx] += g[idx] * mask[idx];
                        }
                    });
                }
                Op::CtcNll { log_probs, labels } => {
                    let lp = &nodes[log_probs.0].value;
                    let post = ctc::label_posteriors(lp, labels);
                    let gv = g[0];
                    acc(*log_probs, &|buf| {
                        for idx in 0..buf.len() {
                            buf[idx] -= gv * post[idx];
                        }
                    });
                }
            }
        }
        Ok(())
    }
}
