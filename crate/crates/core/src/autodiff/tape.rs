//! The operation tape: forward ops record nodes, `backward` replays them.

use std::rc::Rc;

use rand::Rng;

use super::{ParamId, ParamSet, Tensor};

/// Floor applied inside `log` so NLL stays finite on degenerate inputs.
pub const LOG_FLOOR: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(TensorId, TensorId),
    /// matrix [r,c] + row vector [1,c] broadcast over rows
    AddRow(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Reshape(TensorId),
    Log(TensorId),
    Exp(TensorId),
    Tanh(TensorId),
    Relu(TensorId),
    Gelu(TensorId),
    Softmax(TensorId),
    /// row-wise softmax restricted to key positions where mask is true
    MaskedSoftmax(TensorId, Rc<Vec<bool>>),
    /// per-row 1/std saved from the forward pass
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        inv_std: Rc<Vec<f64>>,
    },
    GatherRows(TensorId, Rc<Vec<usize>>),
    SelectRow(TensorId, usize),
    SliceCols {
        x: TensorId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<TensorId>),
    SumAll(TensorId),
    MeanAll(TensorId),
    /// elementwise mean of same-shaped inputs
    MeanOf(Vec<TensorId>),
    /// elementwise multiply by a constant mask (dropout)
    MulMask(TensorId, Rc<Vec<f64>>),
}

struct Node {
    value: Tensor,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Define-by-run tape. Nodes are in topological order by construction:
/// every op's inputs were pushed before it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected a 2-D tensor, got shape {shape:?}");
    (shape[0], shape[1])
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let t = self.value(id);
        assert_eq!(t.numel(), 1, "expected scalar, got shape {:?}", t.shape);
        t.data[0]
    }

    /// Gradient of the last backward pass at `id`, if it was reached.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { value, op, grad: None });
        TensorId(self.nodes.len() - 1)
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf)
    }

    /// Lease a parameter onto the tape; `backward` will accumulate its
    /// gradient back into the owning [`ParamSet`].
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> TensorId {
        self.push(params.get(id).value.clone(), Op::Param(id))
    }

    // ── Elementwise and linear ops ───────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "add: shape mismatch {:?} vs {:?}", ta.shape, tb.shape);
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> TensorId {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let (r, c) = rows_cols(&ta.shape);
        assert_eq!(tr.numel(), c, "add_row: row length {} vs {} cols", tr.numel(), c);
        let mut data = ta.data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += tr.data[j];
            }
        }
        self.push(Tensor { shape: ta.shape.clone(), data }, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "sub: shape mismatch {:?} vs {:?}", ta.shape, tb.shape);
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "mul: shape mismatch {:?} vs {:?}", ta.shape, tb.shape);
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|x| x * c).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = rows_cols(&ta.shape);
        let (k2, n) = rows_cols(&tb.shape);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut data = vec![0.0; m * n];
        matmul_raw(&ta.data, &tb.data, m, k, n, &mut data);
        self.push(Tensor { shape: vec![m, n], data }, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let (r, c) = rows_cols(&ta.shape);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ta.data[i * c + j];
            }
        }
        self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        let ta = &self.nodes[a.0].value;
        assert_eq!(
            shape.iter().product::<usize>(),
            ta.numel(),
            "reshape: {:?} incompatible with {} elements",
            shape,
            ta.numel()
        );
        let data = ta.data.clone();
        self.push(Tensor { shape, data }, Op::Reshape(a))
    }

    // ── Nonlinearities ───────────────────────────────────────────────

    /// Natural log with the input floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|&x| x.max(LOG_FLOOR).ln()).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Log(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|&x| x.exp()).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|&x| x.tanh()).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|&x| x.max(0.0)).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Relu(a))
    }

    /// tanh-approximation GELU.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|&x| gelu_scalar(x)).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::Gelu(a))
    }

    /// Row-wise softmax, numerically stabilized by subtracting the row max.
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let (r, c) = rows_cols(&ta.shape);
        assert!(c > 0, "softmax: empty rows");
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &ta.data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        self.push(Tensor { shape: ta.shape.clone(), data }, Op::Softmax(a))
    }

    /// Row-wise softmax over key positions where `mask[j]` is true; masked
    /// positions get probability zero. Every row must have at least one
    /// unmasked key.
    pub fn masked_softmax(&mut self, a: TensorId, mask: Rc<Vec<bool>>) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let (r, c) = rows_cols(&ta.shape);
        assert_eq!(mask.len(), c, "masked_softmax: mask length {} vs {} keys", mask.len(), c);
        assert!(mask.iter().any(|&m| m), "masked_softmax: all keys masked");
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &ta.data[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                if mask[j] {
                    let e = (row[j] - max).exp();
                    data[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        self.push(Tensor { shape: ta.shape.clone(), data }, Op::MaskedSoftmax(a, mask))
    }

    /// Per-row layer norm with learnable gain/bias vectors.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let (r, c) = rows_cols(&tx.shape);
        assert_eq!(tg.numel(), c, "layer_norm: gamma length");
        assert_eq!(tb.numel(), c, "layer_norm: beta length");
        let mut data = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &tx.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                data[i * c + j] = tg.data[j] * (row[j] - mean) * is + tb.data[j];
            }
        }
        self.push(
            Tensor { shape: tx.shape.clone(), data },
            Op::LayerNorm { x, gamma, beta, inv_std: Rc::new(inv_std) },
        )
    }

    // ── Structural ops ───────────────────────────────────────────────

    /// Gather rows of a 2-D table by index (embedding lookup).
    pub fn gather_rows(&mut self, table: TensorId, indices: Rc<Vec<usize>>) -> TensorId {
        let tt = &self.nodes[table.0].value;
        let (r, c) = rows_cols(&tt.shape);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &ix in indices.iter() {
            assert!(ix < r, "gather_rows: index {ix} out of range (table has {r} rows)");
            data.extend_from_slice(&tt.data[ix * c..(ix + 1) * c]);
        }
        let shape = vec![indices.len(), c];
        self.push(Tensor { shape, data }, Op::GatherRows(table, indices))
    }

    /// Extract one row as a [1, c] tensor.
    pub fn select_row(&mut self, a: TensorId, row: usize) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let (r, c) = rows_cols(&ta.shape);
        assert!(row < r, "select_row: row {row} out of range ({r} rows)");
        let data = ta.data[row * c..(row + 1) * c].to_vec();
        self.push(Tensor { shape: vec![1, c], data }, Op::SelectRow(a, row))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let (r, c) = rows_cols(&ta.shape);
        assert!(start + len <= c, "slice_cols: [{start}, {}) out of {c} cols", start + len);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ta.data[i * c + start..i * c + start + len]);
        }
        self.push(Tensor { shape: vec![r, len], data }, Op::SliceCols { x: a, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let r = rows_cols(&self.nodes[parts[0].0].value.shape).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = rows_cols(&self.nodes[p.0].value.shape);
                assert_eq!(pr, r, "concat_cols: row count mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.nodes[p.0].value.data[i * w..(i + 1) * w];
                data.extend_from_slice(src);
            }
        }
        self.push(Tensor { shape: vec![r, total], data }, Op::ConcatCols(parts.to_vec()))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let s = ta.data.iter().sum::<f64>() / ta.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    /// Elementwise mean of same-shaped tensors.
    pub fn mean_of(&mut self, ids: &[TensorId]) -> TensorId {
        assert!(!ids.is_empty(), "mean_of: no inputs");
        let shape = self.nodes[ids[0].0].value.shape.clone();
        let n = shape.iter().product::<usize>();
        let mut data = vec![0.0; n];
        for &id in ids {
            let t = &self.nodes[id.0].value;
            assert_eq!(t.shape, shape, "mean_of: shape mismatch");
            for (d, v) in data.iter_mut().zip(&t.data) {
                *d += v;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        self.push(Tensor { shape, data }, Op::MeanOf(ids.to_vec()))
    }

    // ── Dropout ──────────────────────────────────────────────────────

    /// Inverted dropout: retained entries scaled by 1/(1-rate) at train
    /// time, so inference needs no rescaling. Rate 0 is the identity.
    pub fn dropout(&mut self, a: TensorId, rate: f64, rng: &mut impl Rng) -> TensorId {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        if rate == 0.0 {
            return a;
        }
        let n = self.nodes[a.0].value.numel();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.apply_mask(a, Rc::new(mask))
    }

    /// Dropout with a frozen mask; deterministic given the mask.
    pub fn apply_mask(&mut self, a: TensorId, mask: Rc<Vec<f64>>) -> TensorId {
        let ta = &self.nodes[a.0].value;
        assert_eq!(mask.len(), ta.numel(), "apply_mask: mask length mismatch");
        let data = ta.data.iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let shape = ta.shape.clone();
        self.push(Tensor { shape, data }, Op::MulMask(a, mask))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate
    /// additively into `params`; call [`ParamSet::zero_grad`] between
    /// optimizer steps.
    pub fn backward(&mut self, loss: TensorId, params: &mut ParamSet) {
        assert!(!self.nodes.is_empty(), "backward before any forward op");
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[loss.0].value.shape
        );
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Param(pid) => params.accumulate_grad(pid, &grad),
                Op::Add(a, b) => {
                    self.accum(a, &grad);
                    self.accum(b, &grad);
                }
                Op::AddRow(a, row) => {
                    self.accum(a, &grad);
                    let c = self.nodes[row.0].value.numel();
                    let r = grad.len() / c;
                    let mut rg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            rg[j] += grad[i * c + j];
                        }
                    }
                    self.accum(row, &rg);
                }
                Op::Sub(a, b) => {
                    self.accum(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.accum(b, &neg);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[b.0].value.data)
                        .map(|(g, v)| g * v)
                        .collect();
                    let gb: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].value.data)
                        .map(|(g, v)| g * v)
                        .collect();
                    self.accum(a, &ga);
                    self.accum(b, &gb);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.accum(a, &ga);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = rows_cols(&self.nodes[a.0].value.shape);
                    let n = self.nodes[b.0].value.shape[1];
                    // dA = dC @ B^T
                    let bdata = &self.nodes[b.0].value.data;
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bdata[p * n + j];
                        }
                    }
                    let mut ga = vec![0.0; m * k];
                    matmul_raw(&grad, &bt, m, n, k, &mut ga);
                    // dB = A^T @ dC
                    let adata = &self.nodes[a.0].value.data;
                    let mut at = vec![0.0; k * m];
                    for i in 0..m {
                        for p in 0..k {
                            at[p * m + i] = adata[i * k + p];
                        }
                    }
                    let mut gb = vec![0.0; k * n];
                    matmul_raw(&at, &grad, k, m, n, &mut gb);
                    self.accum(a, &ga);
                    self.accum(b, &gb);
                }
                Op::Transpose(a) => {
                    let (r, c) = rows_cols(&self.nodes[a.0].value.shape);
                    // grad has shape [c, r]
                    let mut ga = vec![0.0; r * c];
                    for i in 0..c {
                        for j in 0..r {
                            ga[j * c + i] = grad[i * r + j];
                        }
                    }
                    self.accum(a, &ga);
                }
                Op::Reshape(a) => self.accum(a, &grad),
                Op::Log(a) => {
                    let ga: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].value.data)
                        .map(|(g, &x)| if x > LOG_FLOOR { g / x } else { 0.0 })
                        .collect();
                    self.accum(a, &ga);
                }
                Op::Exp(a) => {
                    let ga: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[i].value.data)
                        .map(|(g, y)| g * y)
                        .collect();
                    self.accum(a, &ga);
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[i].value.data)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    self.accum(a, &ga);
                }
                Op::Relu(a) => {
                    let ga: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].value.data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accum(a, &ga);
                }
                Op::Gelu(a) => {
                    let ga: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].value.data)
                        .map(|(g, &x)| g * gelu_grad_scalar(x))
                        .collect();
                    self.accum(a, &ga);
                }
                Op::Softmax(a) => {
                    let s = &self.nodes[i].value;
                    let (r, c) = rows_cols(&s.shape);
                    let mut ga = vec![0.0; r * c];
                    for row in 0..r {
                        let sr = &s.data[row * c..(row + 1) * c];
                        let gr = &grad[row * c..(row + 1) * c];
                        let dot: f64 = sr.iter().zip(gr).map(|(s, g)| s * g).sum();
                        for j in 0..c {
                            ga[row * c + j] = sr[j] * (gr[j] - dot);
                        }
                    }
                    self.accum(a, &ga);
                }
                Op::MaskedSoftmax(a, mask) => {
                    let s = &self.nodes[i].value;
                    let (r, c) = rows_cols(&s.shape);
                    let mut ga = vec![0.0; r * c];
                    for row in 0..r {
                        let sr = &s.data[row * c..(row + 1) * c];
                        let gr = &grad[row * c..(row + 1) * c];
                        let dot: f64 = sr.iter().zip(gr).map(|(s, g)| s * g).sum();
                        for j in 0..c {
                            if mask[j] {
                                ga[row * c + j] = sr[j] * (gr[j] - dot);
                            }
                        }
                    }
                    self.accum(a, &ga);
                }
                Op::LayerNorm { x, gamma, beta, inv_std } => {
                    let tx = &self.nodes[x.0].value;
                    let (r, c) = rows_cols(&tx.shape);
                    let gdata = self.nodes[gamma.0].value.data.clone();
                    let mut gx = vec![0.0; r * c];
                    let mut ggamma = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for row in 0..r {
                        let xr = &tx.data[row * c..(row + 1) * c];
                        let gr = &grad[row * c..(row + 1) * c];
                        let mean = xr.iter().sum::<f64>() / c as f64;
                        let is = inv_std[row];
                        // xhat = (x - mean) * inv_std
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let xhat = (xr[j] - mean) * is;
                            let d = gr[j] * gdata[j];
                            sum_d += d;
                            sum_dx += d * xhat;
                            ggamma[j] += gr[j] * xhat;
                            gbeta[j] += gr[j];
                        }
                        let inv_c = 1.0 / c as f64;
                        for j in 0..c {
                            let xhat = (xr[j] - mean) * is;
                            let d = gr[j] * gdata[j];
                            gx[row * c + j] = is * (d - sum_d * inv_c - xhat * sum_dx * inv_c);
                        }
                    }
                    self.accum(x, &gx);
                    self.accum(gamma, &ggamma);
                    self.accum(beta, &gbeta);
                }
                Op::GatherRows(table, indices) => {
                    let (r, c) = rows_cols(&self.nodes[table.0].value.shape);
                    let mut gt = vec![0.0; r * c];
                    for (pos, &ix) in indices.iter().enumerate() {
                        for j in 0..c {
                            gt[ix * c + j] += grad[pos * c + j];
                        }
                    }
                    self.accum(table, &gt);
                }
                Op::SelectRow(a, row) => {
                    let (r, c) = rows_cols(&self.nodes[a.0].value.shape);
                    let mut ga = vec![0.0; r * c];
                    ga[row * c..(row + 1) * c].copy_from_slice(&grad);
                    self.accum(a, &ga);
                }
                Op::SliceCols { x, start, len } => {
                    let (r, c) = rows_cols(&self.nodes[x.0].value.shape);
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..len {
                            gx[i * c + start + j] = grad[i * len + j];
                        }
                    }
                    self.accum(x, &gx);
                }
                Op::ConcatCols(parts) => {
                    let r = rows_cols(&self.nodes[i].value.shape).0;
                    let total = self.nodes[i].value.shape[1];
                    let mut offset = 0;
                    for &p in &parts {
                        let w = self.nodes[p.0].value.shape[1];
                        let mut gp = vec![0.0; r * w];
                        for row in 0..r {
                            for j in 0..w {
                                gp[row * w + j] = grad[row * total + offset + j];
                            }
                        }
                        self.accum(p, &gp);
                        offset += w;
                    }
                }
                Op::SumAll(a) => {
                    let n = self.nodes[a.0].value.numel();
                    let ga = vec![grad[0]; n];
                    self.accum(a, &ga);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a.0].value.numel();
                    let ga = vec![grad[0] / n as f64; n];
                    self.accum(a, &ga);
                }
                Op::MeanOf(ids) => {
                    let inv = 1.0 / ids.len() as f64;
                    let ga: Vec<f64> = grad.iter().map(|g| g * inv).collect();
                    for &id in &ids {
                        self.accum(id, &ga);
                    }
                }
                Op::MulMask(a, mask) => {
                    let ga: Vec<f64> = grad.iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
                    self.accum(a, &ga);
                }
            }
        }
    }

    fn accum(&mut self, id: TensorId, grad: &[f64]) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => node.grad = Some(grad.to_vec()),
        }
    }
}
