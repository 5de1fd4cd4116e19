use super::Tensor;
use crate::error::{Error, Result};
use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`]. Copyable; only valid for the
/// tape (and tape generation) that produced it.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    tape: u64,
    idx: usize,
}

struct Node {
    value: Tensor,
    requires: bool,
    is_param: bool,
    back: Back,
}

enum Back {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Softplus(usize),
    Phi1(usize),
    MatMul {
        a: usize,
        b: usize,
        meta: MatMeta,
    },
    Transpose2d(usize),
    SoftmaxLast(usize),
    LeakyRelu(usize, f64),
    SumAxis {
        a: usize,
        axis: usize,
    },
    MeanAxis {
        a: usize,
        axis: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    ConcatLast {
        a: usize,
        b: usize,
        split: usize,
    },
    GatherRows {
        a: usize,
        idx: Arc<Vec<usize>>,
    },
    MaxGroups {
        a: usize,
        /// absolute input row chosen per output element
        argmax: Vec<usize>,
    },
    AddRow {
        a: usize,
        b: usize,
    },
    MulCol {
        a: usize,
        v: usize,
    },
    MulMask {
        a: usize,
        mask: Tensor,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SsmScan {
        a_bar: usize,
        b_bar: usize,
        c: usize,
        x: usize,
        /// h_0..h_n, each [d, s]
        h_hist: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        label: usize,
        probs: Vec<f64>,
    },
}

struct MatMeta {
    batch: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
    m: usize,
    p: usize,
    n: usize,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

/// Records primitive operations during a forward pass and replays them in
/// reverse to populate gradients. One tape per forward pass, confined to a
/// single thread; parameters may be registered on many tapes concurrently.
pub struct Tape {
    id: RefCell<u64>,
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: RefCell::new(TAPE_COUNTER.fetch_add(1, Ordering::Relaxed)),
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                consumed: false,
            }),
        }
    }

    /// Drop all recorded state and invalidate outstanding `Var`s.
    pub fn reset(&self) {
        *self.id.borrow_mut() = TAPE_COUNTER.fetch_add(1, Ordering::Relaxed);
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.grads.clear();
        inner.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != *self.id.borrow() {
            return Err(Error::Tape(
                "variable belongs to a different tape or a reset generation".into(),
            ));
        }
        Ok(())
    }

    fn push(&self, value: Tensor, requires: bool, is_param: bool, back: Back) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            requires,
            is_param,
            back,
        });
        Var {
            tape: *self.id.borrow(),
            idx: inner.nodes.len() - 1,
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.idx].requires
    }

    /// Register a trainable leaf. Backward guarantees it a gradient buffer
    /// (zeros when unreachable from the loss).
    pub fn param(&self, t: &Tensor) -> Var {
        self.push(t.clone(), true, true, Back::Leaf)
    }

    /// Register a non-trainable leaf.
    pub fn constant(&self, t: &Tensor) -> Var {
        self.push(t.clone(), false, false, Back::Leaf)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.inner.borrow().nodes[v.idx].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.idx].value.shape().to_vec()
    }

    /// Gradient of the last backward pass with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Result<Option<Tensor>> {
        self.check(v)?;
        let inner = self.inner.borrow();
        if !inner.consumed {
            return Err(Error::Tape("grad requested before backward".into()));
        }
        Ok(inner.grads.get(v.idx).cloned().flatten())
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Tensor, Tensor)> {
        self.check(a)?;
        self.check(b)?;
        let inner = self.inner.borrow();
        let ta = inner.nodes[a.idx].value.clone();
        let tb = inner.nodes[b.idx].value.clone();
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok((ta, tb))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same_shape("add", a, b)?;
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, req, false, Back::Add(a.idx, b.idx)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same_shape("sub", a, b)?;
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, req, false, Back::Sub(a.idx, b.idx)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.binary_same_shape("mul", a, b)?;
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, req, false, Back::Mul(a.idx, b.idx)))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let ta = self.value(a);
        let out = ta.map(|x| x + c);
        Ok(self.push(out, self.requires(a), false, Back::AddScalar(a.idx)))
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let ta = self.value(a);
        let out = ta.map(|x| x * c);
        Ok(self.push(out, self.requires(a), false, Back::MulScalar(a.idx, c)))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(f64::exp);
        Ok(self.push(out, self.requires(a), false, Back::Exp(a.idx)))
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(softplus_val);
        Ok(self.push(out, self.requires(a), false, Back::Softplus(a.idx)))
    }

    /// (e^z − 1)/z elementwise, with the series limit below |z| = 1e-6.
    /// This is the zero-order-hold input factor.
    pub fn phi1(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(phi1_val);
        Ok(self.push(out, self.requires(a), false, Back::Phi1(a.idx)))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Result<Var> {
        self.check(a)?;
        if !(0.0..1.0).contains(&slope) || slope == 0.0 {
            return Err(Error::Config(format!(
                "leaky_relu slope must lie in (0,1), got {slope}"
            )));
        }
        let out = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        Ok(self.push(out, self.requires(a), false, Back::LeakyRelu(a.idx, slope)))
    }

    // ── matrix ops ──────────────────────────────────────────────────────

    /// Batched matrix product. Leading batch extents must agree or
    /// broadcast from 1 (missing dims count as 1).
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let meta = mat_meta(ta.shape(), tb.shape())?;
        let batch_n: usize = meta.batch.iter().product();
        let mut data = vec![0.0; batch_n * meta.m * meta.n];
        for bi in 0..batch_n {
            let (ai, bj) = meta.map_batch(bi);
            mm(
                &ta.data()[ai * meta.m * meta.p..],
                &tb.data()[bj * meta.p * meta.n..],
                meta.m,
                meta.p,
                meta.n,
                &mut data[bi * meta.m * meta.n..(bi + 1) * meta.m * meta.n],
            );
        }
        let mut shape = meta.batch.clone();
        shape.push(meta.m);
        shape.push(meta.n);
        let out = Tensor::new(shape, data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(
            out,
            req,
            false,
            Back::MatMul {
                a: a.idx,
                b: b.idx,
                meta,
            },
        ))
    }

    /// Swap the two axes of a 2-D tensor.
    pub fn transpose2d(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose2d",
                lhs: ta.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ta.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        Ok(self.push(out, self.requires(a), false, Back::Transpose2d(a.idx)))
    }

    /// Row-wise affine map x·W + b.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    // ── softmax / losses ────────────────────────────────────────────────

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_lastdim(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let ta = self.value(a);
        if ta.shape().last().copied().unwrap_or(0) == 0 {
            return Err(Error::Shape {
                op: "softmax_lastdim",
                lhs: ta.shape().to_vec(),
                rhs: vec![1],
            });
        }
        if !ta.all_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let d = *ta.shape().last().unwrap();
        let rows = ta.numel() / d;
        let mut data = vec![0.0; ta.numel()];
        for r in 0..rows {
            let x = &ta.data()[r * d..(r + 1) * d];
            let out = &mut data[r * d..(r + 1) * d];
            let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(x) {
                *o = (v - mx).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, self.requires(a), false, Back::SoftmaxLast(a.idx)))
    }

    /// Softmax cross-entropy between a logit vector and a class index.
    pub fn cross_entropy(&self, logits: Var, label: usize) -> Result<Var> {
        self.check(logits)?;
        let tl = self.value(logits);
        if tl.rank() != 1 {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![0],
            });
        }
        let c = tl.numel();
        if label >= c {
            return Err(Error::Config(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        if !tl.all_finite() {
            return Err(Error::Numeric("cross_entropy logits are not finite".into()));
        }
        let x = tl.data();
        let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs = vec![0.0; c];
        let mut sum = 0.0;
        for (p, &v) in probs.iter_mut().zip(x) {
            *p = (v - mx).exp();
            sum += *p;
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
        let loss = mx + sum.ln() - x[label];
        let out = Tensor::scalar(loss);
        Ok(self.push(
            out,
            self.requires(logits),
            false,
            Back::CrossEntropy {
                logits: logits.idx,
                label,
                probs,
            },
        ))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check(a)?;
        let ta = self.value(a);
        if axis >= ta.rank() {
            return Err(Error::Shape {
                op: "reduce_axis",
                lhs: ta.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let (outer, mid, inner) = split_axis(ta.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    data[o * inner + i] += ta.data()[base + i];
                }
            }
        }
        if mean {
            for v in data.iter_mut() {
                *v /= mid as f64;
            }
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, data)?;
        let back = if mean {
            Back::MeanAxis { a: a.idx, axis }
        } else {
            Back::SumAxis { a: a.idx, axis }
        };
        Ok(self.push(out, self.requires(a), false, back))
    }

    pub fn sum_all(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let ta = self.value(a);
        let out = Tensor::scalar(ta.data().iter().sum());
        Ok(self.push(out, self.requires(a), false, Back::SumAll(a.idx)))
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let ta = self.value(a);
        let out = Tensor::scalar(ta.data().iter().sum::<f64>() / ta.numel() as f64);
        Ok(self.push(out, self.requires(a), false, Back::MeanAll(a.idx)))
    }

    // ── structural ops ──────────────────────────────────────────────────

    /// Concatenate along the last axis; all other extents must match.
    pub fn concat_lastdim(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.rank() != tb.rank()
            || ta.rank() == 0
            || ta.shape()[..ta.rank() - 1] != tb.shape()[..tb.rank() - 1]
        {
            return Err(Error::Shape {
                op: "concat_lastdim",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let la = *ta.shape().last().unwrap();
        let lb = *tb.shape().last().unwrap();
        let rows = ta.numel() / la;
        let mut data = Vec::with_capacity(rows * (la + lb));
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * la..(r + 1) * la]);
            data.extend_from_slice(&tb.data()[r * lb..(r + 1) * lb]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = la + lb;
        let out = Tensor::new(shape, data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(
            out,
            req,
            false,
            Back::ConcatLast {
                a: a.idx,
                b: b.idx,
                split: la,
            },
        ))
    }

    /// Gather rows of a 2-D tensor by index list (repeats allowed).
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        self.check(a)?;
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        let (m, d) = (ta.shape()[0], ta.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Config(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&ta.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(
            out,
            self.requires(a),
            false,
            Back::GatherRows {
                a: a.idx,
                idx: Arc::new(idx.to_vec()),
            },
        ))
    }

    /// Elementwise max over consecutive groups of `group` rows.
    /// Input [g·group, d] → output [g, d]; ties resolve to the earliest row.
    pub fn max_over_groups(&self, a: Var, group: usize) -> Result<Var> {
        self.check(a)?;
        let ta = self.value(a);
        if ta.rank() != 2 || group == 0 || ta.shape()[0] % group != 0 {
            return Err(Error::Shape {
                op: "max_over_groups",
                lhs: ta.shape().to_vec(),
                rhs: vec![group],
            });
        }
        let (rows, d) = (ta.shape()[0], ta.shape()[1]);
        let g = rows / group;
        let mut data = vec![f64::NEG_INFINITY; g * d];
        let mut argmax = vec![0usize; g * d];
        for gi in 0..g {
            for r in 0..group {
                let row = gi * group + r;
                for c in 0..d {
                    let v = ta.data()[row * d + c];
                    if v > data[gi * d + c] {
                        data[gi * d + c] = v;
                        argmax[gi * d + c] = row;
                    }
                }
            }
        }
        let out = Tensor::new(vec![g, d], data)?;
        Ok(self.push(
            out,
            self.requires(a),
            false,
            Back::MaxGroups { a: a.idx, argmax },
        ))
    }

    /// Broadcast-add a length-d vector to every row of x ([.., d]).
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(b)?;
        let tx = self.value(x);
        let tb = self.value(b);
        let d = tx.shape().last().copied().unwrap_or(0);
        if tb.rank() != 1 || tb.numel() != d {
            return Err(Error::Shape {
                op: "add_row",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[i % d];
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let req = self.requires(x) || self.requires(b);
        Ok(self.push(out, req, false, Back::AddRow { a: x.idx, b: b.idx }))
    }

    /// Scale each row r of x ([r, c]) by v[r].
    pub fn mul_col(&self, x: Var, v: Var) -> Result<Var> {
        self.check(x)?;
        self.check(v)?;
        let tx = self.value(x);
        let tv = self.value(v);
        if tx.rank() != 2 || tv.rank() != 1 || tv.numel() != tx.shape()[0] {
            return Err(Error::Shape {
                op: "mul_col",
                lhs: tx.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let s = tv.data()[i];
            for j in 0..c {
                data[i * c + j] = tx.data()[i * c + j] * s;
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        let req = self.requires(x) || self.requires(v);
        Ok(self.push(out, req, false, Back::MulCol { a: x.idx, v: v.idx }))
    }

    /// Apply a fixed elementwise mask (inverted-dropout application).
    pub fn mul_mask(&self, a: Var, mask: &Tensor) -> Result<Var> {
        self.check(a)?;
        let ta = self.value(a);
        if ta.shape() != mask.shape() {
            return Err(Error::Shape {
                op: "mul_mask",
                lhs: ta.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let data: Vec<f64> = ta.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            self.requires(a),
            false,
            Back::MulMask {
                a: a.idx,
                mask: mask.clone(),
            },
        ))
    }

    /// Per-row standardization over the last axis with learned scale/shift.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let tx = self.value(x);
        let tg = self.value(gamma);
        let tb = self.value(beta);
        let d = tx.shape().last().copied().unwrap_or(0);
        if tg.numel() != d || tb.numel() != d || d == 0 {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.numel() / d;
        let mut data = vec![0.0; tx.numel()];
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xr = &tx.data()[r * d..(r + 1) * d];
            let mu = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (xr[c] - mu) * is;
                xhat[r * d + c] = xh;
                data[r * d + c] = tg.data()[c] * xh + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            out,
            req,
            false,
            Back::LayerNorm {
                x: x.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                xhat,
                inv_std,
            },
        ))
    }

    /// Diagonal state-space recurrence over a node sequence.
    ///
    /// With per-channel diagonal operators `a_bar`, `b_bar`, `c` of shape
    /// [d, s] and inputs x of shape [n, d]:
    ///   h_j = a_bar ⊙ h_{j−1} + b_bar ⊙ x_j,   h_0 = 0
    ///   y_j = Σ_s c ⊙ h_j + x_j
    pub fn ssm_scan(&self, a_bar: Var, b_bar: Var, c: Var, x: Var) -> Result<Var> {
        self.check(a_bar)?;
        self.check(b_bar)?;
        self.check(c)?;
        self.check(x)?;
        let tab = self.value(a_bar);
        let tbb = self.value(b_bar);
        let tc = self.value(c);
        let tx = self.value(x);
        if tab.rank() != 2 || tab.shape() != tbb.shape() || tab.shape() != tc.shape() {
            return Err(Error::Shape {
                op: "ssm_scan",
                lhs: tab.shape().to_vec(),
                rhs: tbb.shape().to_vec(),
            });
        }
        let (d, s) = (tab.shape()[0], tab.shape()[1]);
        if tx.rank() != 2 || tx.shape()[1] != d {
            return Err(Error::Shape {
                op: "ssm_scan",
                lhs: tx.shape().to_vec(),
                rhs: vec![0, d],
            });
        }
        let n = tx.shape()[0];
        let ds = d * s;
        let mut h = vec![0.0; ds];
        let mut h_hist = vec![0.0; (n + 1) * ds];
        let mut y = vec![0.0; n * d];
        for j in 0..n {
            for di in 0..d {
                let xv = tx.data()[j * d + di];
                let base = di * s;
                let mut acc = 0.0;
                for si in 0..s {
                    let idx = base + si;
                    h[idx] = tab.data()[idx] * h[idx] + tbb.data()[idx] * xv;
                    acc += tc.data()[idx] * h[idx];
                }
                y[j * d + di] = acc + xv;
            }
            h_hist[(j + 1) * ds..(j + 2) * ds].copy_from_slice(&h);
        }
        let out = Tensor::new(vec![n, d], y)?;
        let req =
            self.requires(a_bar) || self.requires(b_bar) || self.requires(c) || self.requires(x);
        Ok(self.push(
            out,
            req,
            false,
            Back::SsmScan {
                a_bar: a_bar.idx,
                b_bar: b_bar.idx,
                c: c.idx,
                x: x.idx,
                h_hist,
            },
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates gradients for every node
    /// reachable from the loss and zero-fills the rest of the registered
    /// parameters. A second call without `reset` is an error.
    pub fn backward(&self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; reset before reuse".into(),
            ));
        }
        {
            let node = &inner.nodes[loss.idx];
            if node.value.numel() != 1 {
                return Err(Error::Tape(format!(
                    "loss must be scalar, got shape {:?}",
                    node.value.shape()
                )));
            }
            if !node.requires {
                return Err(Error::Tape(
                    "loss is detached from every tracked input".into(),
                ));
            }
        }

        let TapeInner { nodes, grads, .. } = &mut *inner;
        let mut buf: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        buf[loss.idx] = Some(vec![1.0]);

        for i in (0..=loss.idx).rev() {
            if buf[i].is_none() || !nodes[i].requires {
                continue;
            }
            let g = buf[i].take().unwrap();
            backprop_node(nodes, i, &g, &mut buf);
            buf[i] = Some(g);
        }

        grads.clear();
        grads.resize(nodes.len(), None);
        for (i, b) in buf.into_iter().enumerate() {
            let node = &nodes[i];
            if !node.requires {
                continue;
            }
            match b {
                Some(g) => {
                    grads[i] = Some(
                        Tensor::new(node.value.shape().to_vec(), g)
                            .expect("grad buffer matches node shape"),
                    );
                }
                None if node.is_param => {
                    grads[i] = Some(Tensor::zeros(node.value.shape()));
                }
                None => {}
            }
        }
        inner.consumed = true;
        Ok(())
    }
}

fn acc<'a>(buf: &'a mut [Option<Vec<f64>>], idx: usize, n: usize) -> &'a mut [f64] {
    buf[idx].get_or_insert_with(|| vec![0.0; n])
}

#[allow(clippy::needless_range_loop)]
fn backprop_node(nodes: &[Node], i: usize, g: &[f64], buf: &mut [Option<Vec<f64>>]) {
    let req = |j: usize| nodes[j].requires;
    let len = |j: usize| nodes[j].value.numel();
    match &nodes[i].back {
        Back::Leaf => {}
        Back::Add(a, b) => {
            if req(*a) {
                let ga = acc(buf, *a, len(*a));
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            if req(*b) {
                let gb = acc(buf, *b, len(*b));
                for (x, y) in gb.iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
        Back::Sub(a, b) => {
            if req(*a) {
                let ga = acc(buf, *a, len(*a));
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            if req(*b) {
                let gb = acc(buf, *b, len(*b));
                for (x, y) in gb.iter_mut().zip(g) {
                    *x -= y;
                }
            }
        }
        Back::Mul(a, b) => {
            if req(*a) {
                let vb = nodes[*b].value.clone();
                let ga = acc(buf, *a, len(*a));
                for k in 0..g.len() {
                    ga[k] += g[k] * vb.data()[k];
                }
            }
            if req(*b) {
                let va = nodes[*a].value.clone();
                let gb = acc(buf, *b, len(*b));
                for k in 0..g.len() {
                    gb[k] += g[k] * va.data()[k];
                }
            }
        }
        Back::AddScalar(a) => {
            if req(*a) {
                let ga = acc(buf, *a, len(*a));
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
        Back::MulScalar(a, c) => {
            if req(*a) {
                let c = *c;
                let ga = acc(buf, *a, len(*a));
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += c * y;
                }
            }
        }
        Back::Exp(a) => {
            if req(*a) {
                let out = nodes[i].value.clone();
                let ga = acc(buf, *a, len(*a));
                for k in 0..g.len() {
                    ga[k] += g[k] * out.data()[k];
                }
            }
        }
        Back::Softplus(a) => {
            if req(*a) {
                let va = nodes[*a].value.clone();
                let ga = acc(buf, *a, len(*a));
                for k in 0..g.len() {
                    ga[k] += g[k] * sigmoid(va.data()[k]);
                }
            }
        }
        Back::Phi1(a) => {
            if req(*a) {
                let va = nodes[*a].value.clone();
                let ga = acc(buf, *a, len(*a));
                for k in 0..g.len() {
                    ga[k] += g[k] * phi1_deriv(va.data()[k]);
                }
            }
        }
        Back::MatMul { a, b, meta } => {
            let batch_n: usize = meta.batch.iter().product();
            let (m, p, n) = (meta.m, meta.p, meta.n);
            if req(*a) {
                let vb = nodes[*b].value.clone();
                let ga = acc(buf, *a, len(*a));
                for bi in 0..batch_n {
                    let (ai, bj) = meta.map_batch(bi);
                    // dA = dC · Bᵀ
                    mm_nt(
                        &g[bi * m * n..],
                        &vb.data()[bj * p * n..],
                        m,
                        n,
                        p,
                        &mut ga[ai * m * p..(ai + 1) * m * p],
                    );
                }
            }
            if req(*b) {
                let va = nodes[*a].value.clone();
                let gb = acc(buf, *b, len(*b));
                for bi in 0..batch_n {
                    let (ai, bj) = meta.map_batch(bi);
                    // dB = Aᵀ · dC
                    mm_tn(
                        &va.data()[ai * m * p..],
                        &g[bi * m * n..],
                        m,
                        p,
                        n,
                        &mut gb[bj * p * n..(bj + 1) * p * n],
                    );
                }
            }
        }
        Back::Transpose2d(a) => {
            if req(*a) {
                let shape = nodes[i].value.shape().to_vec(); // [c, r]
                let (c, r) = (shape[0], shape[1]);
                let ga = acc(buf, *a, len(*a));
                for j in 0..c {
                    for k in 0..r {
                        ga[k * c + j] += g[j * r + k];
                    }
                }
            }
        }
        Back::SoftmaxLast(a) => {
            if req(*a) {
                let y = nodes[i].value.clone();
                let d = *y.shape().last().unwrap();
                let rows = y.numel() / d;
                let ga = acc(buf, *a, len(*a));
                for r in 0..rows {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for c in 0..d {
                        ga[r * d + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
        }
        Back::LeakyRelu(a, slope) => {
            if req(*a) {
                let va = nodes[*a].value.clone();
                let slope = *slope;
                let ga = acc(buf, *a, len(*a));
                for k in 0..g.len() {
                    ga[k] += g[k] * if va.data()[k] >= 0.0 { 1.0 } else { slope };
                }
            }
        }
        Back::SumAxis { a, axis } | Back::MeanAxis { a, axis } => {
            if req(*a) {
                let scale = match &nodes[i].back {
                    Back::MeanAxis { .. } => {
                        1.0 / nodes[*a].value.shape()[*axis] as f64
                    }
                    _ => 1.0,
                };
                let (outer, mid, inner_n) = split_axis(nodes[*a].value.shape(), *axis);
                let ga = acc(buf, *a, len(*a));
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner_n;
                        for k in 0..inner_n {
                            ga[base + k] += g[o * inner_n + k] * scale;
                        }
                    }
                }
            }
        }
        Back::SumAll(a) => {
            if req(*a) {
                let ga = acc(buf, *a, len(*a));
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Back::MeanAll(a) => {
            if req(*a) {
                let n = len(*a) as f64;
                let ga = acc(buf, *a, len(*a));
                for x in ga.iter_mut() {
                    *x += g[0] / n;
                }
            }
        }
        Back::ConcatLast { a, b, split } => {
            let la = *split;
            let lb = *nodes[*b].value.shape().last().unwrap();
            let rows = len(*a) / la;
            if req(*a) {
                let ga = acc(buf, *a, len(*a));
                for r in 0..rows {
                    for c in 0..la {
                        ga[r * la + c] += g[r * (la + lb) + c];
                    }
                }
            }
            if req(*b) {
                let gb = acc(buf, *b, len(*b));
                for r in 0..rows {
                    for c in 0..lb {
                        gb[r * lb + c] += g[r * (la + lb) + la + c];
                    }
                }
            }
        }
        Back::GatherRows { a, idx } => {
            if req(*a) {
                let d = nodes[*a].value.shape()[1];
                let ga = acc(buf, *a, len(*a));
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..d {
                        ga[src * d + c] += g[r * d + c];
                    }
                }
            }
        }
        Back::MaxGroups { a, argmax } => {
            if req(*a) {
                let d = nodes[*a].value.shape()[1];
                let ga = acc(buf, *a, len(*a));
                for (k, &src_row) in argmax.iter().enumerate() {
                    let c = k % d;
                    ga[src_row * d + c] += g[k];
                }
            }
        }
        Back::AddRow { a, b } => {
            let d = nodes[*b].value.numel();
            if req(*a) {
                let ga = acc(buf, *a, len(*a));
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            if req(*b) {
                let gb = acc(buf, *b, len(*b));
                for (k, y) in g.iter().enumerate() {
                    gb[k % d] += y;
                }
            }
        }
        Back::MulCol { a, v } => {
            let (r, c) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
            if req(*a) {
                let tv = nodes[*v].value.clone();
                let ga = acc(buf, *a, len(*a));
                for ri in 0..r {
                    let s = tv.data()[ri];
                    for ci in 0..c {
                        ga[ri * c + ci] += g[ri * c + ci] * s;
                    }
                }
            }
            if req(*v) {
                let ta = nodes[*a].value.clone();
                let gv = acc(buf, *v, len(*v));
                for ri in 0..r {
                    let mut s = 0.0;
                    for ci in 0..c {
                        s += g[ri * c + ci] * ta.data()[ri * c + ci];
                    }
                    gv[ri] += s;
                }
            }
        }
        Back::MulMask { a, mask } => {
            if req(*a) {
                let mask = mask.clone();
                let ga = acc(buf, *a, len(*a));
                for k in 0..g.len() {
                    ga[k] += g[k] * mask.data()[k];
                }
            }
        }
        Back::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = nodes[*gamma].value.numel();
            let rows = len(*x) / d;
            if req(*gamma) {
                let gg = acc(buf, *gamma, d);
                for r in 0..rows {
                    for c in 0..d {
                        gg[c] += g[r * d + c] * xhat[r * d + c];
                    }
                }
            }
            if req(*beta) {
                let gb = acc(buf, *beta, d);
                for r in 0..rows {
                    for c in 0..d {
                        gb[c] += g[r * d + c];
                    }
                }
            }
            if req(*x) {
                let tg = nodes[*gamma].value.clone();
                let gx = acc(buf, *x, len(*x));
                let dn = d as f64;
                for r in 0..rows {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for c in 0..d {
                        let a = g[r * d + c] * tg.data()[c];
                        m1 += a;
                        m2 += a * xhat[r * d + c];
                    }
                    m1 /= dn;
                    m2 /= dn;
                    for c in 0..d {
                        let a = g[r * d + c] * tg.data()[c];
                        gx[r * d + c] += (a - m1 - xhat[r * d + c] * m2) * inv_std[r];
                    }
                }
            }
        }
        Back::SsmScan {
            a_bar,
            b_bar,
            c,
            x,
            h_hist,
        } => {
            let (d, s) = (
                nodes[*a_bar].value.shape()[0],
                nodes[*a_bar].value.shape()[1],
            );
            let n = nodes[*x].value.shape()[0];
            let ds = d * s;
            let tab = nodes[*a_bar].value.clone();
            let tbb = nodes[*b_bar].value.clone();
            let tc = nodes[*c].value.clone();
            let tx = nodes[*x].value.clone();

            let mut lam = vec![0.0; ds];
            let mut d_ab = vec![0.0; ds];
            let mut d_bb = vec![0.0; ds];
            let mut d_c = vec![0.0; ds];
            let mut d_x = vec![0.0; n * d];
            for j in (0..n).rev() {
                let h_prev = &h_hist[j * ds..(j + 1) * ds];
                let h_cur = &h_hist[(j + 1) * ds..(j + 2) * ds];
                for di in 0..d {
                    let gy = g[j * d + di];
                    let xv = tx.data()[j * d + di];
                    let base = di * s;
                    let mut dx_acc = gy;
                    for si in 0..s {
                        let k = base + si;
                        lam[k] = tab.data()[k] * lam[k] + tc.data()[k] * gy;
                        d_c[k] += gy * h_cur[k];
                        d_ab[k] += lam[k] * h_prev[k];
                        d_bb[k] += lam[k] * xv;
                        dx_acc += lam[k] * tbb.data()[k];
                    }
                    d_x[j * d + di] = dx_acc;
                }
            }
            if req(*a_bar) {
                let ga = acc(buf, *a_bar, ds);
                for (gv, dv) in ga.iter_mut().zip(&d_ab) {
                    *gv += dv;
                }
            }
            if req(*b_bar) {
                let gb = acc(buf, *b_bar, ds);
                for (gv, dv) in gb.iter_mut().zip(&d_bb) {
                    *gv += dv;
                }
            }
            if req(*c) {
                let gc = acc(buf, *c, ds);
                for (gv, dv) in gc.iter_mut().zip(&d_c) {
                    *gv += dv;
                }
            }
            if req(*x) {
                let gx = acc(buf, *x, n * d);
                for (gv, dv) in gx.iter_mut().zip(&d_x) {
                    *gv += dv;
                }
            }
        }
        Back::CrossEntropy {
            logits,
            label,
            probs,
        } => {
            if req(*logits) {
                let gl = acc(buf, *logits, probs.len());
                for (k, p) in probs.iter().enumerate() {
                    let onehot = if k == *label { 1.0 } else { 0.0 };
                    gl[k] += g[0] * (p - onehot);
                }
            }
        }
    }
}

// ── scalar helpers ──────────────────────────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_val(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn phi1_val(z: f64) -> f64 {
    if z.abs() < 1e-6 {
        1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0
    } else {
        z.exp_m1() / z
    }
}

fn phi1_deriv(z: f64) -> f64 {
    // derivative series has a wider cancellation region than the value
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z.exp() * (z - 1.0) + 1.0) / (z * z)
    }
}

// ── matmul plumbing ─────────────────────────────────────────────────────

impl MatMeta {
    /// Map a flat output-batch index onto flat batch indices of a and b.
    fn map_batch(&self, mut out_flat: usize) -> (usize, usize) {
        let nd = self.batch.len();
        let mut a_flat = 0;
        let mut b_flat = 0;
        let mut a_stride = 1;
        let mut b_stride = 1;
        for k in (0..nd).rev() {
            let coord = out_flat % self.batch[k];
            out_flat /= self.batch[k];
            if self.a_batch[k] != 1 {
                a_flat += coord * a_stride;
            }
            a_stride *= self.a_batch[k];
            if self.b_batch[k] != 1 {
                b_flat += coord * b_stride;
            }
            b_stride *= self.b_batch[k];
        }
        (a_flat, b_flat)
    }
}

fn mat_meta(a: &[usize], b: &[usize]) -> Result<MatMeta> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let (m, p) = (a[a.len() - 2], a[a.len() - 1]);
    let (p2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if p != p2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let nd = ab.len().max(bb.len());
    let mut batch = vec![1usize; nd];
    let mut a_batch = vec![1usize; nd];
    let mut b_batch = vec![1usize; nd];
    for k in 0..nd {
        let da = if k < nd - ab.len() { 1 } else { ab[k - (nd - ab.len())] };
        let db = if k < nd - bb.len() { 1 } else { bb[k - (nd - bb.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        a_batch[k] = da;
        b_batch[k] = db;
        batch[k] = da.max(db);
    }
    Ok(MatMeta {
        batch,
        a_batch,
        b_batch,
        m,
        p,
        n,
    })
}

/// out[m,n] += a[m,p] · b[p,n]
fn mm(a: &[f64], b: &[f64], m: usize, p: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,p] += a[m,n] · b[p,n]ᵀ
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, p: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for k in 0..p {
            let brow = &b[k * n..(k + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * p + k] += dot;
        }
    }
}

/// out[p,n] += a[m,p]ᵀ · b[m,n]
fn mm_tn(a: &[f64], b: &[f64], m: usize, p: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for k in 0..p {
            let av = a[i * p + k];
            if av != 0.0 {
                let orow = &mut out[k * n..(k + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}
