//! The operation tape. Ops record enough state at forward time for an exact
//! backward pass; nodes only ever reference earlier nodes, so reverse
//! iteration order is topological and each node is visited once.

use super::{ParamId, Params, Scalar};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

struct Node<T: Scalar> {
    shape: Vec<usize>,
    values: Vec<T>,
    op: Op<T>,
}

enum Op<T: Scalar> {
    Input,
    Param(ParamId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    Transpose(NodeId),
    Concat(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    Row(NodeId, usize),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    MeanVec(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    Embed {
        table: ParamId,
        indices: Vec<usize>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
    },
    BceSum {
        scores: NodeId,
        targets: Vec<f64>,
    },
    CeLogits {
        logits: NodeId,
        weights: Vec<f64>,
    },
    NegGatherSum {
        logits: NodeId,
        indices: Vec<usize>,
    },
}

/// Per-parameter gradient buffers produced by [`Tape::backward`], aligned
/// with the parameter store.
pub struct ParamGrads<T: Scalar> {
    grads: Vec<Vec<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<T>> {
        self.grads.iter()
    }

    pub fn merge(&mut self, other: &ParamGrads<T>) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + *s;
            }
        }
    }
}

/// Records the forward computation over a parameter store.
pub struct Tape<'p, T: Scalar> {
    params: &'p Params<T>,
    nodes: Vec<Node<T>>,
    train: bool,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p Params<T>, train: bool) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            train,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        match &self.nodes[id.0].op {
            Op::Param(p) => self.params.get(*p).shape(),
            _ => &self.nodes[id.0].shape,
        }
    }

    pub fn values(&self, id: NodeId) -> &[T] {
        match &self.nodes[id.0].op {
            Op::Param(p) => self.params.get(*p).values(),
            _ => &self.nodes[id.0].values,
        }
    }

    /// Scalar value of a length-1 node.
    pub fn value(&self, id: NodeId) -> T {
        let v = self.values(id);
        assert_eq!(v.len(), 1, "value: node is not a scalar");
        v[0]
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, op: Op<T>) -> NodeId {
        // Param leaves hold no buffer; their values resolve through the store.
        debug_assert!(
            matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == values.len()
        );
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { shape, values, op });
        id
    }

    fn rows_cols(&self, id: NodeId, op: &str) -> (usize, usize) {
        let s = self.shape(id);
        assert!(
            s.len() == 2,
            "{op}: expected a matrix, got shape {s:?}"
        );
        (s[0], s[1])
    }

    // ---- leaves ----

    pub fn input(&mut self, shape: Vec<usize>, values: Vec<T>) -> NodeId {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "input: shape {:?} does not match buffer length {}",
            shape,
            values.len()
        );
        self.push(shape, values, Op::Input)
    }

    pub fn input_vec(&mut self, values: Vec<T>) -> NodeId {
        let n = values.len();
        self.push(vec![n], values, Op::Input)
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.push(vec![1], vec![v], Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let shape = self.params.get(id).shape().to_vec();
        self.push(shape, Vec::new(), Op::Param(id))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        assert_eq!(sa, sb, "add: shape mismatch {:?} vs {:?}", sa, sb);
        let out: Vec<T> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(sa, out, Op::Add(a, b))
    }

    /// Broadcast add of a length-`c` vector to every row of an `(r, c)`
    /// matrix.
    pub fn add_bias(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let (r, c) = self.rows_cols(m, "add_bias");
        assert_eq!(
            self.shape(v),
            &[c],
            "add_bias: bias shape {:?} does not match matrix {:?}",
            self.shape(v),
            self.shape(m)
        );
        let bv = self.values(v);
        let out: Vec<T> = self
            .values(m)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % c])
            .collect();
        self.push(vec![r, c], out, Op::AddBias(m, v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        assert_eq!(sa, sb, "sub: shape mismatch {:?} vs {:?}", sa, sb);
        let out: Vec<T> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x - y)
            .collect();
        self.push(sa, out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        assert_eq!(sa, sb, "mul: shape mismatch {:?} vs {:?}", sa, sb);
        let out: Vec<T> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(sa, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let sa = self.shape(a).to_vec();
        let out: Vec<T> = self.values(a).iter().map(|&x| x * c).collect();
        self.push(sa, out, Op::Scale(a, c))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.rows_cols(a, "matmul");
        let (kb, n) = self.rows_cols(b, "matmul");
        assert_eq!(
            ka,
            kb,
            "matmul: incompatible shapes {:?} x {:?}",
            self.shape(a),
            self.shape(b)
        );
        let av = self.values(a);
        let bv = self.values(b);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for k in 0..ka {
                let aik = av[i * ka + k];
                if aik == T::zero() {
                    continue;
                }
                let brow = &bv[k * n..(k + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + aik * brow[j];
                }
            }
        }
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> NodeId {
        let (m, k) = self.rows_cols(a, "matvec");
        assert_eq!(
            self.shape(x),
            &[k],
            "matvec: incompatible shapes {:?} x {:?}",
            self.shape(a),
            self.shape(x)
        );
        let av = self.values(a);
        let xv = self.values(x);
        let mut out = vec![T::zero(); m];
        for i in 0..m {
            let row = &av[i * k..(i + 1) * k];
            let mut acc = T::zero();
            for j in 0..k {
                acc = acc + row[j] * xv[j];
            }
            out[i] = acc;
        }
        self.push(vec![m], out, Op::MatVec(a, x))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, k) = self.rows_cols(a, "transpose");
        let av = self.values(a);
        let mut out = vec![T::zero(); m * k];
        for i in 0..m {
            for j in 0..k {
                out[j * m + i] = av[i * k + j];
            }
        }
        self.push(vec![k, m], out, Op::Transpose(a))
    }

    // ---- shape manipulation ----

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat: no inputs");
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(
                self.shape(p).len(),
                1,
                "concat: expected vectors, got shape {:?}",
                self.shape(p)
            );
            out.extend_from_slice(self.values(p));
        }
        let n = out.len();
        self.push(vec![n], out, Op::Concat(parts.to_vec()))
    }

    /// Stack `n` length-`d` vectors into an `(n, d)` matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> NodeId {
        assert!(!rows.is_empty(), "stack_rows: no inputs");
        let d = self.shape(rows[0])[0];
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert_eq!(
                self.shape(r),
                &[d],
                "stack_rows: row shape {:?} does not match first row [{d}]",
                self.shape(r)
            );
            out.extend_from_slice(self.values(r));
        }
        self.push(vec![rows.len(), d], out, Op::StackRows(rows.to_vec()))
    }

    /// Extract row `i` of a matrix as a vector.
    pub fn row(&mut self, x: NodeId, i: usize) -> NodeId {
        let (r, c) = self.rows_cols(x, "row");
        assert!(i < r, "row: index {i} out of bounds for shape {:?}", self.shape(x));
        let out = self.values(x)[i * c..(i + 1) * c].to_vec();
        self.push(vec![c], out, Op::Row(x, i))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.rows_cols(x, "slice_cols");
        assert!(
            start + len <= c,
            "slice_cols: range {start}..{} out of bounds for {:?}",
            start + len,
            self.shape(x)
        );
        let xv = self.values(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        self.push(vec![r, len], out, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let r = self.rows_cols(parts[0], "concat_cols").0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (ri, ci) = self.rows_cols(p, "concat_cols");
                assert_eq!(ri, r, "concat_cols: row count mismatch {ri} vs {r}");
                ci
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.values(p);
                out.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()))
    }

    // ---- reductions ----

    /// Mean over axis 0 of an `(r, c)` matrix, producing a length-`c` vector.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.rows_cols(x, "mean_rows");
        let xv = self.values(x);
        let inv = T::from_f64(1.0 / r as f64);
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] = out[j] + xv[i * c + j];
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        self.push(vec![c], out, Op::MeanRows(x))
    }

    /// Mean of a vector, producing a scalar.
    pub fn mean_vec(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        assert_eq!(s.len(), 1, "mean_vec: expected a vector, got shape {s:?}");
        let n = s[0];
        let xv = self.values(x);
        let mut acc = T::zero();
        for &v in xv {
            acc = acc + v;
        }
        let out = acc * T::from_f64(1.0 / n as f64);
        self.push(vec![1], vec![out], Op::MeanVec(x))
    }

    // ---- nonlinearities ----

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let out: Vec<T> = self.values(a).iter().map(|&x| x.tanh()).collect();
        self.push(sa, out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let out: Vec<T> = self
            .values(a)
            .iter()
            .map(|&x| {
                // Branch on sign to avoid overflow in exp.
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        self.push(sa, out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let out: Vec<T> = self
            .values(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        self.push(sa, out, Op::Relu(a))
    }

    /// Numerically stable softmax along the last axis: each row of a matrix,
    /// or the whole of a vector.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let (rows, cols) = match sa.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => panic!("softmax_rows: expected vector or matrix, got shape {other:?}"),
        };
        let av = self.values(a);
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            let row = &av[i * cols..(i + 1) * cols];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..cols {
                let e = (row[j] - max).exp();
                out[i * cols + j] = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for j in 0..cols {
                out[i * cols + j] = out[i * cols + j] * inv;
            }
        }
        self.push(sa, out, Op::SoftmaxRows(a))
    }

    // ---- lookup, regularization, normalization ----

    /// Gather rows of an embedding table; gradients scatter-add back into
    /// the table.
    pub fn embed(&mut self, table: ParamId, indices: &[usize]) -> NodeId {
        let t = self.params.get(table);
        let s = t.shape();
        assert_eq!(s.len(), 2, "embed: table must be a matrix, got {s:?}");
        let (v, d) = (s[0], s[1]);
        let tv = t.values();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            assert!(ix < v, "embed: index {ix} out of range for table {s:?}");
            out.extend_from_slice(&tv[ix * d..(ix + 1) * d]);
        }
        self.push(
            vec![indices.len(), d],
            out,
            Op::Embed {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    /// Inverted dropout: keep with probability 1-p and scale by 1/(1-p), so
    /// inference needs no rescale. Identity when not training or p = 0.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut ChaCha12Rng) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout: p={p} outside [0,1)");
        if !self.train || p == 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.values(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let sx = self.shape(x).to_vec();
        let out: Vec<T> = self
            .values(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        self.push(sx, out, Op::Dropout { x, mask })
    }

    /// Layer normalization along the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let sx = self.shape(x).to_vec();
        let (rows, cols) = match sx.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => panic!("layer_norm: expected vector or matrix, got shape {other:?}"),
        };
        assert_eq!(self.shape(gamma), &[cols], "layer_norm: gamma shape mismatch");
        assert_eq!(self.shape(beta), &[cols], "layer_norm: beta shape mismatch");
        let eps = 1e-5;
        let xv = self.values(x);
        let gv = self.values(gamma).to_vec();
        let bv = self.values(beta).to_vec();
        let mut x_hat = vec![T::zero(); rows * cols];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            let row = &xv[i * cols..(i + 1) * cols];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / cols as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = T::from_f64(istd);
            for j in 0..cols {
                let xh = T::from_f64((row[j].as_f64() - mean) * istd);
                x_hat[i * cols + j] = xh;
                out[i * cols + j] = gv[j] * xh + bv[j];
            }
        }
        self.push(
            sx,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
        )
    }

    // ---- losses ----

    /// Binary cross-entropy summed over all labels:
    /// `-sum_i [y_i ln s_i + (1-y_i) ln(1-s_i)]`, scores clamped to
    /// `[1e-12, 1-1e-12]` before the logs. Inside the clamp region the loss
    /// is locally constant, so the gradient there is zero.
    pub fn bce_sum(&mut self, scores: NodeId, targets: &[f64]) -> NodeId {
        let n = self.values(scores).len();
        assert_eq!(
            n,
            targets.len(),
            "bce_sum: {n} scores vs {} targets",
            targets.len()
        );
        let mut acc = 0.0f64;
        for (&s, &y) in self.values(scores).iter().zip(targets) {
            let sc = s.as_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
            acc -= y * sc.ln() + (1.0 - y) * (1.0 - sc).ln();
        }
        self.push(
            vec![1],
            vec![T::from_f64(acc)],
            Op::BceSum {
                scores,
                targets: targets.to_vec(),
            },
        )
    }

    /// Weighted negative log-softmax of a logit vector:
    /// `-sum_i w_i * (z_i - logsumexp(z))`, computed with max subtraction.
    /// With a one-hot `w` this is categorical cross-entropy; with a
    /// multi-hot `w` it is the summed log likelihood of the marked labels.
    pub fn ce_logits(&mut self, logits: NodeId, weights: &[f64]) -> NodeId {
        let s = self.shape(logits);
        assert_eq!(s.len(), 1, "ce_logits: expected a vector, got shape {s:?}");
        let n = s[0];
        assert_eq!(
            n,
            weights.len(),
            "ce_logits: {n} logits vs {} weights",
            weights.len()
        );
        let zv = self.values(logits);
        let max = zv
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + zv.iter()
                .map(|v| (v.as_f64() - max).exp())
                .sum::<f64>()
                .ln();
        let mut acc = 0.0f64;
        for (&z, &w) in zv.iter().zip(weights) {
            acc -= w * (z.as_f64() - lse);
        }
        self.push(
            vec![1],
            vec![T::from_f64(acc)],
            Op::CeLogits {
                logits,
                weights: weights.to_vec(),
            },
        )
    }

    /// `-sum_{i in indices} z_i`: the unnormalized dot-product likelihood,
    /// kept for ablation only.
    pub fn neg_gather_sum(&mut self, logits: NodeId, indices: &[usize]) -> NodeId {
        let s = self.shape(logits);
        assert_eq!(s.len(), 1, "neg_gather_sum: expected a vector, got {s:?}");
        let zv = self.values(logits);
        let mut acc = T::zero();
        for &ix in indices {
            assert!(ix < zv.len(), "neg_gather_sum: index {ix} out of range");
            acc = acc - zv[ix];
        }
        self.push(
            vec![1],
            vec![acc],
            Op::NegGatherSum {
                logits,
                indices: indices.to_vec(),
            },
        )
    }

    // ---- composites ----

    /// Scaled dot-product attention over per-head matrices of shape
    /// `(L, d_h)`. Returns the attended output and the `(L, L)` attention
    /// weight node, whose rows each sum to 1.
    pub fn scaled_dot_attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> (NodeId, NodeId) {
        let (_, dh) = self.rows_cols(q, "scaled_dot_attention");
        let kt = self.transpose(k);
        let scores = self.matmul(q, kt);
        let scaled = self.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
        let attn = self.softmax_rows(scaled);
        let out = self.matmul(attn, v);
        (out, attn)
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss node. Returns gradient buffers
    /// aligned with the parameter store; tape nodes created after `loss`
    /// are ignored.
    pub fn backward(&self, loss: NodeId) -> ParamGrads<T> {
        assert_eq!(
            self.values(loss).len(),
            1,
            "backward: loss must be a scalar node"
        );
        let mut node_grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        node_grads.resize_with(loss.0 + 1, || None);
        node_grads[loss.0] = Some(vec![T::one()]);
        let mut pgrads: Vec<Vec<T>> = (0..self.params.len())
            .map(|i| vec![T::zero(); self.params.get(ParamId(i)).numel()])
            .collect();

        for i in (0..=loss.0).rev() {
            let Some(gy) = node_grads[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(p) => {
                    let buf = &mut pgrads[p.0];
                    for (d, s) in buf.iter_mut().zip(&gy) {
                        *d = *d + *s;
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut node_grads, *a, |g| add_assign(g, &gy));
                    self.acc(&mut node_grads, *b, |g| add_assign(g, &gy));
                }
                Op::AddBias(m, v) => {
                    let c = self.shape(*v)[0];
                    self.acc(&mut node_grads, *m, |g| add_assign(g, &gy));
                    self.acc(&mut node_grads, *v, |g| {
                        for (ix, &gv) in gy.iter().enumerate() {
                            g[ix % c] = g[ix % c] + gv;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    self.acc(&mut node_grads, *a, |g| add_assign(g, &gy));
                    self.acc(&mut node_grads, *b, |g| {
                        for (d, s) in g.iter_mut().zip(&gy) {
                            *d = *d - *s;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let av = self.values(*a).to_vec();
                    let bv = self.values(*b).to_vec();
                    self.acc(&mut node_grads, *a, |g| {
                        for ((d, s), &x) in g.iter_mut().zip(&gy).zip(&bv) {
                            *d = *d + *s * x;
                        }
                    });
                    self.acc(&mut node_grads, *b, |g| {
                        for ((d, s), &x) in g.iter_mut().zip(&gy).zip(&av) {
                            *d = *d + *s * x;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    self.acc(&mut node_grads, *a, |g| {
                        for (d, s) in g.iter_mut().zip(&gy) {
                            *d = *d + *s * c;
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.rows_cols(*a, "matmul");
                    let n = self.rows_cols(*b, "matmul").1;
                    let av = self.values(*a).to_vec();
                    let bv = self.values(*b).to_vec();
                    // dA = dY * B^T
                    self.acc(&mut node_grads, *a, |g| {
                        for i in 0..m {
                            for kk in 0..k {
                                let mut acc = T::zero();
                                let grow = &gy[i * n..(i + 1) * n];
                                let brow = &bv[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    acc = acc + grow[j] * brow[j];
                                }
                                g[i * k + kk] = g[i * k + kk] + acc;
                            }
                        }
                    });
                    // dB = A^T * dY
                    self.acc(&mut node_grads, *b, |g| {
                        for kk in 0..k {
                            for i in 0..m {
                                let aik = av[i * k + kk];
                                if aik == T::zero() {
                                    continue;
                                }
                                let grow = &gy[i * n..(i + 1) * n];
                                let brow = &mut g[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    brow[j] = brow[j] + aik * grow[j];
                                }
                            }
                        }
                    });
                }
                Op::MatVec(a, x) => {
                    let (m, k) = self.rows_cols(*a, "matvec");
                    let av = self.values(*a).to_vec();
                    let xv = self.values(*x).to_vec();
                    self.acc(&mut node_grads, *a, |g| {
                        for i in 0..m {
                            let gi = gy[i];
                            if gi == T::zero() {
                                continue;
                            }
                            let row = &mut g[i * k..(i + 1) * k];
                            for j in 0..k {
                                row[j] = row[j] + gi * xv[j];
                            }
                        }
                    });
                    self.acc(&mut node_grads, *x, |g| {
                        for i in 0..m {
                            let gi = gy[i];
                            if gi == T::zero() {
                                continue;
                            }
                            let row = &av[i * k..(i + 1) * k];
                            for j in 0..k {
                                g[j] = g[j] + gi * row[j];
                            }
                        }
                    });
                }
                Op::Transpose(a) => {
                    let (m, k) = self.rows_cols(*a, "transpose");
                    self.acc(&mut node_grads, *a, |g| {
                        for i in 0..m {
                            for j in 0..k {
                                g[i * k + j] = g[i * k + j] + gy[j * m + i];
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.values(p).len();
                        let seg = &gy[off..off + n];
                        self.acc(&mut node_grads, p, |g| add_assign(g, seg));
                        off += n;
                    }
                }
                Op::StackRows(rows) => {
                    let d = self.shape(rows[0])[0];
                    for (r, &p) in rows.iter().enumerate() {
                        let seg = &gy[r * d..(r + 1) * d];
                        self.acc(&mut node_grads, p, |g| add_assign(g, seg));
                    }
                }
                Op::Row(x, ri) => {
                    let c = self.rows_cols(*x, "row").1;
                    let (ri, gyref) = (*ri, &gy);
                    self.acc(&mut node_grads, *x, |g| {
                        for j in 0..c {
                            g[ri * c + j] = g[ri * c + j] + gyref[j];
                        }
                    });
                }
                Op::SliceCols { x, start, len } => {
                    let (r, c) = self.rows_cols(*x, "slice_cols");
                    let (start, len) = (*start, *len);
                    self.acc(&mut node_grads, *x, |g| {
                        for i in 0..r {
                            for j in 0..len {
                                g[i * c + start + j] = g[i * c + start + j] + gy[i * len + j];
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let r = self.rows_cols(parts[0], "concat_cols").0;
                    let total: usize = parts
                        .iter()
                        .map(|&p| self.rows_cols(p, "concat_cols").1)
                        .sum();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.rows_cols(p, "concat_cols").1;
                        self.acc(&mut node_grads, p, |g| {
                            for i in 0..r {
                                for j in 0..w {
                                    g[i * w + j] = g[i * w + j] + gy[i * total + off + j];
                                }
                            }
                        });
                        off += w;
                    }
                }
                Op::MeanRows(x) => {
                    let (r, c) = self.rows_cols(*x, "mean_rows");
                    let inv = T::from_f64(1.0 / r as f64);
                    self.acc(&mut node_grads, *x, |g| {
                        for i in 0..r {
                            for j in 0..c {
                                g[i * c + j] = g[i * c + j] + gy[j] * inv;
                            }
                        }
                    });
                }
                Op::MeanVec(x) => {
                    let n = self.shape(*x)[0];
                    let inv = T::from_f64(1.0 / n as f64);
                    let g0 = gy[0];
                    self.acc(&mut node_grads, *x, |g| {
                        for v in g.iter_mut() {
                            *v = *v + g0 * inv;
                        }
                    });
                }
                Op::Tanh(a) => {
                    let yv = self.nodes[i].values.clone();
                    self.acc(&mut node_grads, *a, |g| {
                        for ((d, s), &y) in g.iter_mut().zip(&gy).zip(&yv) {
                            *d = *d + *s * (T::one() - y * y);
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let yv = self.nodes[i].values.clone();
                    self.acc(&mut node_grads, *a, |g| {
                        for ((d, s), &y) in g.iter_mut().zip(&gy).zip(&yv) {
                            *d = *d + *s * y * (T::one() - y);
                        }
                    });
                }
                Op::Relu(a) => {
                    let yv = self.nodes[i].values.clone();
                    self.acc(&mut node_grads, *a, |g| {
                        for ((d, s), &y) in g.iter_mut().zip(&gy).zip(&yv) {
                            if y > T::zero() {
                                *d = *d + *s;
                            }
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let yv = self.nodes[i].values.clone();
                    let sa = self.shape(*a);
                    let (rows, cols) = match sa {
                        [n] => (1, *n),
                        [r, c] => (*r, *c),
                        _ => unreachable!(),
                    };
                    self.acc(&mut node_grads, *a, |g| {
                        for r in 0..rows {
                            let y = &yv[r * cols..(r + 1) * cols];
                            let gyr = &gy[r * cols..(r + 1) * cols];
                            let mut dot = T::zero();
                            for j in 0..cols {
                                dot = dot + gyr[j] * y[j];
                            }
                            for j in 0..cols {
                                g[r * cols + j] = g[r * cols + j] + (gyr[j] - dot) * y[j];
                            }
                        }
                    });
                }
                Op::Embed { table, indices } => {
                    let d = self.params.get(*table).shape()[1];
                    let buf = &mut pgrads[table.0];
                    for (l, &ix) in indices.iter().enumerate() {
                        for j in 0..d {
                            buf[ix * d + j] = buf[ix * d + j] + gy[l * d + j];
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    self.acc(&mut node_grads, *x, |g| {
                        for ((d, s), &m) in g.iter_mut().zip(&gy).zip(mask) {
                            *d = *d + *s * m;
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    x_hat,
                    inv_std,
                } => {
                    let cols = self.shape(*gamma)[0];
                    let rows = inv_std.len();
                    let gv = self.values(*gamma).to_vec();
                    self.acc(&mut node_grads, *beta, |g| {
                        for r in 0..rows {
                            for j in 0..cols {
                                g[j] = g[j] + gy[r * cols + j];
                            }
                        }
                    });
                    self.acc(&mut node_grads, *gamma, |g| {
                        for r in 0..rows {
                            for j in 0..cols {
                                g[j] = g[j] + gy[r * cols + j] * x_hat[r * cols + j];
                            }
                        }
                    });
                    self.acc(&mut node_grads, *x, |g| {
                        let invc = T::from_f64(1.0 / cols as f64);
                        for r in 0..rows {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..cols {
                                let h = gy[r * cols + j] * gv[j];
                                m1 = m1 + h;
                                m2 = m2 + h * x_hat[r * cols + j];
                            }
                            m1 = m1 * invc;
                            m2 = m2 * invc;
                            for j in 0..cols {
                                let h = gy[r * cols + j] * gv[j];
                                g[r * cols + j] = g[r * cols + j]
                                    + inv_std[r] * (h - m1 - x_hat[r * cols + j] * m2);
                            }
                        }
                    });
                }
                Op::BceSum { scores, targets } => {
                    let g0 = gy[0];
                    let sv = self.values(*scores).to_vec();
                    self.acc(&mut node_grads, *scores, |g| {
                        for (j, (&s, &y)) in sv.iter().zip(targets).enumerate() {
                            let sf = s.as_f64();
                            if sf <= BCE_EPS || sf >= 1.0 - BCE_EPS {
                                continue; // clamped region: locally constant
                            }
                            let d = (sf - y) / (sf * (1.0 - sf));
                            g[j] = g[j] + g0 * T::from_f64(d);
                        }
                    });
                }
                Op::CeLogits { logits, weights } => {
                    let g0 = gy[0];
                    let zv = self.values(*logits).to_vec();
                    let max = zv
                        .iter()
                        .map(|v| v.as_f64())
                        .fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = zv.iter().map(|v| (v.as_f64() - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    let wsum: f64 = weights.iter().sum();
                    self.acc(&mut node_grads, *logits, |g| {
                        for j in 0..zv.len() {
                            let soft = exps[j] / sum;
                            let d = wsum * soft - weights[j];
                            g[j] = g[j] + g0 * T::from_f64(d);
                        }
                    });
                }
                Op::NegGatherSum { logits, indices } => {
                    let g0 = gy[0];
                    self.acc(&mut node_grads, *logits, |g| {
                        for &ix in indices {
                            g[ix] = g[ix] - g0;
                        }
                    });
                }
            }
        }
        ParamGrads { grads: pgrads }
    }

    fn acc(
        &self,
        node_grads: &mut [Option<Vec<T>>],
        id: NodeId,
        f: impl FnOnce(&mut Vec<T>),
    ) {
        let slot = &mut node_grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.values(id).len()]);
        }
        f(slot.as_mut().expect("just filled"));
    }
}

const BCE_EPS: f64 = 1e-12;

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}
