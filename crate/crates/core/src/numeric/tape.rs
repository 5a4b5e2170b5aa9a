//! Reverse-mode automatic differentiation over a flat, append-only tape.
//!
//! Every op appends a node holding its forward value. Nodes whose inputs all
//! have `requires_grad == false` are recorded as constants and never visited by
//! [`Tape::backward`]. Because nodes are appended in evaluation order, the tape
//! is already topologically sorted and the backward sweep is a single reverse
//! pass that visits each node once.

use super::tensor::{dot, matmul_into, matmul_nt_into, matmul_tn_acc, Tensor};
use super::NumericError;

/// Floor applied to probabilities before taking the log in cross-entropy.
pub const PROB_CLIP: f64 = 1e-15;

/// Variance epsilon used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a user-supplied op: receives the input values, the
/// output value and the upstream gradient, and returns one gradient buffer per
/// input (same length as that input).
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MeanPool {
        x: Var,
        mask: Vec<f64>,
        counts: Vec<f64>,
        seq: usize,
    },
    CrossEntropy {
        probs: Var,
        targets: Vec<f64>,
    },
    Attention(Box<AttentionSaved>),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    seq: usize,
    /// Valid (unmasked) positions per batch row.
    valid: Vec<Vec<usize>>,
    /// Attention probabilities per (batch row, head): `valid.len()²` values each.
    probs: Vec<Vec<f64>>,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct GradientSet {
    grads: Vec<Option<Tensor>>,
}

impl GradientSet {
    /// Gradient of a `requires_grad` leaf. Leaves that did not influence the
    /// loss get an all-zero tensor; constants and intermediates return `None`.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Operation recorder. Confined to one thread; each training step builds a
/// fresh tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let op = if requires_grad {
            Op::Leaf
        } else {
            Op::Constant
        };
        self.push(value, requires_grad, op)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `op` if any input needs a gradient, otherwise stores the value
    /// as a constant. Rejects non-finite outputs.
    fn record(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
    ) -> Result<Var, NumericError> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericError::NonFinite { op: name, index });
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        Ok(self.push(Tensor::from_parts(shape, data), requires_grad, op))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), NumericError> {
        self.value(v)
            .dims2()
            .map_err(|_| NumericError::ShapeMismatch {
                op,
                detail: format!("expected a matrix, got {:?}", self.value(v).shape()),
            })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericError::ShapeMismatch {
                op,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (n, k) = self.dims2("matmul", a)?;
        let (k2, m) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(NumericError::ShapeMismatch {
                op: "matmul",
                detail: format!("[{n}, {k}] x [{k2}, {m}]"),
            });
        }
        let mut out = vec![0.0; n * m];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            n,
            k,
            m,
        );
        self.record("matmul", &[a, b], vec![n, m], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericError> {
        let (n, m) = self.dims2("transpose", a)?;
        let out = transpose(self.value(a).data(), n, m);
        self.record("transpose", &[a], vec![m, n], out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        self.record("add", &[a, b], shape, out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let shape = self.value(a).shape().to_vec();
        self.record("sub", &[a, b], shape, out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        self.record("mul", &[a, b], shape, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericError> {
        let out = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        self.record("scale", &[a], shape, out, Op::Scale(a, c))
    }

    /// `x[n×m] + b[m]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, NumericError> {
        let (n, m) = self.dims2("add_row", x)?;
        if self.value(b).len() != m {
            return Err(NumericError::ShapeMismatch {
                op: "add_row",
                detail: format!("[{n}, {m}] + {:?}", self.value(b).shape()),
            });
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(m) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.record("add_row", &[x, b], vec![n, m], out, Op::AddRow(x, b))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericError> {
        let (n, m) = self.dims2("softmax_rows", x)?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(m) {
            softmax_in_place(row);
        }
        self.record("softmax_rows", &[x], vec![n, m], out, Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericError> {
        let (n, d) = self.dims2("layer_norm", x)?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(NumericError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "width {d}, gamma {:?}, beta {:?}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            });
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        self.record(
            "layer_norm",
            &[x, gamma, beta],
            vec![n, d],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericError> {
        let out = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.record("gelu", &[x], shape, out, Op::Gelu(x))
    }

    /// Gathers rows of `table[V×d]`; output is `[ids.len() × d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericError> {
        let (vocab, d) = self.dims2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(NumericError::ShapeMismatch {
                op: "embedding",
                detail: format!("id {bad} out of range for table of {vocab} rows"),
            });
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        self.record(
            "embedding",
            &[table],
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean over the positions of each sequence where `mask == 1`.
    /// `x` is `[batch·seq × d]`, `mask` is `[batch × seq]` row-major.
    pub fn mean_pool_masked(
        &mut self,
        x: Var,
        mask: &[f64],
        seq: usize,
    ) -> Result<Var, NumericError> {
        let (rows, d) = self.dims2("mean_pool_masked", x)?;
        if seq == 0 || rows % seq != 0 || mask.len() != rows {
            return Err(NumericError::ShapeMismatch {
                op: "mean_pool_masked",
                detail: format!("{rows} rows, seq {seq}, mask of {}", mask.len()),
            });
        }
        let batch = rows / seq;
        let xs = self.value(x).data();
        let mut counts = vec![0.0; batch];
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            let count: f64 = mask[b * seq..(b + 1) * seq].iter().sum();
            if count <= 0.0 {
                return Err(NumericError::ShapeMismatch {
                    op: "mean_pool_masked",
                    detail: format!("sequence {b} has an all-zero mask"),
                });
            }
            counts[b] = count;
            let acc = &mut out[b * d..(b + 1) * d];
            for t in 0..seq {
                let w = mask[b * seq + t];
                if w == 0.0 {
                    continue;
                }
                let row = &xs[(b * seq + t) * d..(b * seq + t + 1) * d];
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += w * v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= count);
        }
        self.record(
            "mean_pool_masked",
            &[x],
            vec![batch, d],
            out,
            Op::MeanPool {
                x,
                mask: mask.to_vec(),
                counts,
                seq,
            },
        )
    }

    /// Mean over rows of `−Σ_j y_j · ln(max(p_j, PROB_CLIP))`.
    /// `probs` and `targets` are both `[n × classes]`; targets are constants.
    pub fn cross_entropy_with_probs(
        &mut self,
        probs: Var,
        targets: &Tensor,
    ) -> Result<Var, NumericError> {
        let (n, c) = self.dims2("cross_entropy_with_probs", probs)?;
        if targets.shape() != [n, c] {
            return Err(NumericError::ShapeMismatch {
                op: "cross_entropy_with_probs",
                detail: format!("probs [{n}, {c}] vs targets {:?}", targets.shape()),
            });
        }
        let p = self.value(probs).data();
        let total: f64 = p
            .chunks_exact(c)
            .zip(targets.data().chunks_exact(c))
            .map(|(pr, yr)| cross_entropy_row(yr, pr))
            .sum();
        let loss = total / n as f64;
        self.record(
            "cross_entropy_with_probs",
            &[probs],
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
        )
    }

    /// Multi-head scaled dot-product self-attention over a batch of sequences.
    ///
    /// `q`, `k`, `v` are `[batch·seq × d]` with heads laid out as contiguous
    /// column blocks of width `d / heads`. Positions with `mask == 0` are
    /// excluded as keys and produce zero output rows, so results for the
    /// unmasked positions do not depend on how much padding follows them.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &[f64],
        seq: usize,
        heads: usize,
    ) -> Result<Var, NumericError> {
        let (rows, d) = self.dims2("attention", q)?;
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        if heads == 0 || d % heads != 0 || seq == 0 || rows % seq != 0 || mask.len() != rows {
            return Err(NumericError::ShapeMismatch {
                op: "attention",
                detail: format!(
                    "rows {rows}, width {d}, heads {heads}, seq {seq}, mask {}",
                    mask.len()
                ),
            });
        }
        let batch = rows / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );

        let mut out = vec![0.0; rows * d];
        let mut valid = Vec::with_capacity(batch);
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let pos: Vec<usize> = (0..seq).filter(|&t| mask[b * seq + t] != 0.0).collect();
            let nv = pos.len();
            for h in 0..heads {
                let qh = gather_head(qs, b, seq, d, h, dh, &pos);
                let kh = gather_head(ks, b, seq, d, h, dh, &pos);
                let vh = gather_head(vs, b, seq, d, h, dh, &pos);
                let mut p = vec![0.0; nv * nv];
                matmul_nt_into(&qh, &kh, &mut p, nv, dh, nv);
                for row in p.chunks_exact_mut(nv.max(1)) {
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_in_place(row);
                }
                let mut oh = vec![0.0; nv * dh];
                matmul_into(&p, &vh, &mut oh, nv, nv, dh);
                scatter_head(&mut out, &oh, b, seq, d, h, dh, &pos);
                probs.push(p);
            }
            valid.push(pos);
        }
        self.record(
            "attention",
            &[q, k, v],
            vec![rows, d],
            out,
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                heads,
                seq,
                valid,
                probs,
            })),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericError> {
        let s = self.value(x).data().iter().sum();
        self.record("sum", &[x], vec![1], vec![s], Op::Sum(x))
    }

    /// Records an op whose forward value was computed by the caller and whose
    /// gradient is given by `backward`.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor,
        backward: BackwardFn,
    ) -> Result<Var, NumericError> {
        let shape = value.shape().to_vec();
        self.record(
            name,
            inputs,
            shape,
            value.to_vec(),
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<GradientSet, NumericError> {
        if self.consumed {
            return Err(NumericError::TapeConsumed);
        }
        if loss.0 >= self.nodes.len() {
            return Err(NumericError::UnknownVar(loss.0));
        }
        if !self.value(loss).is_scalar() {
            return Err(NumericError::NotScalar(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;

        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let mut acc = Accumulator {
                nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {
                    acc.grads[idx] = Some(g);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (n, k) = nodes[a.0].value.dims2()?;
                    let m = nodes[b.0].value.dims2()?.1;
                    if let Some(ga) = acc.slot(*a) {
                        let mut tmp = vec![0.0; n * k];
                        matmul_nt_into(&g, nodes[b.0].value.data(), &mut tmp, n, m, k);
                        add_assign(ga, &tmp);
                    }
                    if let Some(gb) = acc.slot(*b) {
                        matmul_tn_acc(nodes[a.0].value.data(), &g, gb, n, k, m);
                    }
                }
                Op::Transpose(a) => {
                    let (n, m) = nodes[a.0].value.dims2()?;
                    if let Some(ga) = acc.slot(*a) {
                        // g is [m × n]
                        add_assign(ga, &transpose(&g, m, n));
                    }
                }
                Op::Add(a, b) => {
                    if let Some(ga) = acc.slot(*a) {
                        add_assign(ga, &g);
                    }
                    if let Some(gb) = acc.slot(*b) {
                        add_assign(gb, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = acc.slot(*a) {
                        add_assign(ga, &g);
                    }
                    if let Some(gb) = acc.slot(*b) {
                        gb.iter_mut().zip(&g).for_each(|(o, v)| *o -= v);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = acc.slot(*a) {
                        for ((o, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                            *o += gi * bi;
                        }
                    }
                    if let Some(gb) = acc.slot(*b) {
                        for ((o, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                            *o += gi * ai;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(ga) = acc.slot(*a) {
                        ga.iter_mut().zip(&g).for_each(|(o, v)| *o += c * v);
                    }
                }
                Op::AddRow(x, b) => {
                    if let Some(gx) = acc.slot(*x) {
                        add_assign(gx, &g);
                    }
                    if let Some(gb) = acc.slot(*b) {
                        let m = gb.len();
                        for row in g.chunks_exact(m) {
                            add_assign(gb, row);
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let (_, m) = node.value.dims2()?;
                    if let Some(gx) = acc.slot(*x) {
                        let y = node.value.data();
                        for ((gxr, yr), gr) in gx
                            .chunks_exact_mut(m)
                            .zip(y.chunks_exact(m))
                            .zip(g.chunks_exact(m))
                        {
                            let inner = dot(gr, yr);
                            for j in 0..m {
                                gxr[j] += yr[j] * (gr[j] - inner);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (_, d) = node.value.dims2()?;
                    let gam = nodes[gamma.0].value.data();
                    if let Some(gb) = acc.slot(*beta) {
                        for row in g.chunks_exact(d) {
                            add_assign(gb, row);
                        }
                    }
                    if let Some(gg) = acc.slot(*gamma) {
                        for (row, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                gg[j] += row[j] * hrow[j];
                            }
                        }
                    }
                    if let Some(gx) = acc.slot(*x) {
                        let df = d as f64;
                        let mut gh = vec![0.0; d];
                        for (i, (row, hrow)) in
                            g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate()
                        {
                            for j in 0..d {
                                gh[j] = row[j] * gam[j];
                            }
                            let sum_gh: f64 = gh.iter().sum();
                            let sum_ghh = dot(&gh, hrow);
                            let out = &mut gx[i * d..(i + 1) * d];
                            for j in 0..d {
                                out[j] +=
                                    inv_std[i] / df * (df * gh[j] - sum_gh - hrow[j] * sum_ghh);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    if let Some(gx) = acc.slot(*x) {
                        let xv = nodes[x.0].value.data();
                        for ((o, gi), &xi) in gx.iter_mut().zip(&g).zip(xv) {
                            *o += gi * gelu_grad(xi);
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    if let Some(gt) = acc.slot(*table) {
                        let d = node.value.dims2()?.1;
                        for (r, &id) in ids.iter().enumerate() {
                            add_assign(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    }
                }
                Op::MeanPool {
                    x,
                    mask,
                    counts,
                    seq,
                } => {
                    if let Some(gx) = acc.slot(*x) {
                        let d = node.value.dims2()?.1;
                        for (b, &count) in counts.iter().enumerate() {
                            let gr = &g[b * d..(b + 1) * d];
                            for t in 0..*seq {
                                let w = mask[b * seq + t];
                                if w == 0.0 {
                                    continue;
                                }
                                let out = &mut gx[(b * seq + t) * d..(b * seq + t + 1) * d];
                                for (o, &gv) in out.iter_mut().zip(gr) {
                                    *o += w * gv / count;
                                }
                            }
                        }
                    }
                }
                Op::CrossEntropy { probs, targets } => {
                    if let Some(gp) = acc.slot(*probs) {
                        let p = nodes[probs.0].value.data();
                        let n = nodes[probs.0].value.dims2()?.0 as f64;
                        for ((o, &pi), &yi) in gp.iter_mut().zip(p).zip(targets) {
                            if yi != 0.0 && pi > PROB_CLIP {
                                *o -= g[0] * yi / (pi * n);
                            }
                        }
                    }
                }
                Op::Attention(saved) => attention_backward(&mut acc, saved, &g)?,
                Op::Sum(x) => {
                    if let Some(gx) = acc.slot(*x) {
                        gx.iter_mut().for_each(|o| *o += g[0]);
                    }
                }
                Op::Custom { inputs, backward } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                    let contributions = backward(&values, &node.value, &g);
                    for (input, contribution) in inputs.iter().zip(contributions) {
                        if let Some(slot) = acc.slot(*input) {
                            if slot.len() != contribution.len() {
                                return Err(NumericError::ShapeMismatch {
                                    op: "custom backward",
                                    detail: format!(
                                        "gradient of {} values for input of {}",
                                        contribution.len(),
                                        slot.len()
                                    ),
                                });
                            }
                            add_assign(slot, &contribution);
                        }
                    }
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf => {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Some(Tensor::from_parts(node.value.shape().to_vec(), data))
                }
                _ => None,
            })
            .collect();
        Ok(GradientSet { grads })
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Accumulator<'_> {
    /// Gradient buffer for `v`, created on first use; `None` if `v` does not
    /// need a gradient.
    fn slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }
}

fn attention_backward(
    acc: &mut Accumulator<'_>,
    saved: &AttentionSaved,
    g: &[f64],
) -> Result<(), NumericError> {
    let nodes = acc.nodes;
    let (q, k, v) = (saved.q, saved.k, saved.v);
    let (_, d) = nodes[q.0].value.dims2()?;
    let (heads, seq) = (saved.heads, saved.seq);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qs, ks, vs) = (
        nodes[q.0].value.data(),
        nodes[k.0].value.data(),
        nodes[v.0].value.data(),
    );
    let rows = nodes[q.0].value.len() / d;

    let mut gq = vec![0.0; rows * d];
    let mut gk = vec![0.0; rows * d];
    let mut gv = vec![0.0; rows * d];
    for (b, pos) in saved.valid.iter().enumerate() {
        let nv = pos.len();
        if nv == 0 {
            continue;
        }
        for h in 0..heads {
            let p = &saved.probs[b * heads + h];
            let qh = gather_head(qs, b, seq, d, h, dh, pos);
            let kh = gather_head(ks, b, seq, d, h, dh, pos);
            let vh = gather_head(vs, b, seq, d, h, dh, pos);
            let go = gather_head(g, b, seq, d, h, dh, pos);

            // dV = Pᵀ dO
            let mut dv = vec![0.0; nv * dh];
            matmul_tn_acc(p, &go, &mut dv, nv, nv, dh);
            // dP = dO Vᵀ
            let mut dp = vec![0.0; nv * nv];
            matmul_nt_into(&go, &vh, &mut dp, nv, dh, nv);
            // dS = P ∘ (dP − rowsum(dP ∘ P)), folded with the score scale
            for (dpr, pr) in dp.chunks_exact_mut(nv).zip(p.chunks_exact(nv)) {
                let inner = dot(dpr, pr);
                for j in 0..nv {
                    dpr[j] = pr[j] * (dpr[j] - inner) * scale;
                }
            }
            let mut dq = vec![0.0; nv * dh];
            matmul_into(&dp, &kh, &mut dq, nv, nv, dh);
            let mut dk = vec![0.0; nv * dh];
            matmul_tn_acc(&dp, &qh, &mut dk, nv, nv, dh);

            scatter_head(&mut gq, &dq, b, seq, d, h, dh, pos);
            scatter_head(&mut gk, &dk, b, seq, d, h, dh, pos);
            scatter_head(&mut gv, &dv, b, seq, d, h, dh, pos);
        }
    }
    for (var, grad) in [(q, gq), (k, gk), (v, gv)] {
        if let Some(slot) = acc.slot(var) {
            add_assign(slot, &grad);
        }
    }
    Ok(())
}

fn gather_head(
    src: &[f64],
    b: usize,
    seq: usize,
    d: usize,
    h: usize,
    dh: usize,
    pos: &[usize],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(pos.len() * dh);
    for &t in pos {
        let start = (b * seq + t) * d + h * dh;
        out.extend_from_slice(&src[start..start + dh]);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn scatter_head(
    dst: &mut [f64],
    src: &[f64],
    b: usize,
    seq: usize,
    d: usize,
    h: usize,
    dh: usize,
    pos: &[usize],
) {
    for (r, &t) in pos.iter().enumerate() {
        let start = (b * seq + t) * d + h * dh;
        dst[start..start + dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose(src: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = src[i * m + j];
        }
    }
    out
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// `−Σ_j y_j · ln(max(p_j, PROB_CLIP))` for one example.
pub fn cross_entropy_row(targets: &[f64], probs: &[f64]) -> f64 {
    -targets
        .iter()
        .zip(probs)
        .filter(|(y, _)| **y != 0.0)
        .map(|(y, p)| y * p.max(PROB_CLIP).ln())
        .sum::<f64>()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i3 = tape.constant(Tensor::identity(3));
        let x = tape.constant(t(&[3, 2], &[1.0, -2.0, 3.5, 0.0, 7.0, 1e-3]));
        let y = tape.matmul(i3, x).unwrap();
        assert!(tape.value(y).bit_eq(tape.value(x)));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let y = tape.softmax_rows(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 4], &[800.0, -3.0, 2.0, 1.0, -1e3, 0.0, 1e-9, 5.0]));
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.value(y).data().chunks(4) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn perfect_prediction_has_zero_cross_entropy() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[1, 3], &[1.0, 0.0, 0.0]));
        let loss = tape
            .cross_entropy_with_probs(p, &t(&[1, 3], &[1.0, 0.0, 0.0]))
            .unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn cross_entropy_is_finite_on_hard_zero() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[1, 3], &[0.0, 1.0, 0.0]));
        let loss = tape
            .cross_entropy_with_probs(p, &t(&[1, 3], &[1.0, 0.0, 0.0]))
            .unwrap();
        let v = tape.value(loss).data()[0];
        assert!((v - (-(PROB_CLIP.ln()))).abs() < 1e-12);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).unwrap(), true);
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constants_give_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(t(&[3], &[4.0, 5.0, 6.0]));
        let s = tape.sum(c).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 0.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0).unwrap(), true);
        let y = tape.scale(x, 2.0).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(NumericError::TapeConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(NumericError::NotScalar(_))));
    }

    #[test]
    fn overflow_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1], &[1e200]));
        let err = tape.matmul(x, x).unwrap_err();
        assert!(matches!(err, NumericError::NonFinite { op: "matmul", .. }));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(NumericError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn attention_ignores_masked_tail() {
        // Same two real positions, once with no padding and once with two pads.
        let d = 4;
        let real: Vec<f64> = (0..2 * d).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut padded = real.clone();
        padded.extend(std::iter::repeat(9.0).take(2 * d));

        let mut tape = Tape::new();
        let short = tape.constant(t(&[2, d], &real));
        let long = tape.constant(t(&[4, d], &padded));
        let a = tape
            .attention(short, short, short, &[1.0, 1.0], 2, 2)
            .unwrap();
        let b = tape
            .attention(long, long, long, &[1.0, 1.0, 0.0, 0.0], 4, 2)
            .unwrap();
        assert_eq!(&tape.value(b).data()[..2 * d], tape.value(a).data());
        assert!(tape.value(b).data()[2 * d..].iter().all(|&v| v == 0.0));
    }
}
