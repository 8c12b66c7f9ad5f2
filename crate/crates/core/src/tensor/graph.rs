use super::kernels::{gemm, Layout};
use super::{Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Normalization epsilon of [`Graph::rms_norm`].
pub const RMS_EPS: f64 = 1e-6;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        dims: (usize, usize, usize),
        shared_rhs: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: F,
    },
    Transpose {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Slice {
        a: Var,
        start: usize,
        end: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        a: Var,
    },
    Silu {
        a: Var,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    MaskedFill {
        a: Var,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Define-by-run record of primitive applications. Node ids are assigned in
/// creation order, so every input precedes its consumer.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Graph::backward`] for every leaf that required them.
#[derive(Debug)]
pub struct Gradients<F> {
    leaves: Vec<(Var, Option<ParamId>, Tensor<F>)>,
}

impl<F: Float> Gradients<F> {
    /// `None` for tensors that were detached or never reached by the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaves.iter().find(|(id, _, _)| *id == v).map(|(_, _, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.leaves.iter().filter_map(|(_, p, g)| p.map(|p| (p, g)))
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; its gradient is reported under `id`.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: p.requires_grad,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// `[.., m, k] x [k, n]` (rhs shared across the batch) or
    /// `[.., m, k] x [.., k, n]` with identical leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("operands must be rank >= 2: {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", format!("inner dims differ: {sa:?} x {sb:?}")));
        }
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(Error::shape("matmul", format!("batch dims differ: {sa:?} x {sb:?}")));
        }
        let batch: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);

        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![F::zero(); batch * m * n];
        if shared_rhs {
            gemm(Layout::NN, (batch * m, k, n), av, bv, &mut out);
        } else {
            for i in 0..batch {
                gemm(
                    Layout::NN,
                    (m, k, n),
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        let (batch, dims) = if shared_rhs { (1, (batch * m, k, n)) } else { (batch, (m, k, n)) };
        self.push("matmul", value, Op::MatMul { a, b, batch, dims, shared_rhs }, &[a, b])
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if !is_suffix(self.shape(a), self.shape(b)) {
            return Err(Error::shape(
                op,
                format!(
                    "rhs {:?} must equal trailing dims of lhs {:?}",
                    self.shape(b),
                    self.shape(a)
                ),
            ));
        }
        Ok(())
    }

    /// Element-wise sum; `b` may broadcast over the leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let bv = self.value(b).data();
        let value = Tensor::new(
            self.shape(a),
            self.value(a)
                .data()
                .chunks(bv.len())
                .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
                .collect(),
        )?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// Element-wise product; `b` may broadcast over the leading dims of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let bv = self.value(b).data();
        let value = Tensor::new(
            self.shape(a),
            self.value(a)
                .data()
                .chunks(bv.len())
                .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x * y))
                .collect(),
        )?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push("scale", value, Op::Scale { a, c }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("needs rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let data = transpose_last(self.value(a).data(), r, c);
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let value = Tensor::new(&shape, data)?;
        self.push("transpose", value, Op::Transpose { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(a)
            .reshaped(shape)
            .map_err(|e| Error::shape("reshape", e.to_string()))?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Keeps `[start, end)` of the last dimension.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().expect("rank >= 1");
        if start >= end || end > d {
            return Err(Error::shape("slice_last", format!("range {start}..{end} out of last dim {d}")));
        }
        let data = self
            .value(a)
            .data()
            .chunks(d)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().expect("rank >= 1") = end - start;
        let value = Tensor::new(&shape, data)?;
        self.push("slice_last", value, Op::Slice { a, start, end }, &[a])
    }

    /// Concatenates along the last dimension; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_last", "no operands"));
        };
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != *lead {
                return Err(Error::shape(
                    "concat_last",
                    format!("leading dims differ: {:?} vs {:?}", self.shape(first), s),
                ));
            }
            widths.push(*s.last().expect("rank >= 1"));
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        self.push("concat_last", value, Op::Concat { parts: parts.to_vec() }, parts)
    }

    /// Rows of `table` (`[vocab, d]`) for each id; output shape `ids_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("embedding", format!("table must be rank 2, got {ts:?}")));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", format!("{} ids for shape {ids_shape:?}", ids.len())));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!("token id {bad} out of range for vocab {vocab}")));
        }
        let tv = self.value(table).data();
        let data = ids.iter().flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied()).collect();
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(&shape, data)?;
        self.push("embedding", value, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(a), data)?;
        self.push("softmax_last", value, Op::Softmax { a }, &[a])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", value, Op::Silu { a }, &[a])
    }

    /// `x / sqrt(mean(x^2) + eps)` over the last dim, times the gain vector.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] {
            return Err(Error::shape(
                "rms_norm",
                format!("gain {:?} does not match last dim {d}", self.shape(gain)),
            ));
        }
        let eps = F::lit(RMS_EPS);
        let n = F::from_usize(d).expect("usize fits Float");
        let g = self.value(gain).data();
        let xv = self.value(x).data();
        let mut inv_rms = Vec::with_capacity(xv.len() / d);
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let ms = row.iter().map(|&v| v * v).sum::<F>() / n;
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().zip(g).map(|(&v, &gv)| v * inv * gv));
        }
        let value = Tensor::new(self.shape(x), data)?;
        self.push("rms_norm", value, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    /// Weighted mean of per-row cross-entropy, `sum_i w_i * ce_i / sum_i w_i`.
    /// `weights = None` weighs every row equally.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[F]>) -> Result<Var> {
        let vocab = self.value(logits).last_dim();
        let rows = self.value(logits).numel() / vocab;
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {rows} logit rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("target id {bad} out of range for vocab {vocab}")));
        }
        let weights = match weights {
            Some(w) if w.len() != rows => {
                return Err(Error::shape("cross_entropy", format!("{} weights for {rows} rows", w.len())))
            }
            Some(w) => w.to_vec(),
            None => vec![F::one(); rows],
        };
        let total: F = weights.iter().copied().sum();
        if total <= F::zero() {
            return Err(Error::Input("cross_entropy: weights sum to zero".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = F::zero();
        for ((row, &t), &w) in probs.chunks_mut(vocab).zip(targets).zip(&weights) {
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            loss = loss + w * (lse - row[t]);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / total);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            &[logits],
        )
    }

    /// Replaces entries where `mask` is true by `fill`. `mask` covers the
    /// trailing dims of `a` and repeats over the leading ones.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: F) -> Result<Var> {
        let n = self.value(a).numel();
        if mask.is_empty() || !n.is_multiple_of(mask.len()) {
            return Err(Error::shape(
                "masked_fill",
                format!("mask of {} elements does not tile {:?}", mask.len(), self.shape(a)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .chunks(mask.len())
            .flat_map(|row| row.iter().zip(mask).map(|(&v, &m)| if m { fill } else { v }))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push("masked_fill", value, Op::MaskedFill { a, mask: mask.to_vec() }, &[a])
    }

    /// `sum(x * w)` as a `[1]` scalar, composed from reshape and matmul.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor<F>) -> Result<Var> {
        let n = self.value(x).numel();
        if w.numel() != n {
            return Err(Error::shape("weighted_sum", format!("{} weights for {n} values", w.numel())));
        }
        let row = self.reshape(x, &[1, n])?;
        let col = self.constant(w.reshaped(&[n, 1])?);
        let prod = self.matmul(row, col)?;
        self.reshape(prod, &[1])
    }

    /// Reverse sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        let n_nodes = self.nodes.len();
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..n_nodes).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(gy);
                continue;
            }
            self.propagate(id, &gy, &mut grads)?;
        }

        let mut leaves = Vec::new();
        for (id, node) in self.nodes.into_iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            if let Some(g) = grads[id].take() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                leaves.push((Var(id), node.param, Tensor::new(node.value.shape(), g)?));
            }
        }
        Ok(Gradients { leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, gy: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                dims: (m, k, n),
                shared_rhs,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.wants(a) {
                    let mut ga = vec![F::zero(); batch * m * k];
                    for i in 0..batch {
                        let bslice = if shared_rhs { bv } else { &bv[i * k * n..(i + 1) * k * n] };
                        gemm(
                            Layout::NT,
                            (m, n, k),
                            &gy[i * m * n..(i + 1) * m * n],
                            bslice,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    accumulate(grads, a, ga);
                }
                if self.wants(b) {
                    let mut gb = vec![F::zero(); self.value(b).numel()];
                    for i in 0..batch {
                        let out = if shared_rhs { &mut gb[..] } else { &mut gb[i * k * n..(i + 1) * k * n] };
                        gemm(
                            Layout::TN,
                            (k, m, n),
                            &av[i * m * k..(i + 1) * m * k],
                            &gy[i * m * n..(i + 1) * m * n],
                            out,
                        );
                    }
                    accumulate(grads, b, gb);
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    accumulate(grads, a, gy.to_vec());
                }
                if self.wants(b) {
                    let nb = self.value(b).numel();
                    let mut gb = vec![F::zero(); nb];
                    for row in gy.chunks(nb) {
                        for (g, &v) in gb.iter_mut().zip(row) {
                            *g = *g + v;
                        }
                    }
                    accumulate(grads, b, gb);
                }
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let nb = bv.len();
                if self.wants(a) {
                    let ga = gy
                        .chunks(nb)
                        .flat_map(|row| row.iter().zip(bv).map(|(&g, &y)| g * y))
                        .collect();
                    accumulate(grads, a, ga);
                }
                if self.wants(b) {
                    let mut gb = vec![F::zero(); nb];
                    for (grow, arow) in gy.chunks(nb).zip(av.chunks(nb)) {
                        for ((g, &gv), &x) in gb.iter_mut().zip(grow).zip(arow) {
                            *g = *g + gv * x;
                        }
                    }
                    accumulate(grads, b, gb);
                }
            }
            &Op::Scale { a, c } => {
                if self.wants(a) {
                    accumulate(grads, a, gy.iter().map(|&g| g * c).collect());
                }
            }
            &Op::Transpose { a } => {
                if self.wants(a) {
                    let s = node.value.shape();
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    accumulate(grads, a, transpose_last(gy, r, c));
                }
            }
            &Op::Reshape { a } => {
                if self.wants(a) {
                    accumulate(grads, a, gy.to_vec());
                }
            }
            &Op::Slice { a, start, end } => {
                if self.wants(a) {
                    let d = self.value(a).last_dim();
                    let w = end - start;
                    let mut ga = vec![F::zero(); self.value(a).numel()];
                    for (grow, g) in ga.chunks_mut(d).zip(gy.chunks(w)) {
                        grow[start..end].copy_from_slice(g);
                    }
                    accumulate(grads, a, ga);
                }
            }
            Op::Concat { parts } => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.wants(p) {
                        let gp = gy
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let d = self.value(*table).last_dim();
                    let mut gt = vec![F::zero(); self.value(*table).numel()];
                    for (&i, g) in ids.iter().zip(gy.chunks(d)) {
                        for (t, &v) in gt[i * d..(i + 1) * d].iter_mut().zip(g) {
                            *t = *t + v;
                        }
                    }
                    accumulate(grads, *table, gt);
                }
            }
            &Op::Softmax { a } => {
                if self.wants(a) {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let mut ga = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(d).zip(gy.chunks(d)) {
                        let dot: F = yr.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                        ga.extend(yr.iter().zip(gr).map(|(&p, &g)| p * (g - dot)));
                    }
                    accumulate(grads, a, ga);
                }
            }
            &Op::Silu { a } => {
                if self.wants(a) {
                    let ga = self
                        .value(a)
                        .data()
                        .iter()
                        .zip(gy)
                        .map(|(&x, &g)| {
                            let s = sigmoid(x);
                            g * s * (F::one() + x * (F::one() - s))
                        })
                        .collect();
                    accumulate(grads, a, ga);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let xv = self.value(x).data();
                let g = self.value(gain).data();
                let d = g.len();
                let n = F::from_usize(d).expect("usize fits Float");
                if self.wants(x) {
                    let mut gx = Vec::with_capacity(xv.len());
                    for ((xr, gr), &inv) in xv.chunks(d).zip(gy.chunks(d)).zip(inv_rms) {
                        // u = g * dy; dx = inv * u - x * inv^3 * <u, x> / n
                        let dot: F = xr.iter().zip(gr).zip(g).map(|((&xv, &dy), &gv)| gv * dy * xv).sum();
                        let c = inv * inv * inv * dot / n;
                        gx.extend(
                            xr.iter()
                                .zip(gr)
                                .zip(g)
                                .map(|((&xv, &dy), &gv)| inv * gv * dy - xv * c),
                        );
                    }
                    accumulate(grads, x, gx);
                }
                if self.wants(gain) {
                    let mut gg = vec![F::zero(); d];
                    for ((xr, gr), &inv) in xv.chunks(d).zip(gy.chunks(d)).zip(inv_rms) {
                        for ((acc, &xv), &dy) in gg.iter_mut().zip(xr).zip(gr) {
                            *acc = *acc + dy * xv * inv;
                        }
                    }
                    accumulate(grads, gain, gg);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if self.wants(*logits) {
                    let vocab = self.value(*logits).last_dim();
                    let total: F = weights.iter().copied().sum();
                    let scale = gy[0] / total;
                    let mut gl = probs.clone();
                    for ((row, &t), &w) in gl.chunks_mut(vocab).zip(targets).zip(weights) {
                        row[t] = row[t] - F::one();
                        let c = w * scale;
                        for v in row.iter_mut() {
                            *v = *v * c;
                        }
                    }
                    accumulate(grads, *logits, gl);
                }
            }
            Op::MaskedFill { a, mask } => {
                if self.wants(*a) {
                    let ga = gy
                        .chunks(mask.len())
                        .flat_map(|row| row.iter().zip(mask).map(|(&g, &m)| if m { F::zero() } else { g }))
                        .collect();
                    accumulate(grads, *a, ga);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<F: Float>(grads: &mut [Option<Vec<F>>], v: Var, delta: Vec<F>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn transpose_last<F: Float>(x: &[F], r: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (src, dst) in x.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}
