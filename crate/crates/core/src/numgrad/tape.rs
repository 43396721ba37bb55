//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every op appends one node holding its forward value and enough saved state
//! to run its vector-Jacobian product. Nodes are appended in evaluation order,
//! so the node list is already a topological order and `backward` is a single
//! reverse sweep.

use std::collections::HashMap;

use super::{NumError, ParamId, ParamStore, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    MulConst(Var, Tensor<F>),
    Scale(Var, F),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, F, F),
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    Assemble {
        sources: Vec<Var>,
        map: Vec<Option<(usize, usize)>>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Attention {
        qkv: Var,
        mask: Vec<bool>,
        tokens: usize,
        heads: usize,
        probs: Vec<F>,
    },
    MaskedMeanPool {
        x: Var,
        mask: Vec<bool>,
        tokens: usize,
    },
    GaussianLogProb {
        mean: Var,
        log_std: Var,
        action: Tensor<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every parameter it touched.
#[derive(Debug, Clone, Default)]
pub struct Gradients<F = f32> {
    grads: Vec<(ParamId, Tensor<F>)>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.grads.iter().map(|(i, g)| (*i, g))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Gradient map keyed by parameter name.
    pub fn named(&self, store: &ParamStore<F>) -> std::collections::BTreeMap<String, Tensor<F>> {
        self.grads
            .iter()
            .map(|(id, g)| (store.get(*id).name.clone(), g.clone()))
            .collect()
    }
}

/// Operation record for one forward pass. Not shared across threads.
pub struct Tape<F = f32> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    skip_frozen: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(msg: String) -> NumError {
    NumError::Dimension(msg)
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            skip_frozen: false,
        }
    }

    /// A tape that records frozen parameters as constants, so `backward` neither
    /// computes nor reports their gradients. Gradients reaching trainable
    /// parameters are unchanged; this only saves work.
    pub fn skipping_frozen() -> Self {
        Self {
            skip_frozen: true,
            ..Self::new()
        }
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

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, name: &str) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite(name.to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Minimum(a, b) => self.requires(*a) || self.requires(*b),
            Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumCols(a) => self.requires(*a),
            Op::ConcatCols(vs) => vs.iter().any(|v| self.requires(*v)),
            Op::Assemble { sources, .. } => sources.iter().any(|v| self.requires(*v)),
            Op::GatherRows { table, .. } => self.requires(*table),
            Op::LayerNorm { x, gamma, beta, .. } => self.requires(*x) || self.requires(*gamma) || self.requires(*beta),
            Op::Attention { qkv, .. } => self.requires(*qkv),
            Op::MaskedMeanPool { x, .. } => self.requires(*x),
            Op::GaussianLogProb { mean, log_std, .. } => self.requires(*mean) || self.requires(*log_std),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var, NumError> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Records a parameter leaf; repeated calls for the same id reuse the node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            requires_grad: p.trainable || !self.skip_frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `x[n,d] + b[d]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumError> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = xv.cols();
        if bv.len() != d {
            return Err(dim_err(format!("bias of {} elements for rows of width {d}", bv.len())));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o = *o + *bb;
            }
        }
        self.push(out, Op::AddBias(x, b), "add_bias")
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(format!("{name}: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let out = self.binary(a, b, "minimum", |x, y| if y < x { y } else { x })?;
        self.push(out, Op::Minimum(a, b), "minimum")
    }

    /// `x + c` for a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<F>) -> Result<Var, NumError> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(dim_err(format!("add_const: {:?} vs {:?}", xv.shape(), c.shape())));
        }
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| *a + *b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::AddConst(x), "add_const")
    }

    /// `x ⊙ c` for a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor<F>) -> Result<Var, NumError> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(dim_err(format!("mul_const: {:?} vs {:?}", xv.shape(), c.shape())));
        }
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| *a * *b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::MulConst(x, c), "mul_const")
    }

    fn unary(&self, x: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let xv = self.value(x);
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect()).expect("same shape")
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var, NumError> {
        let out = self.unary(x, |v| v * s);
        self.push(out, Op::Scale(x, s), "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumError> {
        let out = self.unary(x, |v| if v > F::zero() { v } else { F::zero() });
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumError> {
        let out = self.unary(x, |v| v.tanh());
        self.push(out, Op::Tanh(x), "tanh")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumError> {
        let out = self.unary(x, |v| v.exp());
        self.push(out, Op::Exp(x), "exp")
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NumError> {
        let out = self.unary(x, |v| v * v);
        self.push(out, Op::Square(x), "square")
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Result<Var, NumError> {
        let out = self.unary(x, |v| v.max(lo).min(hi));
        self.push(out, Op::Clamp(x, lo, hi), "clamp")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumError> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumError> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(NumError::Contract("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(xv.sum() / F::of(xv.len() as f64));
        self.push(out, Op::Mean(x), "mean")
    }

    /// Sums each row of a 2-D tensor, producing `[n]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var, NumError> {
        let xv = self.value(x);
        let d = xv.cols().max(1);
        let data: Vec<F> = xv.data().chunks(d).map(|r| r.iter().copied().sum()).collect();
        let out = Tensor::new(vec![data.len()], data)?;
        self.push(out, Op::SumCols(x), "sum_cols")
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(dim_err("concat_cols row counts differ".into()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Builds a `[map.len(), d]` matrix whose row `i` is `sources[s].row(r)` for
    /// `map[i] = Some((s, r))` and zeros for `None`.
    pub fn assemble_rows(&mut self, sources: &[Var], map: Vec<Option<(usize, usize)>>) -> Result<Var, NumError> {
        let d = self.value(sources[0]).cols();
        for s in sources {
            if self.value(*s).cols() != d {
                return Err(dim_err("assemble_rows: token widths differ".into()));
            }
        }
        let mut data = vec![F::zero(); map.len() * d];
        for (i, m) in map.iter().enumerate() {
            if let Some((s, r)) = m {
                let src = self.value(sources[*s]);
                if *r >= src.rows() {
                    return Err(dim_err(format!("assemble_rows: row {r} out of range")));
                }
                data[i * d..(i + 1) * d].copy_from_slice(src.row(*r));
            }
        }
        let out = Tensor::new(vec![map.len(), d], data)?;
        self.push(
            out,
            Op::Assemble {
                sources: sources.to_vec(),
                map,
            },
            "assemble_rows",
        )
    }

    /// Row lookup into a `[k, d]` table.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Result<Var, NumError> {
        let tv = self.value(table);
        let d = tv.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            if i >= tv.rows() {
                return Err(dim_err(format!("gather_rows: index {i} out of range")));
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        self.push(out, Op::GatherRows { table, idx }, "gather_rows")
    }

    /// Per-row layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var, NumError> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(dim_err("layer_norm gain/shift width".into()));
        }
        let n = xv.rows();
        let mut xhat = vec![F::zero(); n * d];
        let mut rstd = vec![F::zero(); n];
        let mut out = vec![F::zero(); n * d];
        let df = F::of(d as f64);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for r in 0..n {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|v| (*v - mu) * (*v - mu)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mu) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Masked multi-head scaled dot-product attention.
    ///
    /// `qkv` is `[B·T, 3d]` with query, key and value blocks side by side.
    /// Absent tokens (`mask[b·T+t] == false`) are skipped as keys and produce
    /// zero output rows, which makes the result identical to dropping them.
    pub fn attention(&mut self, qkv: Var, mask: &[bool], tokens: usize, heads: usize) -> Result<Var, NumError> {
        let qv = self.value(qkv);
        let rows = qv.rows();
        let w = qv.cols();
        if !w.is_multiple_of(3) || !(w / 3).is_multiple_of(heads) {
            return Err(NumError::Config(format!(
                "attention width {} not divisible into 3x{heads} heads",
                w
            )));
        }
        if tokens == 0 || !rows.is_multiple_of(tokens) || mask.len() != rows {
            return Err(dim_err(format!(
                "attention: {rows} rows, {tokens} tokens per sample, mask {}",
                mask.len()
            )));
        }
        let d = w / 3;
        let dh = d / heads;
        let batch = rows / tokens;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let data = qv.data();
        let mut out = vec![F::zero(); rows * d];
        let mut probs = vec![F::zero(); batch * heads * tokens * tokens];
        let mut scores = vec![F::zero(); tokens];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..tokens {
                    let ri = b * tokens + i;
                    if !mask[ri] {
                        continue;
                    }
                    let q = &data[ri * w + h * dh..ri * w + (h + 1) * dh];
                    let mut max = F::neg_infinity();
                    for (j, score) in scores.iter_mut().enumerate() {
                        let rj = b * tokens + j;
                        if !mask[rj] {
                            continue;
                        }
                        let k = &data[rj * w + d + h * dh..rj * w + d + (h + 1) * dh];
                        let s = q.iter().zip(k).map(|(a, c)| *a * *c).sum::<F>() * scale;
                        *score = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut z = F::zero();
                    for j in 0..tokens {
                        if mask[b * tokens + j] {
                            let e = (scores[j] - max).exp();
                            scores[j] = e;
                            z = z + e;
                        }
                    }
                    let pbase = ((b * heads + h) * tokens + i) * tokens;
                    let o = &mut out[ri * d + h * dh..ri * d + (h + 1) * dh];
                    for j in 0..tokens {
                        let rj = b * tokens + j;
                        if !mask[rj] {
                            continue;
                        }
                        let p = scores[j] / z;
                        probs[pbase + j] = p;
                        let v = &data[rj * w + 2 * d + h * dh..rj * w + 2 * d + (h + 1) * dh];
                        for (oo, vv) in o.iter_mut().zip(v) {
                            *oo = *oo + p * *vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        self.push(
            out,
            Op::Attention {
                qkv,
                mask: mask.to_vec(),
                tokens,
                heads,
                probs,
            },
            "attention",
        )
    }

    /// Mean over the present tokens of each sample: `[B·T, d] -> [B, d]`.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool], tokens: usize) -> Result<Var, NumError> {
        let xv = self.value(x);
        let rows = xv.rows();
        let d = xv.cols();
        if tokens == 0 || !rows.is_multiple_of(tokens) || mask.len() != rows {
            return Err(dim_err("masked_mean_pool shape".into()));
        }
        let batch = rows / tokens;
        let mut out = vec![F::zero(); batch * d];
        for b in 0..batch {
            let count = (0..tokens).filter(|t| mask[b * tokens + t]).count();
            if count == 0 {
                return Err(NumError::Contract(format!("sample {b} has no tokens")));
            }
            let inv = F::one() / F::of(count as f64);
            let o = &mut out[b * d..(b + 1) * d];
            for t in 0..tokens {
                let r = b * tokens + t;
                if mask[r] {
                    for (oo, v) in o.iter_mut().zip(xv.row(r)) {
                        *oo = *oo + *v;
                    }
                }
            }
            o.iter_mut().for_each(|v| *v = *v * inv);
        }
        let out = Tensor::new(vec![batch, d], out)?;
        self.push(
            out,
            Op::MaskedMeanPool {
                x,
                mask: mask.to_vec(),
                tokens,
            },
            "masked_mean_pool",
        )
    }

    /// Diagonal Gaussian log-density of each row of `action`: `[B, A] -> [B]`.
    pub fn gaussian_logprob(&mut self, mean: Var, log_std: Var, action: Tensor<F>) -> Result<Var, NumError> {
        let mv = self.value(mean);
        let ls = self.value(log_std);
        if mv.shape() != action.shape() {
            return Err(dim_err(format!("action {:?} vs mean {:?}", action.shape(), mv.shape())));
        }
        let a = mv.cols();
        if ls.len() != a {
            return Err(dim_err("log_std width".into()));
        }
        let half_log_2pi = F::of(0.5 * (2.0 * std::f64::consts::PI).ln());
        let mut out = Vec::with_capacity(mv.rows());
        for r in 0..mv.rows() {
            let mut lp = F::zero();
            for c in 0..a {
                let s = ls.data()[c];
                let z = (action.data()[r * a + c] - mv.data()[r * a + c]) * (-s).exp();
                lp = lp - F::of(0.5) * z * z - s - half_log_2pi;
            }
            out.push(lp);
        }
        let out = Tensor::new(vec![out.len()], out)?;
        self.push(out, Op::GaussianLogProb { mean, log_std, action }, "gaussian_logprob")
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Frozen parameters receive gradients too; freezing is the optimizer's job.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, NumError> {
        if self.value(loss).len() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), F::one()));
        let mut out = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.vjp(node, &g, &mut grads, &mut out)?;
        }
        out.sort_by_key(|(id, _): &(ParamId, Tensor<F>)| *id);
        Ok(Gradients { grads: out })
    }

    fn vjp(
        &self,
        node: &Node<F>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
        params: &mut Vec<(ParamId, Tensor<F>)>,
    ) -> Result<(), NumError> {
        let mut acc = |v: Var, t: Tensor<F>| {
            if !self.requires(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let map = |t: &Tensor<F>, f: &dyn Fn(usize, F) -> F| -> Tensor<F> {
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().enumerate().map(|(i, x)| f(i, *x)).collect(),
            )
            .expect("same shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.push((*id, g.clone())),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires(*a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    if m * n * k > 0 {
                        F::gemm(
                            m,
                            n,
                            k,
                            g.data(),
                            n as isize,
                            1,
                            bv.data(),
                            1,
                            n as isize,
                            F::zero(),
                            da.data_mut(),
                            k as isize,
                            1,
                        );
                    }
                    acc(*a, da);
                }
                if self.requires(*b) {
                    let mut db = Tensor::zeros(&[k, n]);
                    if m * n * k > 0 {
                        F::gemm(
                            k,
                            m,
                            n,
                            av.data(),
                            1,
                            k as isize,
                            g.data(),
                            n as isize,
                            1,
                            F::zero(),
                            db.data_mut(),
                            n as isize,
                            1,
                        );
                    }
                    acc(*b, db);
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                if self.requires(*b) {
                    let d = g.cols().max(1);
                    let mut db = Tensor::zeros(self.shape(*b));
                    for row in g.data().chunks(d) {
                        for (o, v) in db.data_mut().iter_mut().zip(row) {
                            *o = *o + *v;
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, map(g, &|_, x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, map(g, &|i, x| x * bv.data()[i]));
                acc(*b, map(g, &|i, x| x * av.data()[i]));
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // ties route the gradient to the first operand
                acc(
                    *a,
                    map(g, &|i, x| if bv.data()[i] < av.data()[i] { F::zero() } else { x }),
                );
                acc(
                    *b,
                    map(g, &|i, x| if bv.data()[i] < av.data()[i] { x } else { F::zero() }),
                );
            }
            Op::AddConst(x) => acc(*x, g.clone()),
            Op::MulConst(x, c) => acc(*x, map(g, &|i, v| v * c.data()[i])),
            Op::Scale(x, s) => acc(*x, map(g, &|_, v| v * *s)),
            Op::Relu(x) => {
                let y = &node.value;
                acc(*x, map(g, &|i, v| if y.data()[i] > F::zero() { v } else { F::zero() }));
            }
            Op::Tanh(x) => {
                let y = &node.value;
                acc(*x, map(g, &|i, v| v * (F::one() - y.data()[i] * y.data()[i])));
            }
            Op::Exp(x) => {
                let y = &node.value;
                acc(*x, map(g, &|i, v| v * y.data()[i]));
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                acc(*x, map(g, &|i, v| v * F::of(2.0) * xv.data()[i]));
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                acc(
                    *x,
                    map(g, &|i, v| {
                        let xi = xv.data()[i];
                        if xi < *lo || xi > *hi {
                            F::zero()
                        } else {
                            v
                        }
                    }),
                );
            }
            Op::Sum(x) => acc(*x, Tensor::filled(self.shape(*x), g.item())),
            Op::Mean(x) => {
                let n = F::of(self.value(*x).len() as f64);
                acc(*x, Tensor::filled(self.shape(*x), g.item() / n));
            }
            Op::SumCols(x) => {
                let xv = self.value(*x);
                let d = xv.cols().max(1);
                acc(*x, Tensor::from_fn(xv.shape(), |i| g.data()[i / d]));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.requires(*p) {
                        let mut t = Tensor::zeros(self.shape(*p));
                        for r in 0..rows {
                            t.data_mut()[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        acc(*p, t);
                    }
                    off += w;
                }
            }
            Op::Assemble { sources, map: rows } => {
                let d = g.cols();
                let mut parts: Vec<Option<Tensor<F>>> = sources
                    .iter()
                    .map(|s| self.requires(*s).then(|| Tensor::zeros(self.shape(*s))))
                    .collect();
                for (i, m) in rows.iter().enumerate() {
                    if let Some((s, r)) = m {
                        if let Some(t) = &mut parts[*s] {
                            let dst = &mut t.data_mut()[r * d..(r + 1) * d];
                            for (o, v) in dst.iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
                                *o = *o + *v;
                            }
                        }
                    }
                }
                for (s, t) in sources.iter().zip(parts) {
                    if let Some(t) = t {
                        acc(*s, t);
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let d = g.cols();
                let mut t = Tensor::zeros(self.shape(*table));
                for (i, &r) in idx.iter().enumerate() {
                    let dst = &mut t.data_mut()[r * d..(r + 1) * d];
                    for (o, v) in dst.iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
                        *o = *o + *v;
                    }
                }
                acc(*table, t);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = g.cols();
                let n = g.rows();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                let mut dx = vec![F::zero(); n * d];
                let df = F::of(d as f64);
                for r in 0..n {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for c in 0..d {
                        dgamma[c] = dgamma[c] + gr[c] * hr[c];
                        dbeta[c] = dbeta[c] + gr[c];
                        let dh = gr[c] * gam[c];
                        s1 = s1 + dh;
                        s2 = s2 + dh * hr[c];
                    }
                    for c in 0..d {
                        let dh = gr[c] * gam[c];
                        dx[r * d + c] = rstd[r] / df * (df * dh - s1 - hr[c] * s2);
                    }
                }
                acc(*x, Tensor::new(g.shape().to_vec(), dx)?);
                acc(*gamma, Tensor::new(self.shape(*gamma).to_vec(), dgamma)?);
                acc(*beta, Tensor::new(self.shape(*beta).to_vec(), dbeta)?);
            }
            Op::Attention {
                qkv,
                mask,
                tokens,
                heads,
                probs,
            } => {
                let qv = self.value(*qkv);
                let w = qv.cols();
                let d = w / 3;
                let dh = d / heads;
                let rows = qv.rows();
                let batch = rows / tokens;
                let scale = F::one() / F::of(dh as f64).sqrt();
                let data = qv.data();
                let gd = g.data();
                let mut dqkv = vec![F::zero(); rows * w];
                let mut dp = vec![F::zero(); *tokens];
                for b in 0..batch {
                    for h in 0..*heads {
                        for i in 0..*tokens {
                            let ri = b * tokens + i;
                            if !mask[ri] {
                                continue;
                            }
                            let go = &gd[ri * d + h * dh..ri * d + (h + 1) * dh];
                            let pbase = ((b * heads + h) * tokens + i) * tokens;
                            let mut dot = F::zero();
                            for j in 0..*tokens {
                                let rj = b * tokens + j;
                                if !mask[rj] {
                                    continue;
                                }
                                let p = probs[pbase + j];
                                let voff = rj * w + 2 * d + h * dh;
                                let mut s = F::zero();
                                for c in 0..dh {
                                    s = s + go[c] * data[voff + c];
                                    dqkv[voff + c] = dqkv[voff + c] + p * go[c];
                                }
                                dp[j] = s;
                                dot = dot + p * s;
                            }
                            let qoff = ri * w + h * dh;
                            for j in 0..*tokens {
                                let rj = b * tokens + j;
                                if !mask[rj] {
                                    continue;
                                }
                                let ds = probs[pbase + j] * (dp[j] - dot) * scale;
                                let koff = rj * w + d + h * dh;
                                for c in 0..dh {
                                    dqkv[qoff + c] = dqkv[qoff + c] + ds * data[koff + c];
                                    dqkv[koff + c] = dqkv[koff + c] + ds * data[qoff + c];
                                }
                            }
                        }
                    }
                }
                acc(*qkv, Tensor::new(qv.shape().to_vec(), dqkv)?);
            }
            Op::MaskedMeanPool { x, mask, tokens } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = vec![F::zero(); xv.len()];
                for b in 0..g.rows() {
                    let count = (0..*tokens).filter(|t| mask[b * tokens + t]).count();
                    let inv = F::one() / F::of(count as f64);
                    for t in 0..*tokens {
                        let r = b * tokens + t;
                        if mask[r] {
                            for c in 0..d {
                                dx[r * d + c] = g.data()[b * d + c] * inv;
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::GaussianLogProb { mean, log_std, action } => {
                let mv = self.value(*mean);
                let ls = self.value(*log_std).data();
                let a = mv.cols();
                let mut dmean = vec![F::zero(); mv.len()];
                let mut dls = vec![F::zero(); a];
                for r in 0..mv.rows() {
                    let gr = g.data()[r];
                    for c in 0..a {
                        let inv_var = (F::of(-2.0) * ls[c]).exp();
                        let diff = action.data()[r * a + c] - mv.data()[r * a + c];
                        dmean[r * a + c] = gr * diff * inv_var;
                        dls[c] = dls[c] + gr * (diff * diff * inv_var - F::one());
                    }
                }
                acc(*mean, Tensor::new(mv.shape().to_vec(), dmean)?);
                acc(*log_std, Tensor::new(self.shape(*log_std).to_vec(), dls)?);
            }
        }
        Ok(())
    }
}
