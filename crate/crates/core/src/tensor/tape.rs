use super::kernels::{gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Layer-norm variance guard.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    GroupScale { x: Var, s: Var },
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// reverse. Inputs always precede their consumers because a `Var` can only be
/// obtained from an earlier push.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    tracked: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `None` for untracked values. Tracked values the loss does not depend on
    /// get an all-zero gradient.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        if !self.tracked[var.0] {
            return None;
        }
        let shape = self.shapes[var.0].clone();
        let data = match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => vec![0.0; shape.iter().product()],
        };
        Some(Tensor::raw(shape, data))
    }

    /// Borrowing variant of [`Gradients::get`]; `None` also when the value was
    /// never reached.
    pub fn raw(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is recorded.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, tracked: bool) -> Var {
        self.push(t, Op::Leaf, tracked)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn tracked2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].tracked || self.nodes[b.0].tracked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let tracked = self.tracked2(a, b);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::MatMul(a, b), tracked))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0];
        let (bs, m, k) = if ok { (sa[0], sa[1], sa[2]) } else { (0, 0, 0) };
        let n = if trans_b { sb.get(1) } else { sb.get(2) }.copied().unwrap_or(0);
        let inner = if trans_b { sb.get(2) } else { sb.get(1) }.copied().unwrap_or(usize::MAX);
        if !ok || inner != k {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let mut out = vec![0.0; bs * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..bs {
                let ab = &ad[i * m * k..(i + 1) * m * k];
                let bb = &bd[i * k * n..(i + 1) * k * n];
                let ob = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    gemm_nt(ab, bb, ob, m, k, n);
                } else {
                    gemm_nn(ab, bb, ob, m, k, n);
                }
            }
        }
        let tracked = self.tracked2(a, b);
        Ok(self.push(
            Tensor::raw(vec![bs, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            tracked,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked2(a, b);
        Ok(self.push(Tensor::raw(shape, data), Op::Add(a, b), tracked))
    }

    /// Adds a `[n]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked2(x, bias);
        Ok(self.push(Tensor::raw(shape, data), Op::AddRow(x, bias), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked2(a, b);
        Ok(self.push(Tensor::raw(shape, data), Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let tracked = self.nodes[x.0].tracked;
        self.push(Tensor::raw(shape, data), Op::Scale(x, c), tracked)
    }

    /// Elementwise product with a constant tensor (dropout keep-masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(x).numel() {
            return Err(Error::shape("mul_const", self.shape(x), &[factors.len()]));
        }
        let data = self.value(x).data().iter().zip(&factors).map(|(v, f)| v * f).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(Tensor::raw(shape, data), Op::MulConst(x, factors), tracked))
    }

    /// Splits the rows of `x` into `s.numel()` equal consecutive groups and
    /// multiplies group `g` by the scalar `s[g]`.
    pub fn group_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let groups = self.value(s).numel();
        let rows = self.value(x).rows();
        if groups == 0 || !rows.is_multiple_of(groups) {
            return Err(Error::shape("group_scale", self.shape(x), self.shape(s)));
        }
        let per_group = rows / groups * self.value(x).cols();
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(per_group.max(1))
            .zip(sv)
            .flat_map(|(chunk, &g)| chunk.iter().map(move |v| g * v))
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked2(x, s);
        Ok(self.push(Tensor::raw(shape, data), Op::GroupScale { x, s }, tracked))
    }

    /// Elementwise GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu(v)).collect();
        let shape = t.shape().to_vec();
        let tracked = self.nodes[x.0].tracked;
        self.push(Tensor::raw(shape, data), Op::Gelu(x), tracked)
    }

    /// Normalizes each row over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).rows();
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        {
            let (xd, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
            for r in 0..rows {
                let row = &xd[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[r] = inv;
                for j in 0..n {
                    let h = (row[j] - mean) * inv;
                    xhat[r * n + j] = h;
                    out[r * n + j] = g[j] * h + b[j];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.nodes[x.0].tracked || self.tracked2(gain, bias);
        Ok(self.push(
            Tensor::raw(shape, out),
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            tracked,
        ))
    }

    /// Softmax over the last dimension, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).cols();
        self.softmax_impl(x, |_| n)
    }

    /// Softmax over the last dimension of a `[B, m, n]` tensor where only the
    /// first `key_lens[b]` columns of batch `b` participate; the rest get
    /// probability exactly zero.
    pub fn softmax_keys_masked(&mut self, x: Var, key_lens: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || key_lens.len() != shape[0] {
            return Err(Error::shape("softmax_keys_masked", &shape, &[key_lens.len()]));
        }
        let (m, n) = (shape[1], shape[2]);
        if key_lens.iter().any(|&l| l == 0 || l > n) {
            return Err(Error::Input("softmax key length out of range".into()));
        }
        let lens = key_lens.to_vec();
        self.softmax_impl(x, move |row| lens[row / m])
    }

    fn softmax_impl(&mut self, x: Var, valid: impl Fn(usize) -> usize) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if n == 0 {
            return Err(Error::Input("softmax over zero columns".into()));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = vec![0.0; t.numel()];
        for (r, (row, o)) in t.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let k = valid(r);
            let max = row[..k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..k {
                let e = (row[j] - max).exp();
                o[j] = e;
                total += e;
            }
            for v in &mut o[..k] {
                *v /= total;
            }
        }
        let shape = t.shape().to_vec();
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(Tensor::raw(shape, out), Op::Softmax(x), tracked))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding", t.shape(), &[]));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { what: "embedding", index: id, bound: v });
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let tracked = self.nodes[table.0].tracked;
        Ok(self.push(
            Tensor::raw(vec![ids.len(), d], data),
            Op::Embedding { table, ids: ids.to_vec() },
            tracked,
        ))
    }

    /// Picks rows of `x` viewed as `[rows, cols]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (nrows, n) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= nrows {
                return Err(Error::Index { what: "select_rows", index: r, bound: nrows });
            }
            data.extend_from_slice(&t.data()[r * n..(r + 1) * n]);
        }
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(
            Tensor::raw(vec![rows.len(), n], data),
            Op::SelectRows { x, rows: rows.to_vec() },
            tracked,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let tracked = self.nodes[x.0].tracked;
        Ok(self.push(t, Op::Reshape(x), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let tracked = self.nodes[x.0].tracked;
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// Mean negative log-likelihood over the rows of `[N, C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let n = labels.len().max(1) as f64;
        let weights = vec![1.0 / n; labels.len()];
        self.cross_entropy_weighted(logits, labels, &weights)
    }

    /// `Σ_r weights[r] · (−log softmax(logits_r)[labels[r]])`.
    pub fn cross_entropy_weighted(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        let c = t.cols();
        if t.rows() != labels.len() || weights.len() != labels.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[labels.len()]));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("cross_entropy logits".into()));
        }
        let mut probs = vec![0.0; t.numel()];
        let mut loss = 0.0;
        for (r, (row, p)) in t.data().chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            let y = labels[r];
            if y >= c {
                return Err(Error::Index { what: "cross_entropy label", index: y, bound: c });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (pj, &z) in p.iter_mut().zip(row) {
                *pj = (z - max).exp();
                total += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= total;
            }
            loss += weights[r] * (total.ln() + max - row[y]);
        }
        let tracked = self.nodes[logits.0].tracked;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar root. Every recorded operation is visited
    /// once, in reverse recording order.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let len = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].tracked {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..len).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            tracked: self.nodes.iter().map(|n| n.tracked).collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.is_tracked(*a) {
                    let ga = self.slot(grads, *a);
                    gemm_nt(g, self.value(*b).data(), ga, m, n, k);
                }
                if self.is_tracked(*b) {
                    let av = self.value(*a).data();
                    let gb = self.slot(grads, *b);
                    gemm_tn(av, g, gb, m, k, n);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                if self.is_tracked(*a) {
                    let bd = self.value(*b).data();
                    let ga = self.slot(grads, *a);
                    for t in 0..bs {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bb = &bd[t * k * n..(t + 1) * k * n];
                        let gat = &mut ga[t * m * k..(t + 1) * m * k];
                        if *trans_b {
                            // a[m×k] = g[m×n] · b[n×k]
                            gemm_nn(gt, bb, gat, m, n, k);
                        } else {
                            gemm_nt(gt, bb, gat, m, n, k);
                        }
                    }
                }
                if self.is_tracked(*b) {
                    let ad = self.value(*a).data();
                    let gb = self.slot(grads, *b);
                    for t in 0..bs {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &ad[t * m * k..(t + 1) * m * k];
                        let gbt = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            // b[n×k] = gᵀ[n×m] · a[m×k]
                            gemm_tn(gt, at, gbt, m, n, k);
                        } else {
                            gemm_tn(at, gt, gbt, m, k, n);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.is_tracked(v) {
                        add_into(self.slot(grads, v), g);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.is_tracked(*x) {
                    add_into(self.slot(grads, *x), g);
                }
                if self.is_tracked(*bias) {
                    let gb = self.slot(grads, *bias);
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.is_tracked(*a) {
                    let bv = self.value(*b).data();
                    for ((o, gi), bi) in self.slot(grads, *a).iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if self.is_tracked(*b) {
                    let av = self.value(*a).data();
                    for ((o, gi), ai) in self.slot(grads, *b).iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.is_tracked(*x) {
                    for (o, gi) in self.slot(grads, *x).iter_mut().zip(g) {
                        *o += gi * c;
                    }
                }
            }
            Op::MulConst(x, f) => {
                if self.is_tracked(*x) {
                    for ((o, gi), fi) in self.slot(grads, *x).iter_mut().zip(g).zip(f) {
                        *o += gi * fi;
                    }
                }
            }
            Op::GroupScale { x, s } => {
                let groups = self.value(*s).numel();
                let per_group = self.value(*x).numel() / groups;
                if self.is_tracked(*x) {
                    let sv = self.value(*s).data();
                    let gx = self.slot(grads, *x);
                    for ((o, gc), &sg) in gx.chunks_mut(per_group).zip(g.chunks(per_group)).zip(sv) {
                        for (oi, gi) in o.iter_mut().zip(gc) {
                            *oi += gi * sg;
                        }
                    }
                }
                if self.is_tracked(*s) {
                    let xv = self.value(*x).data();
                    let gs = self.slot(grads, *s);
                    for ((o, gc), xc) in gs.iter_mut().zip(g.chunks(per_group)).zip(xv.chunks(per_group)) {
                        *o += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Gelu(x) => {
                if self.is_tracked(*x) {
                    let xv = self.value(*x).data();
                    for ((o, gi), xi) in self.slot(grads, *x).iter_mut().zip(g).zip(xv) {
                        *o += gi * gelu_grad(*xi);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = self.value(*x).cols();
                if self.is_tracked(*x) {
                    let gv = self.value(*gain).data();
                    let gx = self.slot(grads, *x);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let out = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] += inv_std[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if self.is_tracked(*gain) {
                    let gg = self.slot(grads, *gain);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.is_tracked(*bias) {
                    let gb = self.slot(grads, *bias);
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                }
            }
            Op::Softmax(x) => {
                if self.is_tracked(*x) {
                    let n = node.value.cols();
                    let y = node.value.data();
                    let gx = self.slot(grads, *x);
                    for ((o, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            o[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.is_tracked(*table) {
                    let d = self.value(*table).cols();
                    let gt = self.slot(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if self.is_tracked(*x) {
                    let n = self.value(*x).cols();
                    let gx = self.slot(grads, *x);
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                }
            }
            Op::Reshape(x) => {
                if self.is_tracked(*x) {
                    add_into(self.slot(grads, *x), g);
                }
            }
            Op::Sum(x) => {
                if self.is_tracked(*x) {
                    for o in self.slot(grads, *x).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::CrossEntropy { logits, labels, weights, probs } => {
                if self.is_tracked(*logits) {
                    let c = self.value(*logits).cols();
                    let gl = self.slot(grads, *logits);
                    for (r, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                        let scale = g[0] * w;
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let numel = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; numel])
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
