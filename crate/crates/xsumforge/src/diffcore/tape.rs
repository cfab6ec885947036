use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::{shape_err, DiffError, Result, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

/// Padding behavior for [`Tape::conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// k-1 zero rows on both sides, center-cropped back to the input length:
    /// floor((k-1)/2) raw outputs dropped on the left, the rest on the right.
    Symmetric,
    /// k-1 zero rows on the left only, so output i sees inputs <= i.
    Causal,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Concat(usize, usize),
    Sum(usize),
    Linear { x: usize, w: usize, b: usize },
    MatMul { a: usize, b: usize },
    MatMulNT { a: usize, b: usize },
    Conv1d { x: usize, w: usize, b: usize, k: usize, pad: PadMode },
    Glu(usize),
    Softmax(usize),
    SoftmaxXent { logits: usize, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64>, n_live: usize },
    Lookup { table: usize, ids: Vec<usize> },
    Dropout { x: usize, mask: Vec<f64> },
    WeightNormRows { v: usize, g: usize },
    WeightNormCols { v: usize, g: usize },
    LayerNorm { x: usize, eps: f64 },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    /// True when the subtree below this node contains a grad-requiring leaf.
    relevant: bool,
}

/// Append-only record of a forward computation. Parents always precede
/// children, so one reverse sweep performs backpropagation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(DiffError::DetachedTensor);
        }
        Ok(id.index)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, relevant: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node { op, shape, values, relevant });
        NodeId { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn relevant(&self, index: usize) -> bool {
        self.nodes[index].relevant
    }

    /// Records a tensor as a leaf; gradients are accumulated for it when the
    /// tensor requires them.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape().to_vec(), t.values().to_vec(), t.requires_grad())
    }

    /// Records a constant leaf that never receives gradients.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        self.push(Op::Leaf, shape.to_vec(), values, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> NodeId {
        let numel = shape.iter().product::<usize>();
        self.constant(shape, vec![0.0; numel])
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        let i = self.check(id).expect("node belongs to another tape");
        &self.nodes[i].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        let i = self.check(id).expect("node belongs to another tape");
        &self.nodes[i].values
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let vals = self.values(id);
        assert_eq!(vals.len(), 1, "scalar_value on non-scalar node");
        vals[0]
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let i = self.check(id).expect("node belongs to another tape");
        Tensor::new(&self.nodes[i].shape, self.nodes[i].values.clone())
    }

    /// Gradient of the last [`Tape::backward`] target with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        let i = self.check(id).ok()?;
        self.grads.get(i).and_then(|g| g.as_deref())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].shape != self.nodes[bi].shape {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.nodes[ai].shape, self.nodes[bi].shape),
            ));
        }
        let values: Vec<f64> = self.nodes[ai]
            .values
            .iter()
            .zip(&self.nodes[bi].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[ai].shape.clone();
        let relevant = self.relevant(ai) || self.relevant(bi);
        Ok(self.push(Op::Add(ai, bi), shape, values, relevant))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].shape != self.nodes[bi].shape {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", self.nodes[ai].shape, self.nodes[bi].shape),
            ));
        }
        let values: Vec<f64> = self.nodes[ai]
            .values
            .iter()
            .zip(&self.nodes[bi].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[ai].shape.clone();
        let relevant = self.relevant(ai) || self.relevant(bi);
        Ok(self.push(Op::Mul(ai, bi), shape, values, relevant))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let xi = self.check(x)?;
        let values: Vec<f64> = self.nodes[xi].values.iter().map(|v| v * c).collect();
        let shape = self.nodes[xi].shape.clone();
        let relevant = self.relevant(xi);
        Ok(self.push(Op::Scale(xi, c), shape, values, relevant))
    }

    /// Concatenates two matrices along the last dimension.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("concat", format!("{sa:?} vs {sb:?}")));
        }
        let (n, p, q) = (sa[0], sa[1], sb[1]);
        let mut values = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            values.extend_from_slice(&self.nodes[ai].values[i * p..(i + 1) * p]);
            values.extend_from_slice(&self.nodes[bi].values[i * q..(i + 1) * q]);
        }
        let relevant = self.relevant(ai) || self.relevant(bi);
        Ok(self.push(Op::Concat(ai, bi), vec![n, p + q], values, relevant))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.check(x)?;
        let total: f64 = self.nodes[xi].values.iter().sum();
        let relevant = self.relevant(xi);
        Ok(self.push(Op::Sum(xi), vec![], vec![total], relevant))
    }

    /// `x @ w + b` for `x` of shape `[a]` or `[r, a]`, `w` of `[a, m]`, `b` of `[m]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (sx, sw, sb) = (&self.nodes[xi].shape, &self.nodes[wi].shape, &self.nodes[bi].shape);
        if sw.len() != 2 || sb.len() != 1 || sb[0] != sw[1] {
            return Err(shape_err("linear", format!("w {sw:?}, b {sb:?}")));
        }
        let (a, m) = (sw[0], sw[1]);
        let rows = match sx.len() {
            1 if sx[0] == a => 1,
            2 if sx[1] == a => sx[0],
            _ => return Err(shape_err("linear", format!("x {sx:?} vs w {sw:?}"))),
        };
        let xs = &self.nodes[xi].values;
        let ws = &self.nodes[wi].values;
        let bs = &self.nodes[bi].values;
        let mut values = vec![0.0; rows * m];
        for i in 0..rows {
            let out = &mut values[i * m..(i + 1) * m];
            out.copy_from_slice(bs);
            for k in 0..a {
                let xv = xs[i * a + k];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &ws[k * m..(k + 1) * m];
                for (o, wv) in out.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let shape = if sx.len() == 1 { vec![m] } else { vec![rows, m] };
        let relevant = self.relevant(xi) || self.relevant(wi) || self.relevant(bi);
        Ok(self.push(Op::Linear { x: xi, w: wi, b: bi }, shape, values, relevant))
    }

    /// `a @ b` for `a` of shape `[n, p]` and `b` of `[p, q]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} vs {sb:?}")));
        }
        let (n, p, q) = (sa[0], sa[1], sb[1]);
        let avals = &self.nodes[ai].values;
        let bvals = &self.nodes[bi].values;
        let mut values = vec![0.0; n * q];
        for i in 0..n {
            for k in 0..p {
                let av = avals[i * p + k];
                if av == 0.0 {
                    continue;
                }
                let brow = &bvals[k * q..(k + 1) * q];
                let out = &mut values[i * q..(i + 1) * q];
                for (o, bv) in out.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let relevant = self.relevant(ai) || self.relevant(bi);
        Ok(self.push(Op::MatMul { a: ai, b: bi }, vec![n, q], values, relevant))
    }

    /// `a @ b^T` for `a` of shape `[n, p]` and `b` of `[q, p]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", format!("{sa:?} vs {sb:?}")));
        }
        let (n, p, q) = (sa[0], sa[1], sb[0]);
        let avals = &self.nodes[ai].values;
        let bvals = &self.nodes[bi].values;
        let mut values = vec![0.0; n * q];
        for i in 0..n {
            let arow = &avals[i * p..(i + 1) * p];
            for j in 0..q {
                let brow = &bvals[j * p..(j + 1) * p];
                let mut acc = 0.0;
                for (av, bv) in arow.iter().zip(brow) {
                    acc += av * bv;
                }
                values[i * q + j] = acc;
            }
        }
        let relevant = self.relevant(ai) || self.relevant(bi);
        Ok(self.push(Op::MatMulNT { a: ai, b: bi }, vec![n, q], values, relevant))
    }

    /// 1-D convolution over the rows of `x` (`[m, d_in]`) with kernel width
    /// `k`. The weight packs the kernel as `[out_channels, k * d_in]`, slot 0
    /// acting on the earliest row of each window.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, k: usize, pad: PadMode) -> Result<NodeId> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (sx, sw, sb) = (&self.nodes[xi].shape, &self.nodes[wi].shape, &self.nodes[bi].shape);
        if k == 0 {
            return Err(shape_err("conv1d", "kernel width 0".into()));
        }
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 {
            return Err(shape_err("conv1d", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (m, din) = (sx[0], sx[1]);
        let oc = sw[0];
        if sw[1] != k * din || sb[0] != oc {
            return Err(shape_err(
                "conv1d",
                format!("w {sw:?} incompatible with k={k}, d_in={din}, b {sb:?}"),
            ));
        }
        let delta = match pad {
            PadMode::Symmetric => (k - 1) / 2,
            PadMode::Causal => 0,
        };
        let xs = &self.nodes[xi].values;
        let ws = &self.nodes[wi].values;
        let bs = &self.nodes[bi].values;
        let mut values = vec![0.0; m * oc];
        for i in 0..m {
            let out = &mut values[i * oc..(i + 1) * oc];
            out.copy_from_slice(bs);
            for t in 0..k {
                let r = i as isize + delta as isize - (k as isize - 1) + t as isize;
                if r < 0 || r >= m as isize {
                    continue;
                }
                let xrow = &xs[r as usize * din..(r as usize + 1) * din];
                for (o, outv) in out.iter_mut().enumerate() {
                    let wslice = &ws[o * k * din + t * din..o * k * din + (t + 1) * din];
                    let mut acc = 0.0;
                    for (xv, wv) in xrow.iter().zip(wslice) {
                        acc += xv * wv;
                    }
                    *outv += acc;
                }
            }
        }
        let relevant = self.relevant(xi) || self.relevant(wi) || self.relevant(bi);
        Ok(self.push(Op::Conv1d { x: xi, w: wi, b: bi, k, pad }, vec![m, oc], values, relevant))
    }

    /// Gated linear unit over the last dimension: splits into halves `(a, b)`
    /// and returns `a * sigmoid(b)`.
    pub fn glu(&mut self, y: NodeId) -> Result<NodeId> {
        let yi = self.check(y)?;
        let shape = self.nodes[yi].shape.clone();
        let width = *shape.last().ok_or(DiffError::OddWidth(0))?;
        if width == 0 || width % 2 != 0 {
            return Err(DiffError::OddWidth(width));
        }
        let d = width / 2;
        let rows = self.nodes[yi].values.len() / width;
        let ys = &self.nodes[yi].values;
        let mut values = vec![0.0; rows * d];
        for i in 0..rows {
            for j in 0..d {
                let a = ys[i * width + j];
                let b = ys[i * width + d + j];
                values[i * d + j] = a * sigmoid(b);
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = d;
        let relevant = self.relevant(yi);
        Ok(self.push(Op::Glu(yi), out_shape, values, relevant))
    }

    /// Row-wise softmax over the last dimension of a vector or matrix.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.check(x)?;
        let shape = self.nodes[xi].shape.clone();
        let width = *shape
            .last()
            .ok_or_else(|| shape_err("softmax", "input must have at least one dimension".into()))?;
        if width == 0 {
            return Err(shape_err("softmax", "zero-width rows".into()));
        }
        let rows = self.nodes[xi].values.len() / width;
        let xs = &self.nodes[xi].values;
        let mut values = vec![0.0; rows * width];
        for i in 0..rows {
            let row = &xs[i * width..(i + 1) * width];
            let out = &mut values[i * width..(i + 1) * width];
            softmax_row(row, out);
        }
        let relevant = self.relevant(xi);
        Ok(self.push(Op::Softmax(xi), shape, values, relevant))
    }

    /// Mean cross-entropy of `logits` (`[n, t]`) against `targets`, skipping
    /// rows where `pad_mask` is true. Returns the scalar loss node and a copy
    /// of the softmax probabilities.
    pub fn softmax_xent(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        pad_mask: &[bool],
    ) -> Result<(NodeId, Tensor)> {
        let li = self.check(logits)?;
        let shape = self.nodes[li].shape.clone();
        if shape.len() != 2 {
            return Err(shape_err("softmax_xent", format!("logits {shape:?}")));
        }
        let (n, t) = (shape[0], shape[1]);
        if targets.len() != n || pad_mask.len() != n {
            return Err(shape_err(
                "softmax_xent",
                format!("{n} logit rows, {} targets, {} mask entries", targets.len(), pad_mask.len()),
            ));
        }
        for &tgt in targets {
            if tgt >= t {
                return Err(DiffError::IndexOutOfVocab { index: tgt, vocab: t });
            }
        }
        let n_live = pad_mask.iter().filter(|m| !**m).count();
        if n_live == 0 {
            return Err(DiffError::NoLiveTargets);
        }
        let xs = &self.nodes[li].values;
        let mut probs = vec![0.0; n * t];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &xs[i * t..(i + 1) * t];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for &v in row {
                z += (v - max).exp();
            }
            let lse = max + z.ln();
            for (j, &v) in row.iter().enumerate() {
                probs[i * t + j] = (v - lse).exp();
            }
            if !pad_mask[i] {
                loss -= row[targets[i]] - lse;
            }
        }
        loss /= n_live as f64;
        let probs_out = Tensor::new(&[n, t], probs.clone());
        let relevant = self.relevant(li);
        let id = self.push(
            Op::SoftmaxXent { logits: li, targets: targets.to_vec(), mask: pad_mask.to_vec(), probs, n_live },
            vec![],
            vec![loss],
            relevant,
        );
        Ok((id, probs_out))
    }

    /// Gathers rows of `table` (`[v, f]`) at `ids`, producing `[len(ids), f]`.
    pub fn lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let ti = self.check(table)?;
        let st = &self.nodes[ti].shape;
        if st.len() != 2 {
            return Err(shape_err("lookup", format!("table {st:?}")));
        }
        let (v, f) = (st[0], st[1]);
        for &id in ids {
            if id >= v {
                return Err(DiffError::IndexOutOfVocab { index: id, vocab: v });
            }
        }
        let tvals = &self.nodes[ti].values;
        let mut values = Vec::with_capacity(ids.len() * f);
        for &id in ids {
            values.extend_from_slice(&tvals[id * f..(id + 1) * f]);
        }
        let relevant = self.relevant(ti);
        Ok(self.push(Op::Lookup { table: ti, ids: ids.to_vec() }, vec![ids.len(), f], values, relevant))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// the survivors by `1/(1-p)`. Identity when not training or `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, training: bool, rng: &mut R) -> Result<NodeId> {
        let xi = self.check(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(DiffError::InvalidDropout(p));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[xi].values.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let values: Vec<f64> =
            self.nodes[xi].values.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.nodes[xi].shape.clone();
        let relevant = self.relevant(xi);
        Ok(self.push(Op::Dropout { x: xi, mask }, shape, values, relevant))
    }

    /// Weight normalization per output row: `w[o, :] = g[o] * v[o, :] / ||v[o, :]||`.
    pub fn weight_norm_rows(&mut self, v: NodeId, g: NodeId) -> Result<NodeId> {
        let (vi, gi) = (self.check(v)?, self.check(g)?);
        let (sv, sg) = (&self.nodes[vi].shape, &self.nodes[gi].shape);
        if sv.len() != 2 || sg.len() != 1 || sg[0] != sv[0] {
            return Err(shape_err("weight_norm_rows", format!("v {sv:?}, g {sg:?}")));
        }
        let (o, q) = (sv[0], sv[1]);
        let vs = &self.nodes[vi].values;
        let gs = &self.nodes[gi].values;
        let mut values = vec![0.0; o * q];
        for r in 0..o {
            let row = &vs[r * q..(r + 1) * q];
            let norm = l2(row);
            let scale = gs[r] / norm;
            for (out, vv) in values[r * q..(r + 1) * q].iter_mut().zip(row) {
                *out = vv * scale;
            }
        }
        let relevant = self.relevant(vi) || self.relevant(gi);
        Ok(self.push(Op::WeightNormRows { v: vi, g: gi }, vec![o, q], values, relevant))
    }

    /// Weight normalization per output column: `w[:, j] = g[j] * v[:, j] / ||v[:, j]||`.
    pub fn weight_norm_cols(&mut self, v: NodeId, g: NodeId) -> Result<NodeId> {
        let (vi, gi) = (self.check(v)?, self.check(g)?);
        let (sv, sg) = (&self.nodes[vi].shape, &self.nodes[gi].shape);
        if sv.len() != 2 || sg.len() != 1 || sg[0] != sv[1] {
            return Err(shape_err("weight_norm_cols", format!("v {sv:?}, g {sg:?}")));
        }
        let (a, b) = (sv[0], sv[1]);
        let vs = &self.nodes[vi].values;
        let gs = &self.nodes[gi].values;
        let mut norms = vec![0.0; b];
        for i in 0..a {
            for j in 0..b {
                norms[j] += vs[i * b + j] * vs[i * b + j];
            }
        }
        for n in norms.iter_mut() {
            *n = n.sqrt();
        }
        let mut values = vec![0.0; a * b];
        for i in 0..a {
            for j in 0..b {
                values[i * b + j] = vs[i * b + j] * gs[j] / norms[j];
            }
        }
        let relevant = self.relevant(vi) || self.relevant(gi);
        Ok(self.push(Op::WeightNormCols { v: vi, g: gi }, vec![a, b], values, relevant))
    }

    /// Parameterless layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xi = self.check(x)?;
        let shape = self.nodes[xi].shape.clone();
        let width = *shape
            .last()
            .ok_or_else(|| shape_err("layer_norm", "input must have at least one dimension".into()))?;
        if width == 0 {
            return Err(shape_err("layer_norm", "zero-width rows".into()));
        }
        let rows = self.nodes[xi].values.len() / width;
        let xs = &self.nodes[xi].values;
        let mut values = vec![0.0; rows * width];
        for i in 0..rows {
            let row = &xs[i * width..(i + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let std = (var + eps).sqrt();
            for (out, &v) in values[i * width..(i + 1) * width].iter_mut().zip(row) {
                *out = (v - mean) / std;
            }
        }
        let relevant = self.relevant(xi);
        Ok(self.push(Op::LayerNorm { x: xi, eps }, shape, values, relevant))
    }

    /// Reverse sweep from a scalar loss; gradients accumulate additively when
    /// a node feeds several consumers.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let li = self.check(loss)?;
        if self.nodes[li].values.len() != 1 {
            return Err(DiffError::NotScalar);
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        if self.nodes[li].relevant {
            grads[li] = Some(vec![1.0]);
        }
        for i in (0..=li).rev() {
            let Some(gy) = grads[i].clone() else { continue };
            self.propagate(i, &gy, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let slot = |grads: &mut [Option<Vec<f64>>], idx: usize| -> Option<*mut Vec<f64>> {
            if !nodes[idx].relevant {
                return None;
            }
            Some(grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].values.len()]) as *mut _)
        };
        // Accumulation helper working around one-at-a-time mutable access.
        macro_rules! with_slot {
            ($idx:expr, |$g:ident| $body:block) => {
                if let Some(ptr) = slot(grads, $idx) {
                    let $g: &mut Vec<f64> = unsafe { &mut *ptr };
                    $body
                }
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_slot!(*a, |g| {
                    for (gv, &u) in g.iter_mut().zip(gy) {
                        *gv += u;
                    }
                });
                with_slot!(*b, |g| {
                    for (gv, &u) in g.iter_mut().zip(gy) {
                        *gv += u;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].values, &nodes[*b].values);
                with_slot!(*a, |g| {
                    for ((gv, &u), &x) in g.iter_mut().zip(gy).zip(bv) {
                        *gv += u * x;
                    }
                });
                with_slot!(*b, |g| {
                    for ((gv, &u), &x) in g.iter_mut().zip(gy).zip(av) {
                        *gv += u * x;
                    }
                });
            }
            Op::Scale(x, c) => {
                with_slot!(*x, |g| {
                    for (gv, &u) in g.iter_mut().zip(gy) {
                        *gv += u * c;
                    }
                });
            }
            Op::Concat(a, b) => {
                let p = nodes[*a].shape[1];
                let q = nodes[*b].shape[1];
                let rows = nodes[*a].shape[0];
                with_slot!(*a, |g| {
                    for r in 0..rows {
                        for j in 0..p {
                            g[r * p + j] += gy[r * (p + q) + j];
                        }
                    }
                });
                with_slot!(*b, |g| {
                    for r in 0..rows {
                        for j in 0..q {
                            g[r * q + j] += gy[r * (p + q) + p + j];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                with_slot!(*x, |g| {
                    for gv in g.iter_mut() {
                        *gv += gy[0];
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let a = nodes[*w].shape[0];
                let m = nodes[*w].shape[1];
                let rows = nodes[*x].values.len() / a;
                let xs = &nodes[*x].values;
                let ws = &nodes[*w].values;
                with_slot!(*x, |g| {
                    for i in 0..rows {
                        for k in 0..a {
                            let mut acc = 0.0;
                            let wrow = &ws[k * m..(k + 1) * m];
                            let grow = &gy[i * m..(i + 1) * m];
                            for (wv, gv) in wrow.iter().zip(grow) {
                                acc += wv * gv;
                            }
                            g[i * a + k] += acc;
                        }
                    }
                });
                with_slot!(*w, |g| {
                    for i in 0..rows {
                        let grow = &gy[i * m..(i + 1) * m];
                        for k in 0..a {
                            let xv = xs[i * a + k];
                            if xv == 0.0 {
                                continue;
                            }
                            let gw = &mut g[k * m..(k + 1) * m];
                            for (gv, &u) in gw.iter_mut().zip(grow) {
                                *gv += xv * u;
                            }
                        }
                    }
                });
                with_slot!(*b, |g| {
                    for i in 0..rows {
                        for j in 0..m {
                            g[j] += gy[i * m + j];
                        }
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (n, p) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let q = nodes[*b].shape[1];
                let avals = &nodes[*a].values;
                let bvals = &nodes[*b].values;
                with_slot!(*a, |g| {
                    for i in 0..n {
                        for k in 0..p {
                            let mut acc = 0.0;
                            for j in 0..q {
                                acc += gy[i * q + j] * bvals[k * q + j];
                            }
                            g[i * p + k] += acc;
                        }
                    }
                });
                with_slot!(*b, |g| {
                    for i in 0..n {
                        for k in 0..p {
                            let av = avals[i * p + k];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..q {
                                g[k * q + j] += av * gy[i * q + j];
                            }
                        }
                    }
                });
            }
            Op::MatMulNT { a, b } => {
                let (n, p) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let q = nodes[*b].shape[0];
                let avals = &nodes[*a].values;
                let bvals = &nodes[*b].values;
                with_slot!(*a, |g| {
                    for i in 0..n {
                        for j in 0..q {
                            let u = gy[i * q + j];
                            if u == 0.0 {
                                continue;
                            }
                            for k in 0..p {
                                g[i * p + k] += u * bvals[j * p + k];
                            }
                        }
                    }
                });
                with_slot!(*b, |g| {
                    for i in 0..n {
                        for j in 0..q {
                            let u = gy[i * q + j];
                            if u == 0.0 {
                                continue;
                            }
                            for k in 0..p {
                                g[j * p + k] += u * avals[i * p + k];
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, k, pad } => {
                let (m, din) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                let oc = nodes[*w].shape[0];
                let delta = match pad {
                    PadMode::Symmetric => (k - 1) / 2,
                    PadMode::Causal => 0,
                };
                let xs = &nodes[*x].values;
                let ws = &nodes[*w].values;
                with_slot!(*x, |g| {
                    for i in 0..m {
                        for t in 0..*k {
                            let r = i as isize + delta as isize - (*k as isize - 1) + t as isize;
                            if r < 0 || r >= m as isize {
                                continue;
                            }
                            let r = r as usize;
                            for o in 0..oc {
                                let u = gy[i * oc + o];
                                if u == 0.0 {
                                    continue;
                                }
                                let wslice = &ws[o * k * din + t * din..o * k * din + (t + 1) * din];
                                let gx = &mut g[r * din..(r + 1) * din];
                                for (gv, wv) in gx.iter_mut().zip(wslice) {
                                    *gv += u * wv;
                                }
                            }
                        }
                    }
                });
                with_slot!(*w, |g| {
                    for i in 0..m {
                        for t in 0..*k {
                            let r = i as isize + delta as isize - (*k as isize - 1) + t as isize;
                            if r < 0 || r >= m as isize {
                                continue;
                            }
                            let r = r as usize;
                            let xrow = &xs[r * din..(r + 1) * din];
                            for o in 0..oc {
                                let u = gy[i * oc + o];
                                if u == 0.0 {
                                    continue;
                                }
                                let gw = &mut g[o * k * din + t * din..o * k * din + (t + 1) * din];
                                for (gv, xv) in gw.iter_mut().zip(xrow) {
                                    *gv += u * xv;
                                }
                            }
                        }
                    }
                });
                with_slot!(*b, |g| {
                    for i in 0..m {
                        for o in 0..oc {
                            g[o] += gy[i * oc + o];
                        }
                    }
                });
            }
            Op::Glu(y) => {
                let width = *nodes[*y].shape.last().unwrap();
                let d = width / 2;
                let rows = nodes[*y].values.len() / width;
                let ys = &nodes[*y].values;
                with_slot!(*y, |g| {
                    for i in 0..rows {
                        for j in 0..d {
                            let a = ys[i * width + j];
                            let s = sigmoid(ys[i * width + d + j]);
                            let u = gy[i * d + j];
                            g[i * width + j] += u * s;
                            g[i * width + d + j] += u * a * s * (1.0 - s);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let width = *nodes[i].shape.last().unwrap();
                let rows = nodes[i].values.len() / width;
                let ys = &nodes[i].values;
                with_slot!(*x, |g| {
                    for r in 0..rows {
                        let yrow = &ys[r * width..(r + 1) * width];
                        let grow = &gy[r * width..(r + 1) * width];
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, u)| y * u).sum();
                        for j in 0..width {
                            g[r * width + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::SoftmaxXent { logits, targets, mask, probs, n_live } => {
                let t = nodes[*logits].shape[1];
                let scale = gy[0] / *n_live as f64;
                with_slot!(*logits, |g| {
                    for (r, (&tgt, &masked)) in targets.iter().zip(mask).enumerate() {
                        if masked {
                            continue;
                        }
                        for j in 0..t {
                            let delta = if j == tgt { 1.0 } else { 0.0 };
                            g[r * t + j] += scale * (probs[r * t + j] - delta);
                        }
                    }
                });
            }
            Op::Lookup { table, ids } => {
                let f = nodes[*table].shape[1];
                with_slot!(*table, |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        let gt = &mut g[id * f..(id + 1) * f];
                        for (gv, &u) in gt.iter_mut().zip(&gy[r * f..(r + 1) * f]) {
                            *gv += u;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                with_slot!(*x, |g| {
                    for ((gv, &u), &mk) in g.iter_mut().zip(gy).zip(mask) {
                        *gv += u * mk;
                    }
                });
            }
            Op::WeightNormRows { v, g: gn } => {
                let (o, q) = (nodes[*v].shape[0], nodes[*v].shape[1]);
                let vs = &nodes[*v].values;
                let gs = &nodes[*gn].values;
                for r in 0..o {
                    let row = &vs[r * q..(r + 1) * q];
                    let norm = l2(row);
                    let grow = &gy[r * q..(r + 1) * q];
                    let dot: f64 = grow.iter().zip(row).map(|(u, vv)| u * vv / norm).sum();
                    with_slot!(*gn, |g| {
                        g[r] += dot;
                    });
                    with_slot!(*v, |g| {
                        let scale = gs[r] / norm;
                        for j in 0..q {
                            g[r * q + j] += scale * (grow[j] - dot * row[j] / norm);
                        }
                    });
                }
            }
            Op::WeightNormCols { v, g: gn } => {
                let (a, b) = (nodes[*v].shape[0], nodes[*v].shape[1]);
                let vs = &nodes[*v].values;
                let gs = &nodes[*gn].values;
                let mut norms = vec![0.0; b];
                for i in 0..a {
                    for j in 0..b {
                        norms[j] += vs[i * b + j] * vs[i * b + j];
                    }
                }
                for n in norms.iter_mut() {
                    *n = n.sqrt();
                }
                let mut dots = vec![0.0; b];
                for i in 0..a {
                    for j in 0..b {
                        dots[j] += gy[i * b + j] * vs[i * b + j] / norms[j];
                    }
                }
                with_slot!(*gn, |g| {
                    for j in 0..b {
                        g[j] += dots[j];
                    }
                });
                with_slot!(*v, |g| {
                    for i in 0..a {
                        for j in 0..b {
                            let scale = gs[j] / norms[j];
                            g[i * b + j] +=
                                scale * (gy[i * b + j] - dots[j] * vs[i * b + j] / norms[j]);
                        }
                    }
                });
            }
            Op::LayerNorm { x, eps } => {
                let width = *nodes[i].shape.last().unwrap();
                let rows = nodes[i].values.len() / width;
                let xs = &nodes[*x].values;
                let w = width as f64;
                with_slot!(*x, |g| {
                    for r in 0..rows {
                        let row = &xs[r * width..(r + 1) * width];
                        let grow = &gy[r * width..(r + 1) * width];
                        let mean = row.iter().sum::<f64>() / w;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w;
                        let std = (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) / std).collect();
                        let m1 = grow.iter().sum::<f64>() / w;
                        let m2 = grow.iter().zip(&xhat).map(|(u, h)| u * h).sum::<f64>() / w;
                        for j in 0..width {
                            g[r * width + j] += (grow[j] - m1 - xhat[j] * m2) / std;
                        }
                    }
                });
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Numerically stable log-softmax of one logit row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + z.ln();
    row.iter().map(|&v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
    }

    fn assert_all_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
        assert_eq!(a.len(), b.len(), "{what}: length mismatch");
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y} (tol {tol})");
        }
    }

    /// Central-difference gradient of a scalar function of a flat parameter
    /// vector; the independent oracle for every analytic backward rule here.
    fn numerical_grad(f: &dyn Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
        let mut grad = vec![0.0; at.len()];
        let mut probe = at.to_vec();
        for i in 0..at.len() {
            probe[i] = at[i] + h;
            let up = f(&probe);
            probe[i] = at[i] - h;
            let down = f(&probe);
            probe[i] = at[i];
            grad[i] = (up - down) / (2.0 * h);
        }
        grad
    }

    #[test]
    fn linear_matches_hand_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2], vec![1.0, 0.0]);
        let w = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = tape.constant(&[2], vec![0.0, 0.0]);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.values(y), &[1.0, 0.0]);

        let x2 = tape.constant(&[2], vec![1.0, 2.0]);
        let w2 = tape.constant(&[2, 1], vec![1.0, 1.0]);
        let b2 = tape.constant(&[1], vec![0.5]);
        let y2 = tape.linear(x2, w2, b2).unwrap();
        assert_eq!(tape.values(y2), &[3.5]);
    }

    #[test]
    fn linear_shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3], vec![0.0; 3]);
        let w = tape.constant(&[2, 2], vec![0.0; 4]);
        let b = tape.constant(&[2], vec![0.0; 2]);
        assert!(matches!(tape.linear(x, w, b), Err(DiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn conv1d_symmetric_all_ones() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3, 1], vec![1.0, 1.0, 1.0]);
        let w = tape.constant(&[1, 3], vec![1.0, 1.0, 1.0]);
        let b = tape.constant(&[1], vec![0.0]);
        let y = tape.conv1d(x, w, b, 3, PadMode::Symmetric).unwrap();
        assert_eq!(tape.values(y), &[2.0, 3.0, 2.0]);
    }

    #[test]
    fn conv1d_causal_all_ones() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3, 1], vec![1.0, 1.0, 1.0]);
        let w = tape.constant(&[1, 3], vec![1.0, 1.0, 1.0]);
        let b = tape.constant(&[1], vec![0.0]);
        let y = tape.conv1d(x, w, b, 3, PadMode::Causal).unwrap();
        assert_eq!(tape.values(y), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv1d_k1_stacked_identity_duplicates_input() {
        // With k=1 and W = [I; I] stacked, each output row is the input row
        // repeated across 2d channels.
        let d = 3;
        let mut w = vec![0.0; 2 * d * d];
        for j in 0..d {
            w[j * d + j] = 1.0;
            w[(d + j) * d + j] = 1.0;
        }
        let mut tape = Tape::new();
        let x = tape.constant(&[2, d], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let wn = tape.constant(&[2 * d, d], w);
        let b = tape.constant(&[2 * d], vec![0.0; 2 * d]);
        let y = tape.conv1d(x, wn, b, 1, PadMode::Symmetric).unwrap();
        assert_eq!(tape.values(y), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn conv1d_output_length_matches_input_length() {
        for m in 1..9usize {
            for k in 1..6usize {
                let mut tape = Tape::new();
                let x = tape.constant(&[m, 2], vec![0.5; m * 2]);
                let w = tape.constant(&[4, k * 2], vec![0.25; 4 * k * 2]);
                let b = tape.constant(&[4], vec![0.0; 4]);
                for pad in [PadMode::Symmetric, PadMode::Causal] {
                    let y = tape.conv1d(x, w, b, k, pad).unwrap();
                    assert_eq!(tape.shape(y), &[m, 4], "m={m} k={k} pad={pad:?}");
                }
            }
        }
    }

    #[test]
    fn causal_conv_never_sees_the_future() {
        let m = 7;
        let k = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = Tensor::randn(&[m, 2], 1.0, &mut rng);
        let w = Tensor::randn(&[3, k * 2], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let xn = tape.leaf(x);
            let wn = tape.leaf(&w);
            let bn = tape.leaf(&b);
            let y = tape.conv1d(xn, wn, bn, k, PadMode::Causal).unwrap();
            tape.values(y).to_vec()
        };
        let full = run(&base);
        for j in 1..m {
            let mut mutated = base.clone();
            mutated.values_mut()[j * 2] += 11.0;
            mutated.values_mut()[j * 2 + 1] -= 3.0;
            let out = run(&mutated);
            assert_eq!(&full[..j * 3], &out[..j * 3], "rows before {j} must be bitwise equal");
        }
    }

    #[test]
    fn glu_matches_hand_example() {
        let mut tape = Tape::new();
        let y = tape.constant(&[4], vec![1.0, 0.0, 2.0, 0.0]);
        let out = tape.glu(y).unwrap();
        let expect0 = 1.0 / (1.0 + (-2.0f64).exp());
        assert_close(tape.values(out)[0], expect0, 1e-12, "glu[0]");
        assert_close(tape.values(out)[0], 0.8808, 1e-4, "glu[0] vs 0.8808");
        assert_eq!(tape.values(out)[1], 0.0);
    }

    #[test]
    fn glu_rejects_odd_width() {
        let mut tape = Tape::new();
        let y = tape.constant(&[3], vec![1.0, 2.0, 3.0]);
        assert!(matches!(tape.glu(y), Err(DiffError::OddWidth(3))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[5, 7], 4.0, &mut rng);
        let mut tape = Tape::new();
        let xn = tape.leaf(&x);
        let y = tape.softmax(xn).unwrap();
        for row in tape.values(y).chunks(7) {
            let s: f64 = row.iter().sum();
            assert_close(s, 1.0, 1e-9, "softmax row sum");
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 3], vec![1000.0, 1000.0, -1000.0]);
        let y = tape.softmax(x).unwrap();
        let v = tape.values(y);
        assert_close(v[0], 0.5, 1e-12, "softmax large");
        assert_close(v[1], 0.5, 1e-12, "softmax large");
        assert!(v[2] >= 0.0 && v[2] < 1e-300);
    }

    #[test]
    fn xent_uniform_logits_is_log_vocab() {
        let mut tape = Tape::new();
        let logits = tape.constant(&[1, 4], vec![0.0; 4]);
        let (loss, probs) = tape.softmax_xent(logits, &[2], &[false]).unwrap();
        assert_close(tape.scalar_value(loss), (4.0f64).ln(), 1e-12, "uniform xent");
        assert_all_close(probs.values(), &[0.25; 4], 1e-12, "uniform probs");
    }

    #[test]
    fn xent_peaked_logits_is_near_zero() {
        let mut tape = Tape::new();
        let logits = tape.constant(&[1, 4], vec![16.0, 0.0, 0.0, 0.0]);
        let (loss, _) = tape.softmax_xent(logits, &[0], &[false]).unwrap();
        assert!(tape.scalar_value(loss) < 1e-4);
    }

    #[test]
    fn xent_ignores_masked_rows_and_padding_count() {
        let logits_rows = vec![1.0, -2.0, 0.5, 0.3, 0.2, 0.1];
        let mut tape = Tape::new();
        let l1 = tape.constant(&[2, 3], logits_rows.clone());
        let (loss1, _) = tape.softmax_xent(l1, &[0, 1], &[false, true]).unwrap();
        // Duplicate the padded row: the mean over live rows must not move.
        let mut padded = logits_rows.clone();
        padded.extend_from_slice(&logits_rows[3..6]);
        let l2 = tape.constant(&[3, 3], padded);
        let (loss2, _) = tape.softmax_xent(l2, &[0, 1, 1], &[false, true, true]).unwrap();
        assert_eq!(tape.scalar_value(loss1), tape.scalar_value(loss2));
    }

    #[test]
    fn xent_without_live_targets_is_an_error() {
        let mut tape = Tape::new();
        let l = tape.constant(&[1, 3], vec![0.0; 3]);
        assert!(matches!(tape.softmax_xent(l, &[0], &[true]), Err(DiffError::NoLiveTargets)));
    }

    #[test]
    fn xent_rejects_out_of_vocab_target() {
        let mut tape = Tape::new();
        let l = tape.constant(&[1, 3], vec![0.0; 3]);
        assert!(matches!(
            tape.softmax_xent(l, &[3], &[false]),
            Err(DiffError::IndexOutOfVocab { index: 3, vocab: 3 })
        ));
    }

    #[test]
    fn lookup_gathers_and_scatters() {
        let table = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad();
        let mut tape = Tape::new();
        let t = tape.leaf(&table);
        let rows = tape.lookup(t, &[2, 0, 2]).unwrap();
        assert_eq!(tape.values(rows), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(rows).unwrap();
        tape.backward(s).unwrap();
        // Row 2 was used twice, row 1 never.
        assert_eq!(tape.grad(t).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn lookup_rejects_out_of_vocab() {
        let mut tape = Tape::new();
        let t = tape.constant(&[2, 2], vec![0.0; 4]);
        assert!(matches!(
            tape.lookup(t, &[2]),
            Err(DiffError::IndexOutOfVocab { index: 2, vocab: 2 })
        ));
    }

    #[test]
    fn dropout_identity_when_not_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.constant(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.dropout(x, 0.2, false, &mut rng).unwrap();
        assert_eq!(x, y);
        let z = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(x, z);
    }

    #[test]
    fn dropout_zero_fraction_tracks_p() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.constant(&[n], vec![1.0; n]);
        let y = tape.dropout(x, 0.2, true, &mut rng).unwrap();
        let vals = tape.values(y);
        let zeros = vals.iter().filter(|v| **v == 0.0).count();
        let frac = zeros as f64 / n as f64;
        assert!((frac - 0.2).abs() < 0.01, "zero fraction {frac}");
        let kept: Vec<f64> = vals.iter().copied().filter(|v| *v != 0.0).collect();
        for v in kept {
            assert_close(v, 1.0 / 0.8, 1e-12, "survivor scaling");
        }
    }

    #[test]
    fn dropout_is_deterministic_under_seed() {
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.constant(&[64], vec![1.0; 64]);
            let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
            tape.values(y).to_vec()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.constant(&[1], vec![1.0]);
        assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(DiffError::InvalidDropout(_))));
        assert!(matches!(tape.dropout(x, -0.1, true, &mut rng), Err(DiffError::InvalidDropout(_))));
    }

    #[test]
    fn weight_norm_materializes_unit_direction_times_gain() {
        let mut tape = Tape::new();
        let v = tape.constant(&[1, 2], vec![3.0, 4.0]);
        let g = tape.constant(&[1], vec![10.0]);
        let w = tape.weight_norm_rows(v, g).unwrap();
        assert_all_close(tape.values(w), &[6.0, 8.0], 1e-12, "weight norm rows");

        let v2 = tape.constant(&[2, 1], vec![3.0, 4.0]);
        let g2 = tape.constant(&[1], vec![5.0]);
        let w2 = tape.weight_norm_cols(v2, g2).unwrap();
        assert_all_close(tape.values(w2), &[3.0, 4.0], 1e-12, "weight norm cols");
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(&[4, 8], 3.0, &mut rng);
        let mut tape = Tape::new();
        let xn = tape.leaf(&x);
        let y = tape.layer_norm(xn, 1e-6).unwrap();
        for row in tape.values(y).chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert_close(mean, 0.0, 1e-9, "ln mean");
            assert_close(var, 1.0, 1e-4, "ln var");
        }
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).with_grad();
        let mut tape = Tape::new();
        let xn = tape.leaf(&x);
        let y = tape.add(xn, xn).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xn).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).with_grad();
        let mut tape = Tape::new();
        let xn = tape.leaf(&x);
        assert!(matches!(tape.backward(xn), Err(DiffError::NotScalar)));
    }

    #[test]
    fn nodes_from_another_tape_are_detached() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.constant(&[1], vec![1.0]);
        let b = t2.constant(&[1], vec![1.0]);
        assert!(matches!(t2.add(a, b), Err(DiffError::DetachedTensor)));
        assert!(matches!(t1.backward(b), Err(DiffError::DetachedTensor)));
    }

    /// Builds a scalar loss from a parameter vector through `build`, then
    /// checks the tape gradient against central differences.
    fn grad_check(shape: &[usize], build: &dyn Fn(&mut Tape, NodeId) -> NodeId, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(shape, 0.8, &mut rng).with_grad();
        let mut tape = Tape::new();
        let xn = tape.leaf(&x);
        let loss = build(&mut tape, xn);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(xn).unwrap().to_vec();
        let f = |vals: &[f64]| {
            let probe = Tensor::new(shape, vals.to_vec());
            let mut t = Tape::new();
            let xn = t.leaf(&probe);
            let loss = build(&mut t, xn);
            t.scalar_value(loss)
        };
        let numeric = numerical_grad(&f, x.values(), 1e-5);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-4);
            assert!(
                (a - n).abs() / denom < 1e-6,
                "grad[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }

    /// Weights the output elements with fixed pseudo-random coefficients so
    /// the gradient check exercises off-diagonal terms.
    fn weighted_sum(tape: &mut Tape, x: NodeId) -> NodeId {
        let shape = tape.shape(x).to_vec();
        let n = tape.values(x).len();
        let weights: Vec<f64> = (0..n).map(|i| ((i * 2654435761) % 97) as f64 / 97.0 - 0.3).collect();
        let w = tape.constant(&shape, weights);
        let prod = tape.mul(x, w).unwrap();
        tape.sum(prod).unwrap()
    }

    #[test]
    fn grad_check_linear() {
        grad_check(&[3, 4], &|tape, x| {
            let w = Tensor::randn(&[4, 5], 0.7, &mut ChaCha8Rng::seed_from_u64(1));
            let b = Tensor::randn(&[5], 0.7, &mut ChaCha8Rng::seed_from_u64(2));
            let wn = tape.leaf(&w);
            let bn = tape.leaf(&b);
            let y = tape.linear(x, wn, bn).unwrap();
            weighted_sum(tape, y)
        }, 100);
        // And with respect to the weight and bias.
        grad_check(&[4, 5], &|tape, w| {
            let x = Tensor::randn(&[3, 4], 0.7, &mut ChaCha8Rng::seed_from_u64(3));
            let b = Tensor::randn(&[5], 0.7, &mut ChaCha8Rng::seed_from_u64(4));
            let xn = tape.leaf(&x);
            let bn = tape.leaf(&b);
            let y = tape.linear(xn, w, bn).unwrap();
            weighted_sum(tape, y)
        }, 101);
        grad_check(&[5], &|tape, b| {
            let x = Tensor::randn(&[3, 4], 0.7, &mut ChaCha8Rng::seed_from_u64(5));
            let w = Tensor::randn(&[4, 5], 0.7, &mut ChaCha8Rng::seed_from_u64(6));
            let xn = tape.leaf(&x);
            let wn = tape.leaf(&w);
            let y = tape.linear(xn, wn, b).unwrap();
            weighted_sum(tape, y)
        }, 102);
    }

    #[test]
    fn grad_check_conv1d_both_pads() {
        for (seed, pad) in [(200, PadMode::Symmetric), (201, PadMode::Causal)] {
            grad_check(&[6, 3], &move |tape, x| {
                let w = Tensor::randn(&[4, 9], 0.6, &mut ChaCha8Rng::seed_from_u64(7));
                let b = Tensor::randn(&[4], 0.6, &mut ChaCha8Rng::seed_from_u64(8));
                let wn = tape.leaf(&w);
                let bn = tape.leaf(&b);
                let y = tape.conv1d(x, wn, bn, 3, pad).unwrap();
                weighted_sum(tape, y)
            }, seed);
            grad_check(&[4, 9], &move |tape, w| {
                let x = Tensor::randn(&[6, 3], 0.6, &mut ChaCha8Rng::seed_from_u64(9));
                let b = Tensor::randn(&[4], 0.6, &mut ChaCha8Rng::seed_from_u64(10));
                let xn = tape.leaf(&x);
                let bn = tape.leaf(&b);
                let y = tape.conv1d(xn, w, bn, 3, pad).unwrap();
                weighted_sum(tape, y)
            }, seed + 10);
        }
    }

    #[test]
    fn grad_check_glu() {
        grad_check(&[3, 8], &|tape, x| {
            let y = tape.glu(x).unwrap();
            weighted_sum(tape, y)
        }, 300);
    }

    #[test]
    fn grad_check_softmax() {
        grad_check(&[4, 6], &|tape, x| {
            let y = tape.softmax(x).unwrap();
            weighted_sum(tape, y)
        }, 400);
    }

    #[test]
    fn grad_check_softmax_xent() {
        grad_check(&[5, 7], &|tape, x| {
            let (loss, _) = tape
                .softmax_xent(x, &[1, 0, 6, 3, 2], &[false, true, false, false, true])
                .unwrap();
            loss
        }, 500);
    }

    #[test]
    fn grad_check_matmuls() {
        grad_check(&[3, 4], &|tape, a| {
            let b = Tensor::randn(&[4, 2], 0.9, &mut ChaCha8Rng::seed_from_u64(11));
            let bn = tape.leaf(&b);
            let y = tape.matmul(a, bn).unwrap();
            weighted_sum(tape, y)
        }, 600);
        grad_check(&[4, 2], &|tape, b| {
            let a = Tensor::randn(&[3, 4], 0.9, &mut ChaCha8Rng::seed_from_u64(12));
            let an = tape.leaf(&a);
            let y = tape.matmul(an, b).unwrap();
            weighted_sum(tape, y)
        }, 601);
        grad_check(&[3, 4], &|tape, a| {
            let b = Tensor::randn(&[5, 4], 0.9, &mut ChaCha8Rng::seed_from_u64(13));
            let bn = tape.leaf(&b);
            let y = tape.matmul_nt(a, bn).unwrap();
            weighted_sum(tape, y)
        }, 602);
        grad_check(&[5, 4], &|tape, b| {
            let a = Tensor::randn(&[3, 4], 0.9, &mut ChaCha8Rng::seed_from_u64(14));
            let an = tape.leaf(&a);
            let y = tape.matmul_nt(an, b).unwrap();
            weighted_sum(tape, y)
        }, 603);
    }

    #[test]
    fn grad_check_weight_norm() {
        grad_check(&[4, 6], &|tape, v| {
            let g = Tensor::randn(&[4], 0.5, &mut ChaCha8Rng::seed_from_u64(15));
            let gn = tape.leaf(&g);
            let w = tape.weight_norm_rows(v, gn).unwrap();
            weighted_sum(tape, w)
        }, 700);
        grad_check(&[4], &|tape, g| {
            let v = Tensor::randn(&[4, 6], 0.5, &mut ChaCha8Rng::seed_from_u64(16));
            let vn = tape.leaf(&v);
            let w = tape.weight_norm_rows(vn, g).unwrap();
            weighted_sum(tape, w)
        }, 701);
        grad_check(&[4, 6], &|tape, v| {
            let g = Tensor::randn(&[6], 0.5, &mut ChaCha8Rng::seed_from_u64(17));
            let gn = tape.leaf(&g);
            let w = tape.weight_norm_cols(v, gn).unwrap();
            weighted_sum(tape, w)
        }, 702);
        grad_check(&[6], &|tape, g| {
            let v = Tensor::randn(&[4, 6], 0.5, &mut ChaCha8Rng::seed_from_u64(18));
            let vn = tape.leaf(&v);
            let w = tape.weight_norm_cols(vn, g).unwrap();
            weighted_sum(tape, w)
        }, 703);
    }

    #[test]
    fn grad_check_layer_norm() {
        grad_check(&[3, 5], &|tape, x| {
            let y = tape.layer_norm(x, 1e-5).unwrap();
            weighted_sum(tape, y)
        }, 800);
    }

    #[test]
    fn grad_check_composite_chain() {
        // conv -> glu -> residual add -> linear -> xent, the same spine the
        // full model uses.
        grad_check(&[5, 4], &|tape, x| {
            let w1 = Tensor::randn(&[8, 12], 0.5, &mut ChaCha8Rng::seed_from_u64(19));
            let b1 = Tensor::randn(&[8], 0.5, &mut ChaCha8Rng::seed_from_u64(20));
            let w2 = Tensor::randn(&[4, 3], 0.5, &mut ChaCha8Rng::seed_from_u64(21));
            let b2 = Tensor::randn(&[3], 0.5, &mut ChaCha8Rng::seed_from_u64(22));
            let w1n = tape.leaf(&w1);
            let b1n = tape.leaf(&b1);
            let conv = tape.conv1d(x, w1n, b1n, 3, PadMode::Causal).unwrap();
            let gated = tape.glu(conv).unwrap();
            let res = tape.add(gated, x).unwrap();
            let w2n = tape.leaf(&w2);
            let b2n = tape.leaf(&b2);
            let logits = tape.linear(res, w2n, b2n).unwrap();
            let (loss, _) = tape
                .softmax_xent(logits, &[0, 2, 1, 1, 0], &[false, false, true, false, false])
                .unwrap();
            loss
        }, 900);
    }

    #[test]
    fn grad_check_dropout_with_fixed_mask() {
        // Dropout draws its mask at record time, so the same seeded rng makes
        // the loss a deterministic function of the input.
        let shape = [4, 5];
        let x = Tensor::randn(&shape, 0.8, &mut ChaCha8Rng::seed_from_u64(23)).with_grad();
        let eval = |vals: &[f64], want_grad: bool| -> (f64, Option<Vec<f64>>) {
            let probe = Tensor::new(&shape, vals.to_vec()).with_grad();
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut tape = Tape::new();
            let xn = tape.leaf(&probe);
            let y = tape.dropout(xn, 0.3, true, &mut rng).unwrap();
            let loss = weighted_sum(&mut tape, y);
            if want_grad {
                tape.backward(loss).unwrap();
                let g = tape.grad(xn).unwrap().to_vec();
                (tape.scalar_value(loss), Some(g))
            } else {
                (tape.scalar_value(loss), None)
            }
        };
        let (_, analytic) = eval(x.values(), true);
        let numeric = numerical_grad(&|v| eval(v, false).0, x.values(), 1e-5);
        assert_all_close(&analytic.unwrap(), &numeric, 1e-7, "dropout grad");
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let row = vec![0.3, -1.2, 2.0, 0.0];
        let ls = log_softmax(&row);
        let mut sm = vec![0.0; 4];
        softmax_row(&row, &mut sm);
        for (l, p) in ls.iter().zip(&sm) {
            assert_close(l.exp(), *p, 1e-12, "exp(log-softmax)");
        }
        let total: f64 = ls.iter().map(|l| l.exp()).sum();
        assert_close(total, 1.0, 1e-12, "log-softmax normalization");
    }
}
