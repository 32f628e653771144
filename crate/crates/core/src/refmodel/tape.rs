//! Reverse-mode automatic differentiation over 2-D `f64` arrays.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    AddConst(NodeId),
    Scale(NodeId, f64),
    /// a + table[idx] elementwise; `idx` holds flat table indices.
    BiasGather(NodeId, NodeId, Array2<usize>),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Array2<f64>, inv_std: Vec<f64> },
    Gelu(NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    /// Σ w · CE(row, target) over `(row, target, weight)` triples.
    CrossEntropy(NodeId, Vec<(usize, usize, f64)>, Array2<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Append-only computation graph.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[[0, 0]]
    }

    pub fn is_softmax(&self, id: NodeId) -> bool {
        matches!(self.nodes[id].op, Op::Softmax(_))
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Broadcast a `1 × n` row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// Add a constant (no gradient flows into `c`).
    pub fn add_const(&mut self, a: NodeId, c: &Array2<f64>) -> NodeId {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn bias_gather(&mut self, a: NodeId, table: NodeId, idx: Array2<usize>) -> NodeId {
        let t = self.value(table);
        let cols = t.ncols();
        let mut v = self.value(a).clone();
        for ((r, c), &k) in idx.indexed_iter() {
            v[[r, c]] += t[[k / cols, k % cols]];
        }
        self.push(v, Op::BiasGather(a, table, idx))
    }

    /// Row-wise softmax. Entries equal to `-inf` get probability zero.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a).view());
        self.push(v, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..d {
                xhat[[r, c]] = (row[c] - mean) * is;
            }
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        self.push(v, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// tanh approximation of GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("row concat widths agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("column concat heights agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).assign(&t.row(id));
        }
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    /// Weighted sum of token cross-entropies; returns a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<(usize, usize, f64)>) -> NodeId {
        let probs = softmax_rows(self.value(logits).view());
        let lv = self.value(logits);
        let mut total = 0.0;
        for &(r, t, w) in &targets {
            let row = lv.row(r);
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += w * (lse - row[t]);
        }
        self.push(Array2::from_elem((1, 1), total), Op::CrossEntropy(logits, targets, probs))
    }

    /// Gradients of scalar node `out` with respect to every node.
    pub fn backward(&self, out: NodeId) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[out] = Some(Array2::ones(self.value(out).dim()));
        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::AddConst(a) => acc(&mut grads, *a, g.clone()),
                Op::Scale(a, s) => acc(&mut grads, *a, &g * *s),
                Op::BiasGather(a, table, idx) => {
                    let t = self.value(*table);
                    let cols = t.ncols();
                    let mut gt = Array2::zeros(t.dim());
                    for ((r, c), &k) in idx.indexed_iter() {
                        gt[[k / cols, k % cols]] += g[[r, c]];
                    }
                    acc(&mut grads, *table, gt);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dots = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &gy - &(y * &dots);
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = self.value(*gamma);
                    acc(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let gxhat = &g * gv;
                    let (n, d) = g.dim();
                    let mut gx = Array2::zeros((n, d));
                    for r in 0..n {
                        let gr = gxhat.row(r);
                        let xr = xhat.row(r);
                        let m1 = gr.sum() / d as f64;
                        let m2 = gr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            gx[[r, c]] = inv_std[r] * (gr[c] - m1 - xr[c] * m2);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(a) => {
                    let ga = ndarray::Zip::from(&g).and(self.value(*a)).map_collect(|&gv, &x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![off..off + n, ..]).to_owned());
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., off..off + n]).to_owned());
                        off += n;
                    }
                }
                Op::Gather(table, ids) => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::CrossEntropy(logits, targets, probs) => {
                    let scale = g[[0, 0]];
                    let mut gl = Array2::zeros(probs.dim());
                    for &(r, t, w) in targets {
                        let mut row = gl.row_mut(r);
                        row.scaled_add(w * scale, &probs.row(r));
                        row[t] -= w * scale;
                    }
                    acc(&mut grads, *logits, gl);
                }
            }
            grads[id] = Some(g);
        }
        grads
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn softmax_rows(a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}
