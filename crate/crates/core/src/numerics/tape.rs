//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to replay its vector-Jacobian product. `backward` walks the tape in
//! reverse and accumulates gradients only into nodes reachable from a
//! trainable leaf.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddTiled(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Cosine {
        a: Var,
        b: Var,
        eps: f64,
        norm_a: Vec<f64>,
        norm_b: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        tq: usize,
        tk: usize,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ConcatPerBatch {
        parts: Vec<(Var, usize)>,
        batch: usize,
    },
    BroadcastRows {
        x: Var,
    },
    SelectRows {
        x: Var,
        index: Vec<usize>,
    },
    MaskRows {
        x: Var,
        keep: Vec<bool>,
    },
    SumColBlocks {
        x: Var,
        width: usize,
        start: usize,
        end: usize,
    },
    Reshape(Var),
    TokenPool {
        tokens: Var,
        weights: Var,
        per_item: usize,
        offset: usize,
    },
    MaskFill {
        x: Var,
        allowed: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(shape: &[usize], len: usize) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        dims => {
            let c = *dims.last().unwrap();
            (if c == 0 { 0 } else { len / c }, c)
        }
    }
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

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if !matches!(op, Op::MaskFill { .. }) && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records `t` as a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.leaf_with(t, t.requires_grad())
    }

    pub fn leaf_with(&mut self, t: &Tensor, track: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: track,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf_with(t, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        rows_cols(&n.shape, n.value.len())
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let n = self.node(v);
        if n.shape.len() != 2 {
            return Err(Error::dim(format!(
                "{what}: expected a matrix, got shape {:?}",
                n.shape
            )));
        }
        Ok((n.shape[0], n.shape[1]))
    }

    // ---- linear algebra ----

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul lhs")?;
        let (k2, n) = self.matrix(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(&[a, b]);
        self.push(vec![m, n], out, Op::MatMul(a, b), ng)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_bt lhs")?;
        let (n, k2) = self.matrix(b, "matmul_bt rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul_bt inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(&[a, b]);
        self.push(vec![m, n], out, Op::MatMulBT(a, b), ng)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), ng)
    }

    /// `a + c` element-wise.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x + c).collect();
        let ng = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Offset(a), ng)
    }

    fn check_row(&self, x: Var, r: Var, what: &str) -> Result<(usize, usize)> {
        let (m, n) = self.rc(x);
        if self.value(r).len() != n {
            return Err(Error::dim(format!(
                "{what}: row of length {} against width {n}",
                self.value(r).len()
            )));
        }
        Ok((m, n))
    }

    /// Adds the vector `r[n]` to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (m, n) = self.check_row(x, r, "add_row")?;
        let rv = self.value(r);
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(rv) {
                *o += b;
            }
        }
        let ng = self.needs(&[x, r]);
        self.push(self.shape(x).to_vec(), out, Op::AddRow(x, r), ng)
    }

    /// Multiplies every row of `x` by the vector `r[n]`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (m, n) = self.check_row(x, r, "mul_row")?;
        let rv = self.value(r);
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(rv) {
                *o *= b;
            }
        }
        let ng = self.needs(&[x, r]);
        self.push(self.shape(x).to_vec(), out, Op::MulRow(x, r), ng)
    }

    /// `x[B·T×n] + y[T×n]`, with `y` repeated for each of the B blocks.
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var> {
        let xl = self.value(x).len();
        let yl = self.value(y).len();
        if yl == 0 || xl % yl != 0 || self.rc(x).1 != self.rc(y).1 {
            return Err(Error::dim(format!(
                "add_tiled: {:?} is not a tiling of {:?}",
                self.shape(x),
                self.shape(y)
            )));
        }
        let yv = self.value(y);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + yv[i % yl])
            .collect();
        let ng = self.needs(&[x, y]);
        self.push(self.shape(x).to_vec(), out, Op::AddTiled(x, y), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let ng = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), ng)
    }

    /// Normalizes each row over the last axis, then applies `gain`/`bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.rc(x);
        if d == 0 {
            return Err(Error::dim("layernorm over an empty axis"));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim(format!(
                "layernorm affine params must have length {d}"
            )));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(&[x, gain, bias]);
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let ng = self.needs(&[x]);
        self.push(shape, out, Op::Softmax { x, outer, n, inner }, ng)
    }

    /// Pairwise cosine similarity between the rows of `a[m×d]` and `b[n×d]`.
    ///
    /// Norms are clamped below at `eps`, so a zero row yields similarity 0.
    pub fn cosine_matrix(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.rc(a);
        let (n, d2) = self.rc(b);
        if d != d2 {
            return Err(Error::dim(format!("cosine: widths {d} vs {d2}")));
        }
        let norms = |v: &[f64], rows: usize| -> Vec<f64> {
            (0..rows)
                .map(|i| {
                    v[i * d..(i + 1) * d]
                        .iter()
                        .map(|x| x * x)
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        };
        let norm_a = norms(self.value(a), m);
        let norm_b = norms(self.value(b), n);
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, d, n);
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] /= norm_a[i].max(eps) * norm_b[j].max(eps);
            }
        }
        let ng = self.needs(&[a, b]);
        self.push(
            vec![m, n],
            out,
            Op::Cosine {
                a,
                b,
                eps,
                norm_a,
                norm_b,
            },
            ng,
        )
    }

    /// Cosine similarity of two vectors, as a scalar node.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() || self.value(a).is_empty() {
            return Err(Error::dim(
                "cosine_similarity needs equal non-empty vectors",
            ));
        }
        let d = self.value(a).len();
        let ar = self.reshape(a, &[1, d])?;
        let br = self.reshape(b, &[1, d])?;
        let c = self.cosine_matrix(ar, br, eps)?;
        self.reshape(c, &[])
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch·tq × d]`; `k`, `v` are `[batch·tk × d]`. Heads split the
    /// model dimension into `heads` contiguous slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (mq, d) = self.rc(q);
        let (mk, dk) = self.rc(k);
        if self.shape(k) != self.shape(v) || d != dk {
            return Err(Error::dim("attention: key/value/query widths disagree"));
        }
        if batch == 0 || mq % batch != 0 || mk % batch != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!(
                "attention: cannot split {mq}/{mk} rows into {batch} items of {heads} heads"
            )));
        }
        let (tq, tk, dh) = (mq / batch, mk / batch, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut out = vec![0.0; mq * d];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                let p = &mut probs[((b * heads + h) * tq) * tk..((b * heads + h + 1) * tq) * tk];
                for i in 0..tq {
                    let qi = &qv[(b * tq + i) * d + col..(b * tq + i) * d + col + dh];
                    let row = &mut p[i * tk..(i + 1) * tk];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kv[(b * tk + j) * d + col..(b * tk + j) * d + col + dh];
                        *s = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let o = &mut out[(b * tq + i) * d + col..(b * tq + i) * d + col + dh];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s /= z;
                        let vj = &vv[(b * tk + j) * d + col..(b * tk + j) * d + col + dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += *s * vc;
                        }
                    }
                }
            }
        }
        let ng = self.needs(&[q, k, v]);
        self.push(
            vec![mq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                tq,
                tk,
                probs,
            },
            ng,
        )
    }

    // ---- structural ops ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_rows of nothing"));
        };
        let n = self.rc(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = self.rc(p);
            if c != n {
                return Err(Error::dim(format!("concat_rows widths {n} vs {c}")));
            }
            rows += m;
            out.extend_from_slice(self.value(p));
        }
        let ng = self.needs(parts);
        self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols of nothing"));
        };
        let m = self.rc(first).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.rc(p).1).collect();
        if parts.iter().any(|&p| self.rc(p).0 != m) {
            return Err(Error::dim("concat_cols row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut c0 = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for i in 0..m {
                out[i * total + c0..i * total + c0 + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            c0 += w;
        }
        let ng = self.needs(parts);
        self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Interleaves per-item row blocks: for each of `batch` items, the item's
    /// rows from every part in order. Part `i` holds `rows_i` rows per item.
    pub fn concat_per_batch(&mut self, parts: &[(Var, usize)], batch: usize) -> Result<Var> {
        let Some(&(first, _)) = parts.first() else {
            return Err(Error::dim("concat_per_batch of nothing"));
        };
        let d = self.rc(first).1;
        for &(p, r) in parts {
            let (m, c) = self.rc(p);
            if c != d || m != r * batch {
                return Err(Error::dim(format!(
                    "concat_per_batch: part {:?} is not {batch} items of {r}×{d}",
                    self.shape(p)
                )));
            }
        }
        let per: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Vec::with_capacity(batch * per * d);
        for b in 0..batch {
            for &(p, r) in parts {
                out.extend_from_slice(&self.value(p)[b * r * d..(b + 1) * r * d]);
            }
        }
        let vars: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let ng = self.needs(&vars);
        self.push(
            vec![batch * per, d],
            out,
            Op::ConcatPerBatch {
                parts: parts.to_vec(),
                batch,
            },
            ng,
        )
    }

    /// Repeats the matrix `x` `batch` times vertically.
    pub fn broadcast_rows(&mut self, x: Var, batch: usize) -> Result<Var> {
        let (m, n) = self.rc(x);
        let out = self.value(x).repeat(batch);
        let ng = self.needs(&[x]);
        self.push(vec![m * batch, n], out, Op::BroadcastRows { x }, ng)
    }

    /// Gathers rows by index.
    pub fn select_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.rc(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= m {
                return Err(Error::dim(format!("row {i} out of range for {m} rows")));
            }
            out.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        let ng = self.needs(&[x]);
        self.push(
            vec![index.len(), n],
            out,
            Op::SelectRows {
                x,
                index: index.to_vec(),
            },
            ng,
        )
    }

    /// Replaces rows with `keep[i] == false` by zeros.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (m, n) = self.rc(x);
        if keep.len() != m {
            return Err(Error::dim("mask_rows: mask length differs from row count"));
        }
        let mut out = self.value(x).to_vec();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out[i * n..(i + 1) * n].fill(0.0);
            }
        }
        let ng = self.needs(&[x]);
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::MaskRows {
                x,
                keep: keep.to_vec(),
            },
            ng,
        )
    }

    /// Sums column blocks `start..end` of width `width`: `[m × G·width] → [m × width]`.
    pub fn sum_col_blocks(
        &mut self,
        x: Var,
        width: usize,
        start: usize,
        end: usize,
    ) -> Result<Var> {
        let (m, c) = self.rc(x);
        if width == 0 || c % width != 0 || end > c / width || start > end {
            return Err(Error::dim(format!(
                "sum_col_blocks: blocks {start}..{end} of width {width} in {c} columns"
            )));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; m * width];
        for i in 0..m {
            let o = &mut out[i * width..(i + 1) * width];
            for g in start..end {
                for (oc, xc) in o
                    .iter_mut()
                    .zip(&xv[i * c + g * width..i * c + (g + 1) * width])
                {
                    *oc += xc;
                }
            }
        }
        let ng = self.needs(&[x]);
        self.push(
            vec![m, width],
            out,
            Op::SumColBlocks {
                x,
                width,
                start,
                end,
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let ng = self.needs(&[x]);
        self.push(shape.to_vec(), out, Op::Reshape(x), ng)
    }

    /// `out[b] = Σ_i weights[b,i] · tokens[b·per_item + offset + i]`.
    pub fn token_pool(
        &mut self,
        tokens: Var,
        weights: Var,
        per_item: usize,
        offset: usize,
    ) -> Result<Var> {
        let (m, d) = self.rc(tokens);
        let (batch, p) = self.matrix(weights, "token_pool weights")?;
        if m != batch * per_item || offset + p > per_item {
            return Err(Error::dim(format!(
                "token_pool: {m} token rows vs {batch} items of {per_item} (offset {offset}, pooled {p})"
            )));
        }
        let (tv, wv) = (self.value(tokens), self.value(weights));
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            let o = &mut out[b * d..(b + 1) * d];
            for i in 0..p {
                let w = wv[b * p + i];
                let row = (b * per_item + offset + i) * d;
                for (oc, tc) in o.iter_mut().zip(&tv[row..row + d]) {
                    *oc += w * tc;
                }
            }
        }
        let ng = self.needs(&[tokens, weights]);
        self.push(
            vec![batch, d],
            out,
            Op::TokenPool {
                tokens,
                weights,
                per_item,
                offset,
            },
            ng,
        )
    }

    /// Sets columns with `allowed[c] == false` to negative infinity.
    pub fn mask_fill(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (m, c) = self.rc(x);
        if allowed.len() != c {
            return Err(Error::dim(
                "mask_fill: mask length differs from class count",
            ));
        }
        let mut out = self.value(x).to_vec();
        for i in 0..m {
            for (j, &a) in allowed.iter().enumerate() {
                if !a {
                    out[i * c + j] = f64::NEG_INFINITY;
                }
            }
        }
        let ng = self.needs(&[x]);
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::MaskFill {
                x,
                allowed: allowed.to_vec(),
            },
            ng,
        )
    }

    /// Mean negative log-softmax at the label. Logits may hold `-inf` except at
    /// the label position.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.matrix(logits, "cross_entropy logits")?;
        if labels.len() != b || b == 0 {
            return Err(Error::dim(format!("{} labels for {b} rows", labels.len())));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::dim(format!(
                    "label {y} out of range for {c} classes"
                )));
            }
            let row = &lv[i * c..(i + 1) * c];
            if row[y] == f64::NEG_INFINITY {
                return Err(Error::InvalidMask(format!("label {y} is masked out")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - max).exp() / z;
            }
            loss += max + z.ln() - row[y];
        }
        loss /= b as f64;
        let ng = self.needs(&[logits]);
        self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let ng = self.needs(&[x]);
        self.push(vec![], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let s = self.value(x).iter().sum::<f64>() / n as f64;
        let ng = self.needs(&[x]);
        self.push(vec![], vec![s], Op::Mean(x), ng)
    }

    // ---- reverse pass ----

    /// Back-propagates from the scalar `loss`. Gradients are then available via
    /// [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` is reachable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient recorded for `v` into `t`'s buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| nodes[v.0].value.as_slice();
        let rc = |v: Var| rows_cols(&nodes[v.0].shape, nodes[v.0].value.len());
        fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        macro_rules! acc {
            ($v:expr) => {{
                let len = nodes[$v.0].value.len();
                slot(grads, $v, len)
            }};
        }

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = rc(a);
                let n = rc(b).1;
                if wants(a) {
                    gemm_nt(g, val(b), acc!(a), m, n, k);
                }
                if wants(b) {
                    gemm_tn(val(a), g, acc!(b), k, m, n);
                }
            }
            &Op::MatMulBT(a, b) => {
                let (m, k) = rc(a);
                let n = rc(b).0;
                if wants(a) {
                    gemm_nn(g, val(b), acc!(a), m, n, k);
                }
                if wants(b) {
                    gemm_tn(g, val(a), acc!(b), n, m, k);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        add_into(acc!(v), g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    add_into(acc!(a), g);
                }
                if wants(b) {
                    for (o, x) in acc!(b).iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b);
                    for ((o, x), y) in acc!(a).iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if wants(b) {
                    let av = val(a);
                    for ((o, x), y) in acc!(b).iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            &Op::Scale(a, c) => {
                if wants(a) {
                    for (o, x) in acc!(a).iter_mut().zip(g) {
                        *o += c * x;
                    }
                }
            }
            &Op::Offset(a) | &Op::Reshape(a) => {
                if wants(a) {
                    add_into(acc!(a), g);
                }
            }
            &Op::AddRow(x, r) => {
                if wants(x) {
                    add_into(acc!(x), g);
                }
                if wants(r) {
                    let n = rc(x).1;
                    let gr = acc!(r);
                    for row in g.chunks(n) {
                        add_into(gr, row);
                    }
                }
            }
            &Op::MulRow(x, r) => {
                let n = rc(x).1;
                if wants(x) {
                    let rv = val(r);
                    let gx = acc!(x);
                    for (i, gi) in g.iter().enumerate() {
                        gx[i] += gi * rv[i % n];
                    }
                }
                if wants(r) {
                    let xv = val(x);
                    let gr = acc!(r);
                    for (i, gi) in g.iter().enumerate() {
                        gr[i % n] += gi * xv[i];
                    }
                }
            }
            &Op::AddTiled(x, y) => {
                if wants(x) {
                    add_into(acc!(x), g);
                }
                if wants(y) {
                    let yl = val(y).len();
                    let gy = acc!(y);
                    for chunk in g.chunks(yl) {
                        add_into(gy, chunk);
                    }
                }
            }
            &Op::Gelu(x) => {
                if wants(x) {
                    let xv = val(x);
                    for ((o, gi), &v) in acc!(x).iter_mut().zip(g).zip(xv) {
                        *o += gi * gelu_grad(v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, d) = rc(*x);
                if wants(*gain) {
                    let gg = acc!(*gain);
                    for (i, gi) in g.iter().enumerate() {
                        gg[i % d] += gi * xhat[i];
                    }
                }
                if wants(*bias) {
                    let gb = acc!(*bias);
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
                if wants(*x) {
                    let gv = val(*gain).to_vec();
                    let gx = acc!(*x);
                    let mut dxhat = vec![0.0; d];
                    for i in 0..m {
                        let gr = &g[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx =
                            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[i * d + j] += rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            &Op::Softmax { x, outer, n, inner } => {
                if wants(x) {
                    let y = &node.value;
                    let gx = acc!(x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Cosine {
                a,
                b,
                eps,
                norm_a,
                norm_b,
            } => {
                let (m, d) = rc(*a);
                let n = rc(*b).0;
                let cos = &node.value;
                // g scaled by the clamped denominators
                let mut gs = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gs[i * n + j] = g[i * n + j] / (norm_a[i].max(*eps) * norm_b[j].max(*eps));
                    }
                }
                if wants(*a) {
                    let (av, bv) = (val(*a), val(*b));
                    let ga = acc!(*a);
                    gemm_nn(&gs, bv, ga, m, n, d);
                    for i in 0..m {
                        if norm_a[i] > *eps {
                            let f: f64 = (0..n).map(|j| g[i * n + j] * cos[i * n + j]).sum::<f64>()
                                / (norm_a[i] * norm_a[i]);
                            for c in 0..d {
                                ga[i * d + c] -= f * av[i * d + c];
                            }
                        }
                    }
                }
                if wants(*b) {
                    let (av, bv) = (val(*a), val(*b));
                    let gb = acc!(*b);
                    gemm_tn(&gs, av, gb, n, m, d);
                    for j in 0..n {
                        if norm_b[j] > *eps {
                            let f: f64 = (0..m).map(|i| g[i * n + j] * cos[i * n + j]).sum::<f64>()
                                / (norm_b[j] * norm_b[j]);
                            for c in 0..d {
                                gb[j * d + c] -= f * bv[j * d + c];
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                tq,
                tk,
                probs,
            } => {
                let (q, k, v) = (*q, *k, *v);
                let (batch, heads, tq, tk) = (*batch, *heads, *tq, *tk);
                let d = rc(q).1;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (val(q), val(k), val(v));
                let mut gq = vec![0.0; qv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gv = vec![0.0; vv.len()];
                let mut ds = vec![0.0; tk];
                for b in 0..batch {
                    for h in 0..heads {
                        let col = h * dh;
                        let p =
                            &probs[((b * heads + h) * tq) * tk..((b * heads + h + 1) * tq) * tk];
                        for i in 0..tq {
                            let gi = &g[(b * tq + i) * d + col..(b * tq + i) * d + col + dh];
                            let pi = &p[i * tk..(i + 1) * tk];
                            let mut dot = 0.0;
                            for j in 0..tk {
                                let vj = &vv[(b * tk + j) * d + col..(b * tk + j) * d + col + dh];
                                let dp: f64 = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                                ds[j] = dp;
                                dot += dp * pi[j];
                                let gvj =
                                    &mut gv[(b * tk + j) * d + col..(b * tk + j) * d + col + dh];
                                for (o, x) in gvj.iter_mut().zip(gi) {
                                    *o += pi[j] * x;
                                }
                            }
                            let qrow = (b * tq + i) * d + col;
                            for j in 0..tk {
                                let s = scale * pi[j] * (ds[j] - dot);
                                if s == 0.0 {
                                    continue;
                                }
                                let krow = (b * tk + j) * d + col;
                                for c in 0..dh {
                                    gq[qrow + c] += s * kv[krow + c];
                                    gk[krow + c] += s * qv[qrow + c];
                                }
                            }
                        }
                    }
                }
                for (var, gr) in [(q, gq), (k, gk), (v, gv)] {
                    if wants(var) {
                        add_into(acc!(var), &gr);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if wants(p) {
                        add_into(acc!(p), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (node.shape[0], node.shape[1]);
                let mut c0 = 0;
                for &p in parts {
                    let w = rc(p).1;
                    if wants(p) {
                        let gp = acc!(p);
                        for i in 0..m {
                            add_into(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * total + c0..i * total + c0 + w],
                            );
                        }
                    }
                    c0 += w;
                }
            }
            Op::ConcatPerBatch { parts, batch } => {
                let d = node.shape[1];
                let per: usize = parts.iter().map(|p| p.1).sum();
                let mut r0 = 0;
                for &(p, r) in parts {
                    if wants(p) {
                        let gp = acc!(p);
                        for b in 0..*batch {
                            let src = &g[(b * per + r0) * d..(b * per + r0 + r) * d];
                            add_into(&mut gp[b * r * d..(b + 1) * r * d], src);
                        }
                    }
                    r0 += r;
                }
            }
            &Op::BroadcastRows { x, .. } => {
                if wants(x) {
                    let len = val(x).len();
                    let gx = acc!(x);
                    for chunk in g.chunks(len.max(1)) {
                        add_into(gx, chunk);
                    }
                }
            }
            Op::SelectRows { x, index } => {
                if wants(*x) {
                    let n = rc(*x).1;
                    let gx = acc!(*x);
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut gx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::MaskRows { x, keep } => {
                if wants(*x) {
                    let n = rc(*x).1;
                    let gx = acc!(*x);
                    for (i, &k) in keep.iter().enumerate() {
                        if k {
                            add_into(&mut gx[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                        }
                    }
                }
            }
            &Op::SumColBlocks {
                x,
                width,
                start,
                end,
            } => {
                if wants(x) {
                    let (m, c) = rc(x);
                    let gx = acc!(x);
                    for i in 0..m {
                        let gi = &g[i * width..(i + 1) * width];
                        for blk in start..end {
                            add_into(&mut gx[i * c + blk * width..i * c + (blk + 1) * width], gi);
                        }
                    }
                }
            }
            &Op::TokenPool {
                tokens,
                weights,
                per_item,
                offset,
            } => {
                let d = rc(tokens).1;
                let (batch, p) = rc(weights);
                let (tv, wv) = (val(tokens), val(weights));
                if wants(tokens) {
                    let gt = acc!(tokens);
                    for b in 0..batch {
                        let gb = &g[b * d..(b + 1) * d];
                        for i in 0..p {
                            let w = wv[b * p + i];
                            let row = (b * per_item + offset + i) * d;
                            for (o, x) in gt[row..row + d].iter_mut().zip(gb) {
                                *o += w * x;
                            }
                        }
                    }
                }
                if wants(weights) {
                    let gw = acc!(weights);
                    for b in 0..batch {
                        let gb = &g[b * d..(b + 1) * d];
                        for i in 0..p {
                            let row = (b * per_item + offset + i) * d;
                            gw[b * p + i] += gb
                                .iter()
                                .zip(&tv[row..row + d])
                                .map(|(x, y)| x * y)
                                .sum::<f64>();
                        }
                    }
                }
            }
            Op::MaskFill { x, allowed } => {
                if wants(*x) {
                    let c = allowed.len();
                    let gx = acc!(*x);
                    for (i, gi) in g.iter().enumerate() {
                        if allowed[i % c] {
                            gx[i] += gi;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(*logits) {
                    let c = rc(*logits).1;
                    let b = labels.len();
                    let scale = g[0] / b as f64;
                    let gl = acc!(*logits);
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let p = probs[i * c + j];
                            let t = if j == y { p - 1.0 } else { p };
                            gl[i * c + j] += scale * t;
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if wants(x) {
                    for o in acc!(x).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            &Op::Mean(x) => {
                if wants(x) {
                    let n = val(x).len() as f64;
                    for o in acc!(x).iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulBT(..) => "matmul_bt",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Offset(..) => "offset",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::AddTiled(..) => "add_tiled",
        Op::Gelu(..) => "gelu",
        Op::LayerNorm { .. } => "layernorm",
        Op::Softmax { .. } => "softmax",
        Op::Cosine { .. } => "cosine",
        Op::Attention { .. } => "attention",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatPerBatch { .. } => "concat_per_batch",
        Op::BroadcastRows { .. } => "broadcast_rows",
        Op::SelectRows { .. } => "select_rows",
        Op::MaskRows { .. } => "mask_rows",
        Op::SumColBlocks { .. } => "sum_col_blocks",
        Op::Reshape(..) => "reshape",
        Op::TokenPool { .. } => "token_pool",
        Op::MaskFill { .. } => "mask_fill",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
    }
}
