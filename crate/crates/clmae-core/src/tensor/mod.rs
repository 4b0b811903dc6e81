//! Reverse-mode autodiff on a flat tape.
//!
//! A `Graph` is rebuilt for every forward pass (define-by-run). Node ids are
//! indices into the tape, so construction order is already a topological
//! order and `backward` is a single reverse sweep. Values are `f64`,
//! row-major. Shape misuse is a caller bug and panics with both shapes in
//! the message; data-dependent failures (e.g. `log` of a non-positive value
//! in strict mode) also panic, but training code runs graphs in `Clamp`
//! mode where `log` clamps its argument instead.

mod gradcheck;

pub use gradcheck::{grad_check, grad_check_multi};

/// Plain value container for parameters and constants living outside any
/// graph. Leaves are created from these each forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// How `log` treats non-positive inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogMode {
    /// Panic with the offending index (verification runs).
    Strict,
    /// Clamp the argument at 1e-12 (training runs).
    Clamp,
}

const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Neg(NodeId),
    Square(NodeId),
    // The shift is applied at construction; kept here for op Debug output.
    AddConst(NodeId, #[allow(dead_code)] f64),
    MulConst(NodeId, f64),
    ClampMin(NodeId, f64),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Softmax(NodeId, usize),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Reshape(NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, Vec<usize>),
    ScalePatchRows { x: NodeId, z: NodeId, seq: usize },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, seq: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Op-specific stash for backward (layernorm row stats, attention weights).
    saved: Vec<f64>,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    log_mode: LogMode,
}

// ───────────────────────── broadcast helpers ─────────────────────────

#[derive(Clone, Copy, PartialEq)]
enum Pair {
    Same,
    LhsScalar,
    RhsScalar,
}

fn pair_kind(op: &str, ls: &[usize], rs: &[usize], ln: usize, rn: usize) -> Pair {
    if ls == rs {
        Pair::Same
    } else if ln == 1 {
        Pair::LhsScalar
    } else if rn == 1 {
        Pair::RhsScalar
    } else {
        panic!("shape mismatch in {op}: left {ls:?} vs right {rs:?} (only equal shapes or scalar broadcast)");
    }
}

/// Reduce helper: split shape at `axis` into (outer, axis, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ───────────────────────── matmul kernels ─────────────────────────

/// c[m,n] += a[m,k] · b[k,n]
fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    // Two output rows share each streamed row of b, and eight reduction
    // steps land per pass. Every output element still sees its fma chain in
    // the original ascending order.
    let mut i = 0;
    while i + 2 <= m {
        mm_nn_rows::<2>(a, b, c, i, k, n);
        i += 2;
    }
    while i < m {
        mm_nn_rows::<1>(a, b, c, i, k, n);
        i += 1;
    }
}

fn mm_nn_rows<const R: usize>(a: &[f64], b: &[f64], c: &mut [f64], i: usize, k: usize, n: usize) {
    let arows: [&[f64]; R] = std::array::from_fn(|r| &a[(i + r) * k..][..k]);
    let cblock = &mut c[i * n..][..R * n];
    let mut p = 0;
    while p + 8 <= k {
        let av: [[f64; 8]; R] =
            std::array::from_fn(|r| arows[r][p..p + 8].try_into().expect("chunk is eight wide"));
        if av.iter().flatten().any(|&v| v != 0.0) {
            let bs: [&[f64]; 8] = std::array::from_fn(|q| &b[(p + q) * n..][..n]);
            let mut j = 0;
            while j + 4 <= n {
                let mut v: [[f64; 4]; R] = std::array::from_fn(|r| {
                    cblock[r * n + j..r * n + j + 4].try_into().expect("block is four wide")
                });
                for q in 0..8 {
                    let bq: [f64; 4] = bs[q][j..j + 4].try_into().expect("block is four wide");
                    for r in 0..R {
                        for l in 0..4 {
                            v[r][l] = av[r][q].mul_add(bq[l], v[r][l]);
                        }
                    }
                }
                for r in 0..R {
                    cblock[r * n + j..r * n + j + 4].copy_from_slice(&v[r]);
                }
                j += 4;
            }
            while j < n {
                for r in 0..R {
                    let mut v = cblock[r * n + j];
                    for q in 0..8 {
                        v = av[r][q].mul_add(bs[q][j], v);
                    }
                    cblock[r * n + j] = v;
                }
                j += 1;
            }
        }
        p += 8;
    }
    while p < k {
        for r in 0..R {
            let av = arows[r][p];
            if av != 0.0 {
                let brow = &b[p * n..][..n];
                for (cv, &bv) in cblock[r * n..][..n].iter_mut().zip(brow) {
                    *cv = av.mul_add(bv, *cv);
                }
            }
        }
        p += 1;
    }
}

/// c[m,k] += a[m,n] · b[k,n]ᵀ
fn transpose_data(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    // Eight output dots per pass over the shared left row; each dot keeps
    // its own accumulator in the original reduction order.
    for i in 0..m {
        let arow = &a[i * n..][..n];
        let crow = &mut c[i * k..][..k];
        let mut p = 0;
        while p + 8 <= k {
            let bs: [&[f64]; 8] = std::array::from_fn(|q| &b[(p + q) * n..][..n]);
            let mut s = [0.0f64; 8];
            for j in 0..n {
                let av = arow[j];
                for q in 0..8 {
                    s[q] = av.mul_add(bs[q][j], s[q]);
                }
            }
            for q in 0..8 {
                crow[p + q] += s[q];
            }
            p += 8;
        }
        while p < k {
            let brow = &b[p * n..][..n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = av.mul_add(bv, acc);
            }
            crow[p] += acc;
            p += 1;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    // Eight reduction rows per pass; contributions still land in ascending
    // row order, so every output keeps its original fma sequence.
    let mut i = 0;
    while i + 8 <= m {
        let arows: [&[f64]; 8] = std::array::from_fn(|q| &a[(i + q) * k..][..k]);
        let brows: [&[f64]; 8] = std::array::from_fn(|q| &b[(i + q) * n..][..n]);
        for p in 0..k {
            let av: [f64; 8] = std::array::from_fn(|q| arows[q][p]);
            if av.iter().any(|&v| v != 0.0) {
                let crow = &mut c[p * n..][..n];
                for j in 0..n {
                    let mut v = crow[j];
                    for q in 0..8 {
                        v = av[q].mul_add(brows[q][j], v);
                    }
                    crow[j] = v;
                }
            }
        }
        i += 8;
    }
    while i < m {
        let arow = &a[i * k..][..k];
        let brow = &b[i * n..][..n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let crow = &mut c[p * n..][..n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = av.mul_add(bv, *cv);
                }
            }
        }
        i += 1;
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// Cody-Waite split of ln 2 for the fast exponential's range reduction.
const EXP_LN2_HI: f64 = 6.93145751953125e-1;
const EXP_LN2_LO: f64 = 1.42860682030941723212e-6;

/// exp(x) via range reduction and the Cephes rational kernel, within a
/// couple of ulp. Far cheaper than the libm call on the hot paths that burn
/// millions of exponentials per step; edge cases fall back to libm.
fn fast_exp(x: f64) -> f64 {
    if x > 709.0 || x < -708.0 || !x.is_finite() {
        return x.exp();
    }
    let n = (x * std::f64::consts::LOG2_E).round();
    let r = x - n * EXP_LN2_HI - n * EXP_LN2_LO;
    // degree 13 Taylor kernel on |r| <= ln2/2, truncation below one ulp;
    // Estrin grouping keeps the dependency chain short
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let p0 = r.mul_add(1.0, 1.0);
    let p1 = r.mul_add(1.0 / 6.0, 0.5);
    let p2 = r.mul_add(1.0 / 120.0, 1.0 / 24.0);
    let p3 = r.mul_add(1.0 / 5040.0, 1.0 / 720.0);
    let p4 = r.mul_add(1.0 / 362880.0, 1.0 / 40320.0);
    let p5 = r.mul_add(1.0 / 39916800.0, 1.0 / 3628800.0);
    let p6 = r.mul_add(1.0 / 6227020800.0, 1.0 / 479001600.0);
    let q0 = r2.mul_add(p1, p0);
    let q1 = r2.mul_add(p3, p2);
    let q2 = r2.mul_add(p5, p4);
    let e = r8.mul_add(r4.mul_add(p6, q2), r4.mul_add(q1, q0));
    // |n| <= 1023 after the clamps above, so the exponent stays in range
    let scale = f64::from_bits(((n as i64 + 1023) << 52) as u64);
    e * scale
}

/// tanh(x) through fast_exp. Saturates past |x| = 20 where the true value
/// is within one ulp of ±1.
fn fast_tanh(x: f64) -> f64 {
    let ax = x.abs();
    if ax > 20.0 || ax < 1e-8 {
        return if ax > 20.0 { 1.0f64.copysign(x) } else { x };
    }
    let e = fast_exp(2.0 * ax);
    (1.0 - 2.0 / (e + 1.0)).copysign(x)
}

const GELU_S: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

impl Graph {
    pub fn new(log_mode: LogMode) -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), log_mode }
    }

    fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        saved: Vec<f64>,
        needs_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node { op, shape, data, saved, needs_grad });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of a one-element tensor.
    pub fn value(&self, id: NodeId) -> f64 {
        let n = &self.nodes[id.0];
        assert_eq!(n.data.len(), 1, "value() on non-scalar shape {:?}", n.shape);
        n.data[0]
    }

    /// Accumulated gradient of a leaf created with `requires_grad`. Interior
    /// node gradients are per-sweep scratch and are not retained.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Attention weights stashed by the `attention` op, for inspection.
    pub fn saved(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].saved
    }

    // ───────────────────────── leaves ─────────────────────────

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), Vec::new(), requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Leaf, vec![], vec![v], Vec::new(), false)
    }

    // ───────────────────────── binary elementwise ─────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> (Vec<usize>, Vec<f64>, bool) {
        let (la, lb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let kind = pair_kind(name, &la.shape, &lb.shape, la.data.len(), lb.data.len());
        let (shape, data) = match kind {
            Pair::Same => {
                (la.shape.clone(), la.data.iter().zip(&lb.data).map(|(&x, &y)| f(x, y)).collect())
            }
            Pair::LhsScalar => {
                let x = la.data[0];
                (lb.shape.clone(), lb.data.iter().map(|&y| f(x, y)).collect())
            }
            Pair::RhsScalar => {
                let y = lb.data[0];
                (la.shape.clone(), la.data.iter().map(|&x| f(x, y)).collect())
            }
        };
        (shape, data, la.needs_grad || lb.needs_grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, data, ng) = self.binary("add", a, b, |x, y| x + y);
        self.push(Op::Add(a, b), shape, data, Vec::new(), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, data, ng) = self.binary("sub", a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), shape, data, Vec::new(), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, data, ng) = self.binary("mul", a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), shape, data, Vec::new(), ng)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, data, ng) = self.binary("div", a, b, |x, y| x / y);
        self.push(Op::Div(a, b), shape, data, Vec::new(), ng)
    }

    // ───────────────────────── unary elementwise ─────────────────────────

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>, bool) {
        let n = &self.nodes[a.0];
        (n.shape.clone(), n.data.iter().map(|&x| f(x)).collect(), n.needs_grad)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let (shape, data, ng) = self.unary(a, f64::exp);
        self.push(Op::Exp(a), shape, data, Vec::new(), ng)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let mode = self.log_mode;
        if mode == LogMode::Strict {
            if let Some(i) = self.nodes[a.0].data.iter().position(|&x| x <= 0.0) {
                panic!(
                    "log of non-positive value {} at index {} (strict mode)",
                    self.nodes[a.0].data[i], i
                );
            }
        }
        let (shape, data, ng) =
            self.unary(a, |x| if mode == LogMode::Clamp { x.max(LOG_CLAMP).ln() } else { x.ln() });
        self.push(Op::Log(a), shape, data, Vec::new(), ng)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let (shape, data, ng) = self.unary(a, |x| -x);
        self.push(Op::Neg(a), shape, data, Vec::new(), ng)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let (shape, data, ng) = self.unary(a, |x| x * x);
        self.push(Op::Square(a), shape, data, Vec::new(), ng)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let (shape, data, ng) = self.unary(a, |x| x + c);
        self.push(Op::AddConst(a, c), shape, data, Vec::new(), ng)
    }

    pub fn mul_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let (shape, data, ng) = self.unary(a, |x| x * c);
        self.push(Op::MulConst(a, c), shape, data, Vec::new(), ng)
    }

    pub fn clamp_min(&mut self, a: NodeId, m: f64) -> NodeId {
        let (shape, data, ng) = self.unary(a, |x| x.max(m));
        self.push(Op::ClampMin(a, m), shape, data, Vec::new(), ng)
    }

    // ───────────────────────── matmul / shape ops ─────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (la, lb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (sa, sb) = (&la.shape, &lb.shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            panic!("shape mismatch in matmul: left {sa:?} vs right {sb:?}");
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_nn(&la.data, &lb.data, &mut out, m, k, n);
        let ng = la.needs_grad || lb.needs_grad;
        self.push(Op::Matmul(a, b), vec![m, n], out, Vec::new(), ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let n = &self.nodes[a.0];
        assert_eq!(
            n.data.len(),
            shape.iter().product::<usize>(),
            "reshape from {:?} to {:?} changes element count",
            n.shape,
            shape
        );
        let (data, ng) = (n.data.clone(), n.needs_grad);
        self.push(Op::Reshape(a), shape.to_vec(), data, Vec::new(), ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let n = &self.nodes[a.0];
        assert_eq!(n.shape.len(), 2, "transpose needs rank 2, got {:?}", n.shape);
        let (r, c) = (n.shape[0], n.shape[1]);
        let out = transpose_data(&n.data, r, c);
        let ng = n.needs_grad;
        self.push(Op::Transpose(a), vec![c, r], out, Vec::new(), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.nodes[parts[0].0].shape[1];
        let mut rows = 0;
        let mut ng = false;
        for &p in parts {
            let n = &self.nodes[p.0];
            assert!(
                n.shape.len() == 2 && n.shape[1] == cols,
                "shape mismatch in concat_rows: expected [_, {cols}], got {:?}",
                n.shape
            );
            rows += n.shape[0];
            ng |= n.needs_grad;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        self.push(Op::ConcatRows(parts.to_vec()), vec![rows, cols], data, Vec::new(), ng)
    }

    /// Gather rows by index; an index may repeat (backward accumulates).
    pub fn slice_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let n = &self.nodes[a.0];
        assert_eq!(n.shape.len(), 2, "slice_rows needs rank 2, got {:?}", n.shape);
        let (r, c) = (n.shape[0], n.shape[1]);
        for &i in rows {
            assert!(i < r, "slice_rows index {i} out of range for {r} rows");
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&n.data[i * c..(i + 1) * c]);
        }
        let ng = n.needs_grad;
        self.push(Op::SliceRows(a, rows.to_vec()), vec![rows.len(), c], data, Vec::new(), ng)
    }

    // ───────────────────────── reductions ─────────────────────────

    fn reduce(&mut self, a: NodeId, axis: Option<usize>, mean: bool) -> NodeId {
        let n = &self.nodes[a.0];
        let ng = n.needs_grad;
        let (shape, data) = match axis {
            None => {
                let s: f64 = n.data.iter().sum();
                let count = n.data.len() as f64;
                (vec![], vec![if mean { s / count } else { s }])
            }
            Some(ax) => {
                let (outer, axis_n, inner) = axis_split(&n.shape, ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for aa in 0..axis_n {
                        let base = (o * axis_n + aa) * inner;
                        let orow = &n.data[base..base + inner];
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for (d, &x) in dst.iter_mut().zip(orow) {
                            *d += x;
                        }
                    }
                }
                if mean {
                    let inv = 1.0 / axis_n as f64;
                    for v in &mut out {
                        *v *= inv;
                    }
                }
                let mut shape = n.shape.clone();
                shape.remove(ax);
                (shape, out)
            }
        };
        let op = if mean { Op::Mean(a, axis) } else { Op::Sum(a, axis) };
        self.push(op, shape, data, Vec::new(), ng)
    }

    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> NodeId {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> NodeId {
        self.reduce(a, axis, true)
    }

    // ───────────────────────── activations ─────────────────────────

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (shape, data, ng) = self.unary(a, stable_sigmoid);
        self.push(Op::Sigmoid(a), shape, data, Vec::new(), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        // The inner tanh is saved so the backward pass reuses it instead of
        // paying for a second tanh per element.
        let n = &self.nodes[a.0];
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        let mut data = Vec::with_capacity(n.data.len());
        let mut saved = Vec::with_capacity(n.data.len());
        for &x in &n.data {
            let t = fast_tanh(GELU_S * (x + GELU_C * x * x * x));
            saved.push(t);
            data.push(0.5 * x * (1.0 + t));
        }
        self.push(Op::Gelu(a), shape, data, saved, ng)
    }

    /// Softmax along `axis`, with the running max subtracted per lane.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        let n = &self.nodes[a.0];
        let (outer, axis_n, inner) = axis_split(&n.shape, axis);
        let mut out = vec![0.0; n.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |aa: usize| (o * axis_n + aa) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for aa in 0..axis_n {
                    mx = mx.max(n.data[at(aa)]);
                }
                let mut denom = 0.0;
                for aa in 0..axis_n {
                    let e = fast_exp(n.data[at(aa)] - mx);
                    out[at(aa)] = e;
                    denom += e;
                }
                let inv = 1.0 / denom;
                for aa in 0..axis_n {
                    out[at(aa)] *= inv;
                }
            }
        }
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        self.push(Op::Softmax(a, axis), shape, out, Vec::new(), ng)
    }

    /// Normalize the last axis with population variance, then scale and shift.
    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (nx, ngain, nbias) = (&self.nodes[x.0], &self.nodes[gain.0], &self.nodes[bias.0]);
        let d = *nx.shape.last().expect("layernorm on rank-0 tensor");
        assert!(
            ngain.shape == [d] && nbias.shape == [d],
            "shape mismatch in layernorm: x {:?} needs gain/bias [{d}], got {:?} and {:?}",
            nx.shape,
            ngain.shape,
            nbias.shape
        );
        let rows = nx.data.len() / d;
        let mut out = vec![0.0; nx.data.len()];
        let mut saved = Vec::with_capacity(rows * 2); // (mean, rstd) per row
        for r in 0..rows {
            let row = &nx.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            saved.push(mean);
            saved.push(rstd);
            let orow = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                orow[j] = (row[j] - mean) * rstd * ngain.data[j] + nbias.data[j];
            }
        }
        let ng = nx.needs_grad || ngain.needs_grad || nbias.needs_grad;
        let shape = nx.shape.clone();
        self.push(Op::LayerNorm { x, gain, bias }, shape, out, saved, ng)
    }

    // ───────────────────────── token-sequence ops ─────────────────────────

    /// Per image of `seq` rows, keep row 0 (the CLS slot) and scale patch row
    /// j by z[image, j]. `x` is [images*seq, d], `z` is [images, seq-1].
    pub fn scale_patch_rows(&mut self, x: NodeId, z: NodeId, seq: usize) -> NodeId {
        let (nx, nz) = (&self.nodes[x.0], &self.nodes[z.0]);
        assert_eq!(nx.shape.len(), 2, "scale_patch_rows needs rank-2 tokens, got {:?}", nx.shape);
        let rows = nx.shape[0];
        let d = nx.shape[1];
        assert!(rows % seq == 0, "token rows {rows} not divisible by seq {seq}");
        let images = rows / seq;
        assert!(
            nz.shape == [images, seq - 1],
            "shape mismatch in scale_patch_rows: tokens {:?} with seq {seq} need z [{images}, {}], got {:?}",
            nx.shape,
            seq - 1,
            nz.shape
        );
        let mut out = nx.data.clone();
        for im in 0..images {
            for j in 0..seq - 1 {
                let zc = nz.data[im * (seq - 1) + j];
                let base = (im * seq + 1 + j) * d;
                for v in &mut out[base..base + d] {
                    *v *= zc;
                }
            }
        }
        let ng = nx.needs_grad || nz.needs_grad;
        let shape = nx.shape.clone();
        self.push(Op::ScalePatchRows { x, z, seq }, shape, out, Vec::new(), ng)
    }

    /// Scaled dot-product attention over per-image windows of `seq` rows,
    /// split into `heads` along the feature axis. Inputs are the already
    /// projected q/k/v of shape [images*seq, d]; scale is 1/sqrt(d/heads).
    /// Attention weights are stashed row-stochastic in `saved`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq: usize,
    ) -> NodeId {
        let (nq, nk, nv) = (&self.nodes[q.0], &self.nodes[k.0], &self.nodes[v.0]);
        assert!(
            nq.shape == nk.shape && nq.shape == nv.shape && nq.shape.len() == 2,
            "shape mismatch in attention: q {:?}, k {:?}, v {:?}",
            nq.shape,
            nk.shape,
            nv.shape
        );
        let rows = nq.shape[0];
        let d = nq.shape[1];
        assert!(rows % seq == 0, "attention rows {rows} not divisible by seq {seq}");
        assert!(d % heads == 0, "attention width {d} not divisible by heads {heads}");
        let images = rows / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut out = vec![0.0; rows * d];
        let mut attn_all = vec![0.0; images * heads * seq * seq];
        let mut qs = vec![0.0; seq * dh];
        let mut ks = vec![0.0; seq * dh];
        let mut vs = vec![0.0; seq * dh];
        for im in 0..images {
            for h in 0..heads {
                copy_block(&nq.data, &mut qs, im, h, seq, dh, d);
                copy_block(&nk.data, &mut ks, im, h, seq, dh, d);
                copy_block(&nv.data, &mut vs, im, h, seq, dh, d);
                let attn =
                    &mut attn_all[(im * heads + h) * seq * seq..(im * heads + h + 1) * seq * seq];
                for s1 in 0..seq {
                    let qrow = &qs[s1 * dh..(s1 + 1) * dh];
                    let arow = &mut attn[s1 * seq..(s1 + 1) * seq];
                    let mut mx = f64::NEG_INFINITY;
                    for s2 in 0..seq {
                        let krow = &ks[s2 * dh..(s2 + 1) * dh];
                        let mut acc = 0.0;
                        for (&a, &b) in qrow.iter().zip(krow) {
                            acc = a.mul_add(b, acc);
                        }
                        arow[s2] = acc * scale;
                        mx = mx.max(arow[s2]);
                    }
                    let mut denom = 0.0;
                    for s2 in 0..seq {
                        arow[s2] = fast_exp(arow[s2] - mx);
                        denom += arow[s2];
                    }
                    let inv = 1.0 / denom;
                    for s2 in 0..seq {
                        arow[s2] *= inv;
                    }
                    // out row = attn row · V
                    let obase = (im * seq + s1) * d + h * dh;
                    for s2 in 0..seq {
                        let w = arow[s2];
                        if w == 0.0 {
                            continue;
                        }
                        let vrow = &vs[s2 * dh..(s2 + 1) * dh];
                        let orow = &mut out[obase..obase + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o = w.mul_add(vv, *o);
                        }
                    }
                }
            }
        }
        let ng = nq.needs_grad || nk.needs_grad || nv.needs_grad;
        let shape = nq.shape.clone();
        self.push(Op::Attention { q, k, v, heads, seq }, shape, out, attn_all, ng)
    }

    // ───────────────────────── backward ─────────────────────────

    /// Reverse sweep from a one-element root. Each sweep seeds 1.0 at the
    /// root and adds its result into the persistent leaf gradients, so
    /// calling backward twice doubles every leaf gradient. Interior
    /// gradients live only for the duration of the sweep.
    pub fn backward(&mut self, root: NodeId) {
        let rn = &self.nodes[root.0];
        if rn.data.len() != 1 {
            panic!("backward root must be a scalar, got shape {:?}", rn.shape);
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad || scratch[i].is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let g = scratch[i].take().expect("grad present");
                accumulate_into(&mut self.grads[i], g);
                continue;
            }
            let gout = scratch[i].take().expect("grad present");
            self.step_back(i, &gout, &mut scratch);
        }
    }

    fn step_back(&self, i: usize, gout: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(a) {
                    // gout · bᵀ, computed against a materialized transpose so
                    // the row kernel streams contiguously. Same fma order.
                    let bt = transpose_data(&self.nodes[b.0].data, k, n);
                    let mut da = vec![0.0; m * k];
                    mm_nn(gout, &bt, &mut da, m, n, k);
                    accumulate_into(&mut scratch[a.0], da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    mm_tn(&self.nodes[a.0].data, gout, &mut db, m, k, n);
                    accumulate_into(&mut scratch[b.0], db);
                }
            }
            Op::Add(a, b) => self.back_binary(a, b, gout, scratch, |_, _, g| g, |_, _, g| g),
            Op::Sub(a, b) => self.back_binary(a, b, gout, scratch, |_, _, g| g, |_, _, g| -g),
            Op::Mul(a, b) => {
                self.back_binary(a, b, gout, scratch, |_, y, g| g * y, |x, _, g| g * x)
            }
            Op::Div(a, b) => {
                self.back_binary(a, b, gout, scratch, |_, y, g| g / y, |x, y, g| -g * x / (y * y))
            }
            Op::Exp(a) => self.back_unary_with_out(i, a, gout, scratch, |y, g| g * y),
            Op::Log(a) => {
                let mode = self.log_mode;
                self.back_unary(a, gout, scratch, move |x, g| {
                    if mode == LogMode::Clamp {
                        if x >= LOG_CLAMP {
                            g / x
                        } else {
                            0.0
                        }
                    } else {
                        g / x
                    }
                });
            }
            Op::Neg(a) => self.back_unary(a, gout, scratch, |_, g| -g),
            Op::Square(a) => self.back_unary(a, gout, scratch, |x, g| 2.0 * x * g),
            Op::AddConst(a, _) => self.back_unary(a, gout, scratch, |_, g| g),
            Op::MulConst(a, c) => self.back_unary(a, gout, scratch, move |_, g| g * c),
            Op::ClampMin(a, m) => {
                self.back_unary(a, gout, scratch, move |x, g| if x >= m { g } else { 0.0 })
            }
            Op::Sum(a, axis) => self.back_reduce(a, axis, gout, scratch, false),
            Op::Mean(a, axis) => self.back_reduce(a, axis, gout, scratch, true),
            Op::Sigmoid(a) => {
                self.back_unary_with_out(i, a, gout, scratch, |y, g| g * y * (1.0 - y))
            }
            Op::Gelu(a) => {
                if self.needs(a) {
                    let xs = &self.nodes[a.0].data;
                    let ts = &self.nodes[i].saved;
                    let contrib: Vec<f64> = xs
                        .iter()
                        .zip(ts)
                        .zip(gout)
                        .map(|((&x, &t), &g)| {
                            let slope = 0.5 * (1.0 + t)
                                + 0.5 * x * (1.0 - t * t) * GELU_S * (1.0 + 3.0 * GELU_C * x * x);
                            g * slope
                        })
                        .collect();
                    accumulate_into(&mut scratch[a.0], contrib);
                }
            }
            Op::Softmax(a, axis) => {
                if self.needs(a) {
                    let y = &self.nodes[i].data;
                    let (outer, axis_n, inner) = axis_split(&self.nodes[i].shape, axis);
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |aa: usize| (o * axis_n + aa) * inner + ii;
                            let mut dot = 0.0;
                            for aa in 0..axis_n {
                                dot += gout[at(aa)] * y[at(aa)];
                            }
                            for aa in 0..axis_n {
                                dx[at(aa)] = y[at(aa)] * (gout[at(aa)] - dot);
                            }
                        }
                    }
                    accumulate_into(&mut scratch[a.0], dx);
                }
            }
            Op::LayerNorm { x, gain, bias } => self.back_layernorm(i, x, gain, bias, gout, scratch),
            Op::Reshape(a) => {
                if self.needs(a) {
                    accumulate_into(&mut scratch[a.0], gout.to_vec());
                }
            }
            Op::Transpose(a) => {
                if self.needs(a) {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mut da = vec![0.0; r * c];
                    for j in 0..c {
                        for ii in 0..r {
                            da[ii * c + j] = gout[j * r + ii];
                        }
                    }
                    accumulate_into(&mut scratch[a.0], da);
                }
            }
            Op::ConcatRows(parts) => {
                let cols = self.nodes[i].shape[1];
                let mut row = 0;
                for &p in &parts {
                    let rows = self.nodes[p.0].shape[0];
                    if self.needs(p) {
                        let part = gout[row * cols..(row + rows) * cols].to_vec();
                        accumulate_into(&mut scratch[p.0], part);
                    }
                    row += rows;
                }
            }
            Op::SliceRows(a, rows) => {
                if self.needs(a) {
                    let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let mut da = vec![0.0; r * c];
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        let src = &gout[out_r * c..(out_r + 1) * c];
                        let dst = &mut da[src_r * c..(src_r + 1) * c];
                        for (d, &g) in dst.iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                    accumulate_into(&mut scratch[a.0], da);
                }
            }
            Op::ScalePatchRows { x, z, seq } => {
                let d = self.nodes[x.0].shape[1];
                let images = self.nodes[x.0].shape[0] / seq;
                if self.needs(x) {
                    let mut dx = gout.to_vec();
                    let zd = &self.nodes[z.0].data;
                    for im in 0..images {
                        for j in 0..seq - 1 {
                            let zc = zd[im * (seq - 1) + j];
                            let base = (im * seq + 1 + j) * d;
                            for v in &mut dx[base..base + d] {
                                *v *= zc;
                            }
                        }
                    }
                    accumulate_into(&mut scratch[x.0], dx);
                }
                if self.needs(z) {
                    let xd = &self.nodes[x.0].data;
                    let mut dz = vec![0.0; images * (seq - 1)];
                    for im in 0..images {
                        for j in 0..seq - 1 {
                            let base = (im * seq + 1 + j) * d;
                            let mut acc = 0.0;
                            for t in 0..d {
                                acc = gout[base + t].mul_add(xd[base + t], acc);
                            }
                            dz[im * (seq - 1) + j] = acc;
                        }
                    }
                    accumulate_into(&mut scratch[z.0], dz);
                }
            }
            Op::Attention { q, k, v, heads, seq } => {
                self.back_attention(i, q, k, v, heads, seq, gout, scratch)
            }
        }
    }

    fn back_unary(
        &self,
        a: NodeId,
        gout: &[f64],
        scratch: &mut [Option<Vec<f64>>],
        f: impl Fn(f64, f64) -> f64,
    ) {
        if self.needs(a) {
            let contrib: Vec<f64> =
                self.nodes[a.0].data.iter().zip(gout).map(|(&x, &g)| f(x, g)).collect();
            accumulate_into(&mut scratch[a.0], contrib);
        }
    }

    /// Like back_unary but the derivative is a function of the output.
    fn back_unary_with_out(
        &self,
        i: usize,
        a: NodeId,
        gout: &[f64],
        scratch: &mut [Option<Vec<f64>>],
        f: impl Fn(f64, f64) -> f64,
    ) {
        if self.needs(a) {
            let contrib: Vec<f64> =
                self.nodes[i].data.iter().zip(gout).map(|(&y, &g)| f(y, g)).collect();
            accumulate_into(&mut scratch[a.0], contrib);
        }
    }

    fn back_binary(
        &self,
        a: NodeId,
        b: NodeId,
        gout: &[f64],
        scratch: &mut [Option<Vec<f64>>],
        fa: impl Fn(f64, f64, f64) -> f64,
        fb: impl Fn(f64, f64, f64) -> f64,
    ) {
        let (na, nb) = (a.0, b.0);
        let kind = {
            let (la, lb) = (&self.nodes[na], &self.nodes[nb]);
            pair_kind("backward", &la.shape, &lb.shape, la.data.len(), lb.data.len())
        };
        if self.needs(a) {
            let contrib = match kind {
                Pair::Same => {
                    let (ad, bd) = (&self.nodes[na].data, &self.nodes[nb].data);
                    ad.iter().zip(bd).zip(gout).map(|((&x, &y), &g)| fa(x, y, g)).collect()
                }
                Pair::LhsScalar => {
                    let x = self.nodes[na].data[0];
                    let bd = &self.nodes[nb].data;
                    vec![bd.iter().zip(gout).map(|(&y, &g)| fa(x, y, g)).sum()]
                }
                Pair::RhsScalar => {
                    let y = self.nodes[nb].data[0];
                    let ad = &self.nodes[na].data;
                    ad.iter().zip(gout).map(|(&x, &g)| fa(x, y, g)).collect()
                }
            };
            accumulate_into(&mut scratch[na], contrib);
        }
        if self.needs(b) {
            let contrib = match kind {
                Pair::Same => {
                    let (ad, bd) = (&self.nodes[na].data, &self.nodes[nb].data);
                    ad.iter().zip(bd).zip(gout).map(|((&x, &y), &g)| fb(x, y, g)).collect()
                }
                Pair::LhsScalar => {
                    let x = self.nodes[na].data[0];
                    let bd = &self.nodes[nb].data;
                    bd.iter().zip(gout).map(|(&y, &g)| fb(x, y, g)).collect()
                }
                Pair::RhsScalar => {
                    let y = self.nodes[nb].data[0];
                    let ad = &self.nodes[na].data;
                    vec![ad.iter().zip(gout).map(|(&x, &g)| fb(x, y, g)).sum()]
                }
            };
            accumulate_into(&mut scratch[nb], contrib);
        }
    }

    fn back_reduce(
        &self,
        a: NodeId,
        axis: Option<usize>,
        gout: &[f64],
        scratch: &mut [Option<Vec<f64>>],
        mean: bool,
    ) {
        if !self.needs(a) {
            return;
        }
        let shape = &self.nodes[a.0].shape;
        let numel = self.nodes[a.0].data.len();
        let contrib = match axis {
            None => {
                let g = if mean { gout[0] / numel as f64 } else { gout[0] };
                vec![g; numel]
            }
            Some(ax) => {
                let (outer, axis_n, inner) = axis_split(shape, ax);
                let scale = if mean { 1.0 / axis_n as f64 } else { 1.0 };
                let mut dx = vec![0.0; numel];
                for o in 0..outer {
                    let grow = &gout[o * inner..(o + 1) * inner];
                    for aa in 0..axis_n {
                        let base = (o * axis_n + aa) * inner;
                        let dst = &mut dx[base..base + inner];
                        for (d, &g) in dst.iter_mut().zip(grow) {
                            *d = g * scale;
                        }
                    }
                }
                dx
            }
        };
        accumulate_into(&mut scratch[a.0], contrib);
    }

    fn back_layernorm(
        &self,
        i: usize,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        gout: &[f64],
        scratch: &mut [Option<Vec<f64>>],
    ) {
        let d = *self.nodes[x.0].shape.last().unwrap();
        let rows = self.nodes[x.0].data.len() / d;
        let needs_x = self.needs(x);
        let needs_gain = self.needs(gain);
        let needs_bias = self.needs(bias);

        let mut dx = if needs_x { vec![0.0; rows * d] } else { Vec::new() };
        let mut dgain = if needs_gain { vec![0.0; d] } else { Vec::new() };
        let mut dbias = if needs_bias { vec![0.0; d] } else { Vec::new() };
        {
            let xd = &self.nodes[x.0].data;
            let gd = &self.nodes[gain.0].data;
            let saved = &self.nodes[i].saved;
            for r in 0..rows {
                let (mean, rstd) = (saved[r * 2], saved[r * 2 + 1]);
                let xrow = &xd[r * d..(r + 1) * d];
                let grow = &gout[r * d..(r + 1) * d];
                if needs_gain || needs_bias {
                    for j in 0..d {
                        let xh = (xrow[j] - mean) * rstd;
                        if needs_gain {
                            dgain[j] += grow[j] * xh;
                        }
                        if needs_bias {
                            dbias[j] += grow[j];
                        }
                    }
                }
                if needs_x {
                    // dyh = g * gain; dx = rstd*(dyh - mean(dyh) - xh*mean(dyh*xh))
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dyh = grow[j] * gd[j];
                        let xh = (xrow[j] - mean) * rstd;
                        m1 += dyh;
                        m2 += dyh * xh;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    let drow = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let dyh = grow[j] * gd[j];
                        let xh = (xrow[j] - mean) * rstd;
                        drow[j] = rstd * (dyh - m1 - xh * m2);
                    }
                }
            }
        }
        if needs_x {
            accumulate_into(&mut scratch[x.0], dx);
        }
        if needs_gain {
            accumulate_into(&mut scratch[gain.0], dgain);
        }
        if needs_bias {
            accumulate_into(&mut scratch[bias.0], dbias);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn back_attention(
        &self,
        i: usize,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq: usize,
        gout: &[f64],
        scratch: &mut [Option<Vec<f64>>],
    ) {
        let d = self.nodes[q.0].shape[1];
        let rows = self.nodes[q.0].shape[0];
        let images = rows / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let needs_q = self.needs(q);
        let needs_k = self.needs(k);
        let needs_v = self.needs(v);
        if !(needs_q || needs_k || needs_v) {
            return;
        }

        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        {
            let qd = &self.nodes[q.0].data;
            let kd = &self.nodes[k.0].data;
            let vd = &self.nodes[v.0].data;
            let attn_all = &self.nodes[i].saved;
            let mut qs = vec![0.0; seq * dh];
            let mut ks = vec![0.0; seq * dh];
            let mut vs = vec![0.0; seq * dh];
            let mut go = vec![0.0; seq * dh];
            let mut dattn = vec![0.0; seq * seq];
            for im in 0..images {
                for h in 0..heads {
                    copy_block(qd, &mut qs, im, h, seq, dh, d);
                    copy_block(kd, &mut ks, im, h, seq, dh, d);
                    copy_block(vd, &mut vs, im, h, seq, dh, d);
                    copy_block(gout, &mut go, im, h, seq, dh, d);
                    let attn =
                        &attn_all[(im * heads + h) * seq * seq..(im * heads + h + 1) * seq * seq];

                    // dAttn = gout · Vᵀ
                    dattn.iter_mut().for_each(|x| *x = 0.0);
                    mm_nt(&go, &vs, &mut dattn, seq, dh, seq);
                    // dV += attnᵀ · gout
                    if needs_v {
                        let mut dvs = vec![0.0; seq * dh];
                        mm_tn(attn, &go, &mut dvs, seq, seq, dh);
                        add_block(&mut dv, &dvs, im, h, seq, dh, d);
                    }
                    if needs_q || needs_k {
                        // dScores = attn ∘ (dAttn − rowdot(dAttn, attn)), then × scale
                        for s1 in 0..seq {
                            let arow = &attn[s1 * seq..(s1 + 1) * seq];
                            let drow = &mut dattn[s1 * seq..(s1 + 1) * seq];
                            let mut dot = 0.0;
                            for (aa, dd) in arow.iter().zip(drow.iter()) {
                                dot += aa * dd;
                            }
                            for (dd, aa) in drow.iter_mut().zip(arow) {
                                *dd = *aa * (*dd - dot) * scale;
                            }
                        }
                        if needs_q {
                            let mut dqs = vec![0.0; seq * dh];
                            mm_nn(&dattn, &ks, &mut dqs, seq, seq, dh);
                            add_block(&mut dq, &dqs, im, h, seq, dh, d);
                        }
                        if needs_k {
                            let mut dks = vec![0.0; seq * dh];
                            mm_tn(&dattn, &qs, &mut dks, seq, seq, dh);
                            add_block(&mut dk, &dks, im, h, seq, dh, d);
                        }
                    }
                }
            }
        }
        if needs_q {
            accumulate_into(&mut scratch[q.0], dq);
        }
        if needs_k {
            accumulate_into(&mut scratch[k.0], dk);
        }
        if needs_v {
            accumulate_into(&mut scratch[v.0], dv);
        }
    }
}

/// Add a gradient contribution into a slot, allocating on first touch.
fn accumulate_into(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(g) => {
            debug_assert_eq!(g.len(), contrib.len());
            for (gv, c) in g.iter_mut().zip(contrib) {
                *gv += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

/// Copy the [seq, dh] block of head `h` in image `im` into contiguous scratch.
fn copy_block(src: &[f64], dst: &mut [f64], im: usize, h: usize, seq: usize, dh: usize, d: usize) {
    for s in 0..seq {
        let base = (im * seq + s) * d + h * dh;
        dst[s * dh..(s + 1) * dh].copy_from_slice(&src[base..base + dh]);
    }
}

fn add_block(dst: &mut [f64], src: &[f64], im: usize, h: usize, seq: usize, dh: usize, d: usize) {
    for s in 0..seq {
        let base = (im * seq + s) * d + h * dh;
        for (o, &x) in dst[base..base + dh].iter_mut().zip(&src[s * dh..(s + 1) * dh]) {
            *o += x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn rand_tensor(shape: &[usize], rng: &mut Stream, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect())
    }

    const TOL: f64 = 1e-4;
    const EPS: f64 = 1e-5;

    #[test]
    fn grad_check_sum_of_squares_is_tight() {
        // f = sum(x^2): analytic and numeric agree far below the op tolerance.
        let mut rng = Stream::new(1);
        let x = rand_tensor(&[3, 4], &mut rng, -2.0, 2.0);
        let err = grad_check(
            |g, x| {
                let s = g.square(x);
                g.sum(s, None)
            },
            &x,
            EPS,
        );
        assert!(err < 1e-8, "sum of squares rel err {err}");
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        for seed in [2, 3, 4] {
            let mut rng = Stream::new(seed);
            let a = rand_tensor(&[3, 5], &mut rng, -1.0, 1.0);
            let b = rand_tensor(&[5, 2], &mut rng, -1.0, 1.0);
            let err = grad_check_multi(
                |g, ins| {
                    let c = g.matmul(ins[0], ins[1]);
                    let s = g.square(c);
                    g.sum(s, None)
                },
                &[a, b],
                EPS,
            );
            assert!(err < TOL, "seed {seed}: matmul rel err {err}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let r = std::panic::catch_unwind(|| {
            let mut g = Graph::new(LogMode::Strict);
            let a = g.leaf(&Tensor::zeros(&[2, 3]), false);
            let b = g.leaf(&Tensor::zeros(&[4, 5]), false);
            g.matmul(a, b);
        });
        let msg = *r.unwrap_err().downcast::<String>().unwrap();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "message was: {msg}");
    }

    #[test]
    fn elementwise_and_scalar_broadcast_grads() {
        for seed in [5, 6, 7] {
            let mut rng = Stream::new(seed);
            let a = rand_tensor(&[4, 3], &mut rng, 0.3, 2.0);
            let b = rand_tensor(&[4, 3], &mut rng, 0.3, 2.0);
            let s = Tensor::scalar(rng.uniform(0.5, 1.5));
            let err = grad_check_multi(
                |g, ins| {
                    let sum = g.add(ins[0], ins[1]);
                    let diff = g.sub(ins[0], ins[1]);
                    let prod = g.mul(sum, diff);
                    let scaled = g.mul(ins[2], prod); // scalar ⊗ tensor
                    let shifted = g.add(scaled, ins[2]); // tensor ⊕ scalar
                    let ratio = g.div(shifted, ins[1]);
                    let e = g.exp(ratio);
                    let l = g.log(e);
                    let q = g.square(l);
                    let n = g.neg(q);
                    let m = g.mean(n, None);
                    g.add_const(m, 1.0)
                },
                &[a, b, s],
                EPS,
            );
            assert!(err < TOL, "seed {seed}: elementwise rel err {err}");
        }
    }

    #[test]
    fn mismatched_nonscalar_shapes_are_rejected() {
        let r = std::panic::catch_unwind(|| {
            let mut g = Graph::new(LogMode::Strict);
            let a = g.leaf(&Tensor::zeros(&[2, 3]), false);
            let b = g.leaf(&Tensor::zeros(&[3, 2]), false);
            g.add(a, b);
        });
        let msg = *r.unwrap_err().downcast::<String>().unwrap();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "message was: {msg}");
    }

    #[test]
    fn log_strict_panics_with_offending_index() {
        let r = std::panic::catch_unwind(|| {
            let mut g = Graph::new(LogMode::Strict);
            let a = g.leaf(&Tensor::from_vec(&[3], vec![1.0, -0.5, 2.0]), false);
            g.log(a);
        });
        let msg = *r.unwrap_err().downcast::<String>().unwrap();
        assert!(msg.contains("index 1"), "message was: {msg}");
    }

    #[test]
    fn log_clamp_mode_clamps_instead_of_failing() {
        let mut g = Graph::new(LogMode::Clamp);
        let a = g.leaf(&Tensor::from_vec(&[2], vec![0.0, -3.0]), false);
        let l = g.log(a);
        let want = LOG_CLAMP.ln();
        assert_eq!(g.data(l), &[want, want]);
    }

    #[test]
    fn reductions_with_axis_and_mean_backward_scale() {
        for seed in [8, 9, 10] {
            let mut rng = Stream::new(seed);
            let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
            for axis in [None, Some(0), Some(1)] {
                let err = grad_check(
                    |g, x| {
                        let r = g.sum(x, axis);
                        let r = g.square(r);
                        let m = g.mean(r, None);
                        let r2 = g.mean(x, axis);
                        let r2 = g.sum(r2, None);
                        g.add(m, r2)
                    },
                    &a,
                    EPS,
                );
                assert!(err < TOL, "seed {seed} axis {axis:?}: rel err {err}");
            }
        }
        // mean backward distributes exactly 1/count
        let mut g = Graph::new(LogMode::Strict);
        let x = g.leaf(&Tensor::zeros(&[2, 5]), true);
        let m = g.mean(x, None);
        g.backward(m);
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn sum_axis_values_match_direct_loop() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut g = Graph::new(LogMode::Strict);
        let x = g.constant(&t);
        let s0 = g.sum(x, Some(0));
        let s1 = g.sum(x, Some(1));
        assert_eq!(g.data(s0), &[5.0, 7.0, 9.0]);
        assert_eq!(g.data(s1), &[6.0, 15.0]);
        assert_eq!(g.shape(s0), &[3]);
        assert_eq!(g.shape(s1), &[2]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes_and_grads_check() {
        let mut g = Graph::new(LogMode::Strict);
        let a = g.leaf(&Tensor::from_vec(&[3], vec![-745.0, 0.0, 745.0]), false);
        let s = g.sigmoid(a);
        let d = g.data(s);
        assert!(d[0] >= 0.0 && d[0] < 1e-300);
        assert_eq!(d[1], 0.5);
        assert_eq!(d[2], 1.0);

        for seed in [11, 12, 13] {
            let mut rng = Stream::new(seed);
            let x = rand_tensor(&[2, 6], &mut rng, -4.0, 4.0);
            let err = grad_check(
                |g, x| {
                    let s = g.sigmoid(x);
                    g.sum(s, None)
                },
                &x,
                EPS,
            );
            assert!(err < TOL, "seed {seed}: sigmoid rel err {err}");
        }
    }

    #[test]
    fn gelu_grads_check() {
        for seed in [14, 15, 16] {
            let mut rng = Stream::new(seed);
            let x = rand_tensor(&[3, 5], &mut rng, -3.0, 3.0);
            let err = grad_check(
                |g, x| {
                    let s = g.gelu(x);
                    let s = g.square(s);
                    g.sum(s, None)
                },
                &x,
                EPS,
            );
            assert!(err < TOL, "seed {seed}: gelu rel err {err}");
        }
    }

    #[test]
    fn softmax_rows_are_stochastic_and_grads_check() {
        let mut rng = Stream::new(17);
        let x = rand_tensor(&[4, 7], &mut rng, -30.0, 30.0);
        let mut g = Graph::new(LogMode::Strict);
        let a = g.constant(&x);
        let s = g.softmax(a, 1);
        for r in 0..4 {
            let row_sum: f64 = g.data(s)[r * 7..(r + 1) * 7].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-6, "row {r} sums to {row_sum}");
            assert!(g.data(s)[r * 7..(r + 1) * 7].iter().all(|&p| p >= 0.0));
        }
        for seed in [18, 19, 20] {
            let mut rng = Stream::new(seed);
            let x = rand_tensor(&[3, 5], &mut rng, -2.0, 2.0);
            for axis in [0, 1] {
                let err = grad_check(
                    |g, x| {
                        let s = g.softmax(x, axis);
                        let s = g.square(s);
                        g.sum(s, None)
                    },
                    &x,
                    EPS,
                );
                assert!(err < TOL, "seed {seed} axis {axis}: softmax rel err {err}");
            }
        }
    }

    #[test]
    fn layernorm_matches_direct_formula_and_grads_check() {
        // Row [1,2,3] with unit gain, zero bias: mean 2, population var 2/3.
        let eps = 1e-6;
        let mut g = Graph::new(LogMode::Strict);
        let x = g.leaf(&Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]), false);
        let gain = g.leaf(&Tensor::from_vec(&[3], vec![1.0; 3]), false);
        let bias = g.leaf(&Tensor::from_vec(&[3], vec![0.0; 3]), false);
        let y = g.layernorm(x, gain, bias, eps);
        let rstd = 1.0 / (2.0 / 3.0 + eps).sqrt();
        let want = [-rstd, 0.0, rstd];
        for (got, want) in g.data(y).iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "layernorm value {got} != {want}");
        }
        assert!((g.data(y)[2] - 1.2247).abs() < 1e-4);

        for seed in [21, 22, 23] {
            let mut rng = Stream::new(seed);
            let x = rand_tensor(&[4, 6], &mut rng, -2.0, 2.0);
            let gain = rand_tensor(&[6], &mut rng, 0.5, 1.5);
            let bias = rand_tensor(&[6], &mut rng, -0.5, 0.5);
            let err = grad_check_multi(
                |g, ins| {
                    let y = g.layernorm(ins[0], ins[1], ins[2], 1e-6);
                    let y = g.square(y);
                    g.sum(y, None)
                },
                &[x, gain, bias],
                EPS,
            );
            assert!(err < TOL, "seed {seed}: layernorm rel err {err}");
        }
    }

    #[test]
    fn constant_rows_layernorm_to_bias() {
        let mut g = Graph::new(LogMode::Strict);
        let x = g.leaf(&Tensor::from_vec(&[1, 4], vec![5.0; 4]), false);
        let gain = g.leaf(&Tensor::from_vec(&[4], vec![1.0; 4]), false);
        let bias = g.leaf(&Tensor::from_vec(&[4], vec![0.25; 4]), false);
        let y = g.layernorm(x, gain, bias, 1e-6);
        for &v in g.data(y) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_ops_roundtrip_and_grads_check() {
        for seed in [24, 25, 26] {
            let mut rng = Stream::new(seed);
            let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
            let b = rand_tensor(&[2, 4], &mut rng, -1.0, 1.0);
            let err = grad_check_multi(
                |g, ins| {
                    let t = g.transpose(ins[0]);
                    let t = g.transpose(t); // back to [3,4]
                    let cat = g.concat_rows(&[t, ins[1]]); // [5,4]
                    let picked = g.slice_rows(cat, &[4, 0, 2, 0]); // repeats row 0
                    let r = g.reshape(picked, &[2, 8]);
                    let r = g.square(r);
                    g.sum(r, None)
                },
                &[a, b],
                EPS,
            );
            assert!(err < TOL, "seed {seed}: shape ops rel err {err}");
        }
    }

    #[test]
    fn slice_rows_backward_zeroes_untouched_rows() {
        let mut g = Graph::new(LogMode::Strict);
        let x = g.leaf(&Tensor::from_vec(&[3, 2], vec![1.0; 6]), true);
        let s = g.slice_rows(x, &[2]);
        let t = g.sum(s, None);
        g.backward(t);
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn scale_patch_rows_keeps_cls_and_grads_check() {
        // 2 images, seq 3 (1 cls + 2 patches), width 2
        let mut g = Graph::new(LogMode::Strict);
        let x = g.leaf(&Tensor::from_vec(&[6, 2], (1..=12).map(f64::from).collect()), false);
        let z = g.leaf(&Tensor::from_vec(&[2, 2], vec![0.5, 0.0, 1.0, 2.0]), false);
        let y = g.scale_patch_rows(x, z, 3);
        let d = g.data(y);
        assert_eq!(&d[0..2], &[1.0, 2.0]); // image 0 cls untouched
        assert_eq!(&d[2..4], &[1.5, 2.0]); // ×0.5
        assert_eq!(&d[4..6], &[0.0, 0.0]); // ×0
        assert_eq!(&d[6..8], &[7.0, 8.0]); // image 1 cls untouched
        assert_eq!(&d[10..12], &[22.0, 24.0]); // ×2

        for seed in [27, 28, 29] {
            let mut rng = Stream::new(seed);
            let x = rand_tensor(&[6, 4], &mut rng, -1.0, 1.0);
            let z = rand_tensor(&[2, 2], &mut rng, 0.0, 1.0);
            let err = grad_check_multi(
                |g, ins| {
                    let y = g.scale_patch_rows(ins[0], ins[1], 3);
                    let y = g.square(y);
                    g.sum(y, None)
                },
                &[x, z],
                EPS,
            );
            assert!(err < TOL, "seed {seed}: scale_patch_rows rel err {err}");
        }
    }

    #[test]
    fn attention_weights_are_row_stochastic_and_grads_check() {
        let mut rng = Stream::new(30);
        let q = rand_tensor(&[6, 4], &mut rng, -1.0, 1.0); // 2 images × seq 3, 2 heads × dh 2
        let k = rand_tensor(&[6, 4], &mut rng, -1.0, 1.0);
        let v = rand_tensor(&[6, 4], &mut rng, -1.0, 1.0);
        let mut g = Graph::new(LogMode::Strict);
        let (qi, ki, vi) = (g.constant(&q), g.constant(&k), g.constant(&v));
        let o = g.attention(qi, ki, vi, 2, 3);
        let saved = g.saved(o); // 2 images × 2 heads × 3×3
        assert_eq!(saved.len(), 2 * 2 * 3 * 3);
        for row in saved.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "attention row sums to {s}");
        }

        for seed in [31, 32, 33] {
            let mut rng = Stream::new(seed);
            let q = rand_tensor(&[6, 4], &mut rng, -1.0, 1.0);
            let k = rand_tensor(&[6, 4], &mut rng, -1.0, 1.0);
            let v = rand_tensor(&[6, 4], &mut rng, -1.0, 1.0);
            let err = grad_check_multi(
                |g, ins| {
                    let o = g.attention(ins[0], ins[1], ins[2], 2, 3);
                    let o = g.square(o);
                    g.sum(o, None)
                },
                &[q, k, v],
                EPS,
            );
            assert!(err < TOL, "seed {seed}: attention rel err {err}");
        }
    }

    #[test]
    fn attention_scale_is_rsqrt_of_head_width() {
        // One image, seq 2, one head, dh 4. With q=k=e1-scaled rows the score
        // gap between matching and non-matching keys is s/sqrt(4)=s/2.
        let s = 3.0;
        let q = Tensor::from_vec(&[2, 4], vec![s, 0.0, 0.0, 0.0, 0.0, s, 0.0, 0.0]);
        let k = q.clone();
        let v = Tensor::from_vec(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let mut g = Graph::new(LogMode::Strict);
        let (qi, ki, vi) = (g.constant(&q), g.constant(&k), g.constant(&v));
        let o = g.attention(qi, ki, vi, 1, 2);
        let w = g.saved(o);
        // score(match) = s²/2, score(other) = 0 → weight = σ(s²/2) on the diagonal
        let expect = 1.0 / (1.0 + (-s * s / 2.0).exp());
        assert!((w[0] - expect).abs() < 1e-12, "got {} want {expect}", w[0]);
    }

    #[test]
    fn clamp_min_passes_gradient_only_above_floor() {
        let mut g = Graph::new(LogMode::Strict);
        let x = g.leaf(&Tensor::from_vec(&[3], vec![-1.0, 0.5, 2.0]), true);
        let c = g.clamp_min(x, 0.0);
        let s = g.sum(c, None);
        g.backward(s);
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_on_repeat() {
        let mut g = Graph::new(LogMode::Strict);
        let x = g.leaf(&Tensor::from_vec(&[2], vec![3.0, -1.0]), true);
        let s = g.square(x);
        let t = g.sum(s, None);
        g.backward(t);
        let first: Vec<f64> = g.grad(x).unwrap().to_vec();
        assert_eq!(first, vec![6.0, -2.0]);
        g.backward(t);
        let second: Vec<f64> = g.grad(x).unwrap().to_vec();
        assert_eq!(second, vec![12.0, -4.0], "repeated backward must double the gradient");
    }

    #[test]
    fn diamond_reuse_sums_both_paths() {
        // y = x·x + x → dy/dx = 2x + 1, with x feeding two consumers.
        let mut g = Graph::new(LogMode::Strict);
        let x = g.leaf(&Tensor::scalar(4.0), true);
        let sq = g.mul(x, x);
        let y = g.add(sq, x);
        g.backward(y);
        assert_eq!(g.grad(x).unwrap(), &[9.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let r = std::panic::catch_unwind(|| {
            let mut g = Graph::new(LogMode::Strict);
            let x = g.leaf(&Tensor::zeros(&[2, 2]), true);
            let y = g.square(x);
            g.backward(y);
        });
        let msg = *r.unwrap_err().downcast::<String>().unwrap();
        assert!(msg.contains("[2, 2]"), "message was: {msg}");
    }

    #[test]
    fn gradients_do_not_flow_into_frozen_leaves() {
        let mut g = Graph::new(LogMode::Strict);
        let a = g.leaf(&Tensor::from_vec(&[2, 2], vec![1.0; 4]), true);
        let b = g.leaf(&Tensor::from_vec(&[2, 2], vec![2.0; 4]), false);
        let c = g.matmul(a, b);
        let s = g.sum(c, None);
        g.backward(s);
        assert!(g.grad(a).is_some());
        assert!(g.grad(b).is_none(), "frozen leaf must not accumulate a gradient");
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let mut rng = Stream::new(99);
        let a = rand_tensor(&[16, 24], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[24, 8], &mut rng, -1.0, 1.0);
        let run = || {
            let mut g = Graph::new(LogMode::Strict);
            let (ai, bi) = (g.constant(&a), g.constant(&b));
            let c = g.matmul(ai, bi);
            let s = g.softmax(c, 1);
            let m = g.mean(s, None);
            g.value(m).to_bits()
        };
        assert_eq!(run(), run());
    }
}
