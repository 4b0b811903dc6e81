//! ViT building blocks shared by the autoencoder and the masking module.

use crate::rng::Stream;
use crate::tensor::{Graph, NodeId, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// Image and network extents for one model family.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub p: usize,
    pub d: usize,
    pub heads: usize,
    pub enc_depth: usize,
    pub dec_width: usize,
    pub dec_heads: usize,
    pub dec_depth: usize,
    pub cmm_depth: usize,
    pub mlp_ratio: usize,
}

impl Geometry {
    /// Desk-scale defaults: 32x32x3 images, 8-pixel patches, width 64.
    pub fn toy() -> Self {
        Geometry {
            h: 32,
            w: 32,
            c: 3,
            p: 8,
            d: 64,
            heads: 4,
            enc_depth: 4,
            dec_width: 32,
            dec_heads: 4,
            dec_depth: 2,
            cmm_depth: 5,
            mlp_ratio: 4,
        }
    }

    pub fn grid_h(&self) -> usize {
        self.h / self.p
    }

    pub fn grid_w(&self) -> usize {
        self.w / self.p
    }

    pub fn n_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_dim(&self) -> usize {
        self.p * self.p * self.c
    }

    /// Token rows per image: CLS plus one per patch.
    pub fn seq(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn validate(&self) -> Result<(), String> {
        let pos = [
            ("h", self.h),
            ("w", self.w),
            ("c", self.c),
            ("p", self.p),
            ("d", self.d),
            ("heads", self.heads),
            ("enc_depth", self.enc_depth),
            ("dec_width", self.dec_width),
            ("dec_heads", self.dec_heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.h % self.p != 0 || self.w % self.p != 0 {
            return Err(format!(
                "image {}x{} not divisible by patch size {}",
                self.h, self.w, self.p
            ));
        }
        if self.d % self.heads != 0 {
            return Err(format!("width {} not divisible by {} heads", self.d, self.heads));
        }
        if self.dec_width % self.dec_heads != 0 {
            return Err(format!(
                "decoder width {} not divisible by {} heads",
                self.dec_width, self.dec_heads
            ));
        }
        // The positional table splits each width into sin/cos quarters per axis.
        if self.d % 4 != 0 || self.dec_width % 4 != 0 {
            return Err(format!(
                "widths must be divisible by 4, got {} and {}",
                self.d, self.dec_width
            ));
        }
        Ok(())
    }
}

/// Flatten an h*w*c image into raster-ordered patch rows of length p*p*c.
pub fn patchify(px: &[f64], g: &Geometry) -> Tensor {
    assert_eq!(
        px.len(),
        g.h * g.w * g.c,
        "pixel count {} does not match {}x{}x{}",
        px.len(),
        g.h,
        g.w,
        g.c
    );
    assert!(
        g.h % g.p == 0 && g.w % g.p == 0,
        "image {}x{} not divisible by patch size {}",
        g.h,
        g.w,
        g.p
    );
    let (p, c, w) = (g.p, g.c, g.w);
    let n = g.n_patches();
    let mut out = Vec::with_capacity(n * g.patch_dim());
    for gy in 0..g.grid_h() {
        for gx in 0..g.grid_w() {
            for py in 0..p {
                let row = gy * p + py;
                let start = (row * w + gx * p) * c;
                out.extend_from_slice(&px[start..start + p * c]);
            }
        }
    }
    Tensor::from_vec(&[n, g.patch_dim()], out)
}

pub fn unpatchify(grid: &Tensor, g: &Geometry) -> Vec<f64> {
    assert_eq!(
        grid.shape,
        [g.n_patches(), g.patch_dim()],
        "patch grid shape {:?} does not match geometry",
        grid.shape
    );
    let (p, c, w) = (g.p, g.c, g.w);
    let mut px = vec![0.0; g.h * g.w * g.c];
    for gy in 0..g.grid_h() {
        for gx in 0..g.grid_w() {
            let patch = gy * g.grid_w() + gx;
            for py in 0..p {
                let row = gy * p + py;
                let dst = (row * w + gx * p) * c;
                let src = patch * g.patch_dim() + py * p * c;
                px[dst..dst + p * c].copy_from_slice(&grid.data[src..src + p * c]);
            }
        }
    }
    px
}

/// Fixed 2-D sinusoidal positional table, one half of the width per grid
/// axis, each half split into sin and cos quarters. Row 0 (CLS) is zero.
pub fn sincos_pos_table(grid_h: usize, grid_w: usize, width: usize) -> Tensor {
    assert!(width % 4 == 0, "positional width {width} not divisible by 4");
    let quarter = width / 4;
    let mut t = Tensor::zeros(&[grid_h * grid_w + 1, width]);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let base = (1 + gy * grid_w + gx) * width;
            for k in 0..quarter {
                let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                let (ay, ax) = (gy as f64 * omega, gx as f64 * omega);
                t.data[base + k] = ay.sin();
                t.data[base + quarter + k] = ay.cos();
                t.data[base + 2 * quarter + k] = ax.sin();
                t.data[base + 3 * quarter + k] = ax.cos();
            }
        }
    }
    t
}

/// One learnable tensor with its gradient accumulator and optimizer moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.numel();
        Param { name: name.into(), value, grad: vec![0.0; n], m: vec![0.0; n], v: vec![0.0; n] }
    }
}

fn uniform_fan_in(name: &str, shape: &[usize], fan_in: usize, rng: &mut Stream) -> Param {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Param::new(name, Tensor::from_vec(shape, data))
}

pub(crate) fn token_init(name: &str, width: usize, rng: &mut Stream) -> Param {
    let data: Vec<f64> = (0..width).map(|_| rng.normal(0.0, 0.02)).collect();
    Param::new(name, Tensor::from_vec(&[1, width], data))
}

#[derive(Debug, Clone)]
pub struct LinearP {
    pub w: Param,
    pub b: Param,
}

impl LinearP {
    pub fn init(name: &str, fan_in: usize, fan_out: usize, rng: &mut Stream) -> Self {
        LinearP {
            w: uniform_fan_in(&format!("{name}.w"), &[fan_in, fan_out], fan_in, rng),
            b: Param::new(format!("{name}.b"), Tensor::zeros(&[1, fan_out])),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LnP {
    pub g: Param,
    pub b: Param,
}

impl LnP {
    pub fn init(name: &str, d: usize) -> Self {
        LnP {
            g: Param::new(format!("{name}.g"), Tensor::from_vec(&[d], vec![1.0; d])),
            b: Param::new(format!("{name}.b"), Tensor::zeros(&[d])),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockP {
    pub ln1: LnP,
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
    pub o: LinearP,
    pub ln2: LnP,
    pub mlp1: LinearP,
    pub mlp2: LinearP,
}

impl BlockP {
    pub fn init(name: &str, d: usize, mlp_ratio: usize, rng: &mut Stream) -> Self {
        BlockP {
            ln1: LnP::init(&format!("{name}.ln1"), d),
            q: LinearP::init(&format!("{name}.q"), d, d, rng),
            k: LinearP::init(&format!("{name}.k"), d, d, rng),
            v: LinearP::init(&format!("{name}.v"), d, d, rng),
            o: LinearP::init(&format!("{name}.o"), d, d, rng),
            ln2: LnP::init(&format!("{name}.ln2"), d),
            mlp1: LinearP::init(&format!("{name}.mlp1"), d, d * mlp_ratio, rng),
            mlp2: LinearP::init(&format!("{name}.mlp2"), d * mlp_ratio, d, rng),
        }
    }

    pub(crate) fn push_params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.extend([&self.ln1.g, &self.ln1.b]);
        for l in [&self.q, &self.k, &self.v, &self.o] {
            out.extend([&l.w, &l.b]);
        }
        out.extend([&self.ln2.g, &self.ln2.b]);
        out.extend([&self.mlp1.w, &self.mlp1.b, &self.mlp2.w, &self.mlp2.b]);
    }

    pub(crate) fn push_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.extend([&mut self.ln1.g, &mut self.ln1.b]);
        out.extend([&mut self.q.w, &mut self.q.b, &mut self.k.w, &mut self.k.b]);
        out.extend([&mut self.v.w, &mut self.v.b, &mut self.o.w, &mut self.o.b]);
        out.extend([&mut self.ln2.g, &mut self.ln2.b]);
        out.extend([&mut self.mlp1.w, &mut self.mlp1.b, &mut self.mlp2.w, &mut self.mlp2.b]);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct LnIds {
    pub g: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub ln1: LnIds,
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub ln2: LnIds,
    pub mlp1: LinearIds,
    pub mlp2: LinearIds,
}

/// Inserts parameter structs into a graph as leaves, collecting the node ids
/// in the same order `params()` lists the parameters.
pub struct Inserter<'g> {
    pub g: &'g mut Graph,
    pub trainable: bool,
    pub flat: Vec<NodeId>,
}

impl<'g> Inserter<'g> {
    pub fn new(g: &'g mut Graph, trainable: bool) -> Self {
        Inserter { g, trainable, flat: Vec::new() }
    }

    pub fn param(&mut self, p: &Param) -> NodeId {
        let id = self.g.leaf(&p.value, self.trainable);
        self.flat.push(id);
        id
    }

    pub fn linear(&mut self, l: &LinearP) -> LinearIds {
        LinearIds { w: self.param(&l.w), b: self.param(&l.b) }
    }

    pub fn ln(&mut self, l: &LnP) -> LnIds {
        LnIds { g: self.param(&l.g), b: self.param(&l.b) }
    }

    pub fn block(&mut self, b: &BlockP) -> BlockIds {
        BlockIds {
            ln1: self.ln(&b.ln1),
            q: self.linear(&b.q),
            k: self.linear(&b.k),
            v: self.linear(&b.v),
            o: self.linear(&b.o),
            ln2: self.ln(&b.ln2),
            mlp1: self.linear(&b.mlp1),
            mlp2: self.linear(&b.mlp2),
        }
    }
}

/// x·W + b, the bias row repeated across output rows.
pub fn linear(g: &mut Graph, ids: LinearIds, x: NodeId) -> NodeId {
    let xw = g.matmul(x, ids.w);
    let rows = g.shape(xw)[0];
    let b = g.slice_rows(ids.b, &vec![0; rows]);
    g.add(xw, b)
}

/// Multi-head self-attention with output projection, over per-image windows
/// of `seq` rows.
pub fn mha(g: &mut Graph, ids: &BlockIds, x: NodeId, heads: usize, seq: usize) -> NodeId {
    let q = linear(g, ids.q, x);
    let k = linear(g, ids.k, x);
    let v = linear(g, ids.v, x);
    let a = g.attention(q, k, v, heads, seq);
    linear(g, ids.o, a)
}

/// Pre-norm transformer block: x + MHA(LN(x)), then + MLP(LN(.)).
pub fn vit_block(g: &mut Graph, ids: &BlockIds, x: NodeId, heads: usize, seq: usize) -> NodeId {
    let h1 = g.layernorm(x, ids.ln1.g, ids.ln1.b, LN_EPS);
    let att = mha(g, ids, h1, heads, seq);
    let x1 = g.add(x, att);
    let h2 = g.layernorm(x1, ids.ln2.g, ids.ln2.b, LN_EPS);
    let m1 = linear(g, ids.mlp1, h2);
    let m1a = g.gelu(m1);
    let m2 = linear(g, ids.mlp2, m1a);
    g.add(x1, m2)
}

/// Project patch rows, prepend the CLS token per image, add positions.
///
/// `grids` stacks the per-image patch matrices into [images*n, p*p*c]; the
/// output interleaves to [images*(n+1), d] with the shared CLS row first in
/// each image window.
pub fn embed_tokens(
    g: &mut Graph,
    grids: &Tensor,
    proj: LinearIds,
    cls: NodeId,
    pos: &Tensor,
    images: usize,
) -> NodeId {
    let n = grids.shape[0] / images;
    let width = g.shape(cls)[1];
    assert_eq!(
        pos.shape,
        [n + 1, width],
        "positional table {:?} does not match n={n}, width={width}",
        pos.shape
    );
    let x = g.constant(grids);
    let projected = linear(g, proj, x);
    let cat = g.concat_rows(&[cls, projected]);
    let mut map = Vec::with_capacity(images * (n + 1));
    for im in 0..images {
        map.push(0);
        for j in 0..n {
            map.push(1 + im * n + j);
        }
    }
    let tok = g.slice_rows(cat, &map);
    let mut tiled = Vec::with_capacity(images * pos.data.len());
    for _ in 0..images {
        tiled.extend_from_slice(&pos.data);
    }
    let pos_node = g.constant(&Tensor::from_vec(&[images * (n + 1), width], tiled));
    g.add(tok, pos_node)
}

/// Add harvested leaf gradients into the parameter accumulators, scaled.
/// `flat` must come from the `Inserter` that registered `params`.
pub fn absorb_grads(g: &Graph, flat: &[NodeId], params: &mut [&mut Param], scale: f64) {
    assert_eq!(flat.len(), params.len(), "leaf list and parameter list diverge");
    for (p, &id) in params.iter_mut().zip(flat) {
        if let Some(gr) = g.grad(id) {
            for (acc, &v) in p.grad.iter_mut().zip(gr) {
                *acc += scale * v;
            }
        }
    }
}

/// Block stack followed by the final layer norm.
pub fn encoder_stack(
    g: &mut Graph,
    blocks: &[BlockIds],
    norm: LnIds,
    mut x: NodeId,
    heads: usize,
    seq: usize,
) -> NodeId {
    for ids in blocks {
        x = vit_block(g, ids, x, heads, seq);
    }
    g.layernorm(x, norm.g, norm.b, LN_EPS)
}
