//! Learnable masking module: per-patch keep probabilities and mask plumbing.

use crate::nn::{
    embed_tokens, linear, token_init, vit_block, BlockIds, BlockP, Geometry, Inserter, LinearIds,
    LinearP, Param,
};
use crate::rng::Stream;
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum MaskError {
    #[error("mask leaves no patch visible")]
    NoVisible,
    #[error("mask leaves no patch to reconstruct")]
    NoMasked,
}

/// Masking-module parameters: own patch projection and CLS token, a block
/// stack, and a two-stage head reading the CLS output into n probabilities.
#[derive(Debug, Clone)]
pub struct CmmP {
    pub embed: LinearP,
    pub cls: Param,
    pub blocks: Vec<BlockP>,
    pub head1: LinearP,
    pub head2: LinearP,
}

#[derive(Debug, Clone)]
pub struct CmmIds {
    pub embed: LinearIds,
    pub cls: NodeId,
    pub blocks: Vec<BlockIds>,
    pub head1: LinearIds,
    pub head2: LinearIds,
}

impl CmmP {
    pub fn init(geom: &Geometry, rng: &mut Stream) -> Self {
        CmmP {
            embed: LinearP::init("cmm.embed", geom.patch_dim(), geom.d, rng),
            cls: token_init("cmm.cls", geom.d, rng),
            blocks: (0..geom.cmm_depth)
                .map(|i| BlockP::init(&format!("cmm.blocks.{i}"), geom.d, geom.mlp_ratio, rng))
                .collect(),
            head1: LinearP::init("cmm.head1", geom.d, geom.d, rng),
            head2: LinearP::init("cmm.head2", geom.d, geom.n_patches(), rng),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.embed.w, &self.embed.b, &self.cls];
        for b in &self.blocks {
            b.push_params(&mut out);
        }
        out.extend([&self.head1.w, &self.head1.b, &self.head2.w, &self.head2.b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.embed.w, &mut self.embed.b, &mut self.cls];
        for b in &mut self.blocks {
            b.push_params_mut(&mut out);
        }
        out.extend([&mut self.head1.w, &mut self.head1.b, &mut self.head2.w, &mut self.head2.b]);
        out
    }

    /// Leaf order matches `params()`, so harvested gradients line up.
    pub fn insert(&self, ins: &mut Inserter) -> CmmIds {
        CmmIds {
            embed: ins.linear(&self.embed),
            cls: ins.param(&self.cls),
            blocks: self.blocks.iter().map(|b| ins.block(b)).collect(),
            head1: ins.linear(&self.head1),
            head2: ins.linear(&self.head2),
        }
    }
}

/// Keep probabilities for a stack of images: [images, n], each in (0, 1).
pub fn cmm_forward(
    g: &mut Graph,
    ids: &CmmIds,
    grids: &Tensor,
    pos: &Tensor,
    geom: &Geometry,
    images: usize,
) -> NodeId {
    let seq = geom.seq();
    let mut x = embed_tokens(g, grids, ids.embed, ids.cls, pos, images);
    for b in &ids.blocks {
        x = vit_block(g, b, x, geom.heads, seq);
    }
    let cls_rows: Vec<usize> = (0..images).map(|im| im * seq).collect();
    let cout = g.slice_rows(x, &cls_rows);
    let h = linear(g, ids.head1, cout);
    let h = g.gelu(h);
    let h = linear(g, ids.head2, h);
    g.sigmoid(h)
}

/// Binary mask from keep probabilities; 1 = visible, ties at 0.5 visible.
pub fn threshold(z: &[f64]) -> Vec<u8> {
    z.iter().map(|&v| u8::from(v >= 0.5)).collect()
}

/// Token row indices selecting the CLS row plus every visible patch, in
/// original order. The patch at index i sits at token row i+1.
pub fn visible_rows(mask: &[u8]) -> Result<Vec<usize>, MaskError> {
    let mut rows = vec![0];
    rows.extend(mask.iter().enumerate().filter(|(_, &m)| m == 1).map(|(i, _)| i + 1));
    if rows.len() == 1 {
        return Err(MaskError::NoVisible);
    }
    Ok(rows)
}

/// Scale each patch row by its keep probability, leaving CLS rows intact.
pub fn apply_soft_mask(g: &mut Graph, tokens: NodeId, z: NodeId, seq: usize) -> NodeId {
    g.scale_patch_rows(tokens, z, seq)
}

/// Binary PGM (P5) of a patch mask upscaled to pixel resolution;
/// 0 = masked, 255 = visible.
pub fn mask_to_pgm(mask: &[u8], geom: &Geometry) -> Vec<u8> {
    assert_eq!(
        mask.len(),
        geom.n_patches(),
        "mask length {} does not match {} patches",
        mask.len(),
        geom.n_patches()
    );
    let mut out = format!("P5\n{} {}\n255\n", geom.w, geom.h).into_bytes();
    for row in 0..geom.h {
        for col in 0..geom.w {
            let patch = (row / geom.p) * geom.grid_w() + col / geom.p;
            out.push(if mask[patch] == 1 { 255 } else { 0 });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_multi, LogMode};

    fn tiny_geom() -> Geometry {
        Geometry {
            h: 8,
            w: 16,
            c: 1,
            p: 8,
            d: 8,
            heads: 2,
            cmm_depth: 1,
            mlp_ratio: 2,
            ..Geometry::toy()
        }
    }

    fn random_grid(geom: &Geometry, seed: u64) -> Tensor {
        let mut rng = Stream::new(seed);
        let px: Vec<f64> = (0..geom.h * geom.w * geom.c).map(|_| rng.uniform(0.0, 1.0)).collect();
        crate::nn::patchify(&px, geom)
    }

    #[test]
    fn zero_head_gives_half_everywhere() {
        let geom = tiny_geom();
        let mut rng = Stream::new(1);
        let mut cmm = CmmP::init(&geom, &mut rng);
        cmm.head2.w.value.data.fill(0.0);
        cmm.head2.b.value.data.fill(0.0);

        let pos = crate::nn::sincos_pos_table(geom.grid_h(), geom.grid_w(), geom.d);
        let mut g = Graph::new(LogMode::Strict);
        let ids = cmm.insert(&mut Inserter::new(&mut g, false));
        let z = cmm_forward(&mut g, &ids, &random_grid(&geom, 2), &pos, &geom, 1);
        assert_eq!(g.shape(z), [1, geom.n_patches()]);
        assert!(g.data(z).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn different_images_give_different_probabilities() {
        let geom = tiny_geom();
        let mut rng = Stream::new(3);
        let cmm = CmmP::init(&geom, &mut rng);
        let pos = crate::nn::sincos_pos_table(geom.grid_h(), geom.grid_w(), geom.d);

        let mut grids = random_grid(&geom, 10);
        let second = random_grid(&geom, 11);
        grids.data.extend_from_slice(&second.data);
        grids.shape[0] *= 2;

        let mut g = Graph::new(LogMode::Strict);
        let ids = cmm.insert(&mut Inserter::new(&mut g, false));
        let z = cmm_forward(&mut g, &ids, &grids, &pos, &geom, 2);
        let n = geom.n_patches();
        let zd = g.data(z);
        assert!(zd.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(zd[..n] != zd[n..], "two different images mapped to one mask");
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let geom = tiny_geom();
        let mut rng = Stream::new(7);
        let cmm = CmmP::init(&geom, &mut rng);
        let pos = crate::nn::sincos_pos_table(geom.grid_h(), geom.grid_w(), geom.d);
        let grids = random_grid(&geom, 8);

        let head = [
            cmm.head1.w.value.clone(),
            cmm.head1.b.value.clone(),
            cmm.head2.w.value.clone(),
            cmm.head2.b.value.clone(),
        ];
        let err = grad_check_multi(
            |g, inputs| {
                let mut ids = cmm.insert(&mut Inserter::new(g, false));
                ids.head1 = LinearIds { w: inputs[0], b: inputs[1] };
                ids.head2 = LinearIds { w: inputs[2], b: inputs[3] };
                let z = cmm_forward(g, &ids, &grids, &pos, &geom, 1);
                g.sum(z, None)
            },
            &head,
            1e-5,
        );
        assert!(err < 1e-6, "head gradient error {err}");
    }

    #[test]
    fn threshold_rules() {
        assert_eq!(threshold(&[0.7, 0.3]), vec![1, 0]);
        assert_eq!(threshold(&[0.5]), vec![1], "tie keeps the patch visible");
        let z = [0.9, 0.1, 0.5001, 0.4999];
        let b = threshold(&z);
        let again = threshold(&b.iter().map(|&v| v as f64).collect::<Vec<_>>());
        assert_eq!(b, again, "thresholding is idempotent");
    }

    #[test]
    fn visible_rows_selects_cls_and_kept_patches() {
        assert_eq!(visible_rows(&[1, 0, 1, 0]).unwrap(), vec![0, 1, 3]);
        assert_eq!(visible_rows(&[1, 1, 1, 1]).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(visible_rows(&[0, 0, 0, 0]), Err(MaskError::NoVisible));
    }

    #[test]
    fn pgm_upscales_patches_to_pixels() {
        let geom = Geometry { h: 16, w: 16, c: 1, p: 8, ..Geometry::toy() };
        let all = mask_to_pgm(&[1, 1, 1, 1], &geom);
        let header = b"P5\n16 16\n255\n";
        assert_eq!(&all[..header.len()], header);
        assert!(all[header.len()..].iter().all(|&b| b == 255));
        assert_eq!(all.len(), header.len() + 256);

        let mixed = mask_to_pgm(&[1, 0, 0, 1], &geom);
        let px = &mixed[header.len()..];
        assert_eq!(px[0], 255, "top-left patch visible");
        assert_eq!(px[15], 0, "top-right patch masked");
        assert_eq!(px[8 * 16], 0, "bottom-left patch masked");
        assert_eq!(px[8 * 16 + 15], 255, "bottom-right patch visible");
    }
}
