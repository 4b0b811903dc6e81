//! Autoencoder backbone: visible-token encoder, mask-token decoder, and the
//! per-patch normalized reconstruction target.

use crate::masking::MaskError;
use crate::nn::{
    embed_tokens, encoder_stack, linear, token_init, vit_block, BlockIds, BlockP, Geometry,
    Inserter, LinearIds, LinearP, LnIds, LnP, Param, LN_EPS,
};
use crate::rng::Stream;
use crate::tensor::{Graph, NodeId, Tensor};

pub const TARGET_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct MaeP {
    pub embed: LinearP,
    pub cls: Param,
    pub enc_blocks: Vec<BlockP>,
    pub enc_norm: LnP,
    pub dec_embed: LinearP,
    pub mask_tok: Param,
    pub dec_blocks: Vec<BlockP>,
    pub dec_norm: LnP,
    pub pred: LinearP,
}

#[derive(Debug, Clone)]
pub struct MaeIds {
    pub embed: LinearIds,
    pub cls: NodeId,
    pub enc_blocks: Vec<BlockIds>,
    pub enc_norm: LnIds,
    pub dec_embed: LinearIds,
    pub mask_tok: NodeId,
    pub dec_blocks: Vec<BlockIds>,
    pub dec_norm: LnIds,
    pub pred: LinearIds,
}

impl MaeP {
    pub fn init(geom: &Geometry, rng: &mut Stream) -> Self {
        MaeP {
            embed: LinearP::init("enc.embed", geom.patch_dim(), geom.d, rng),
            cls: token_init("enc.cls", geom.d, rng),
            enc_blocks: (0..geom.enc_depth)
                .map(|i| BlockP::init(&format!("enc.blocks.{i}"), geom.d, geom.mlp_ratio, rng))
                .collect(),
            enc_norm: LnP::init("enc.norm", geom.d),
            dec_embed: LinearP::init("dec.embed", geom.d, geom.dec_width, rng),
            mask_tok: token_init("dec.mask", geom.dec_width, rng),
            dec_blocks: (0..geom.dec_depth)
                .map(|i| {
                    BlockP::init(&format!("dec.blocks.{i}"), geom.dec_width, geom.mlp_ratio, rng)
                })
                .collect(),
            dec_norm: LnP::init("dec.norm", geom.dec_width),
            pred: LinearP::init("dec.pred", geom.dec_width, geom.patch_dim(), rng),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.embed.w, &self.embed.b, &self.cls];
        for b in &self.enc_blocks {
            b.push_params(&mut out);
        }
        out.extend([
            &self.enc_norm.g,
            &self.enc_norm.b,
            &self.dec_embed.w,
            &self.dec_embed.b,
            &self.mask_tok,
        ]);
        for b in &self.dec_blocks {
            b.push_params(&mut out);
        }
        out.extend([&self.dec_norm.g, &self.dec_norm.b, &self.pred.w, &self.pred.b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.embed.w, &mut self.embed.b, &mut self.cls];
        for b in &mut self.enc_blocks {
            b.push_params_mut(&mut out);
        }
        out.extend([&mut self.enc_norm.g, &mut self.enc_norm.b]);
        out.extend([&mut self.dec_embed.w, &mut self.dec_embed.b, &mut self.mask_tok]);
        for b in &mut self.dec_blocks {
            b.push_params_mut(&mut out);
        }
        out.extend([
            &mut self.dec_norm.g,
            &mut self.dec_norm.b,
            &mut self.pred.w,
            &mut self.pred.b,
        ]);
        out
    }

    /// Leaf order matches `params()`, so harvested gradients line up.
    pub fn insert(&self, ins: &mut Inserter) -> MaeIds {
        MaeIds {
            embed: ins.linear(&self.embed),
            cls: ins.param(&self.cls),
            enc_blocks: self.enc_blocks.iter().map(|b| ins.block(b)).collect(),
            enc_norm: ins.ln(&self.enc_norm),
            dec_embed: ins.linear(&self.dec_embed),
            mask_tok: ins.param(&self.mask_tok),
            dec_blocks: self.dec_blocks.iter().map(|b| ins.block(b)).collect(),
            dec_norm: ins.ln(&self.dec_norm),
            pred: ins.linear(&self.pred),
        }
    }
}

/// Project patch rows and attach CLS and positions for a stack of images.
pub fn mae_embed(
    g: &mut Graph,
    ids: &MaeIds,
    grids: &Tensor,
    pos: &Tensor,
    images: usize,
) -> NodeId {
    embed_tokens(g, grids, ids.embed, ids.cls, pos, images)
}

/// Encoder over already-embedded token windows of `seq` rows each.
/// Step 1 passes the CLS-plus-visible subset; full windows elsewhere.
pub fn encode(g: &mut Graph, ids: &MaeIds, tokens: NodeId, geom: &Geometry, seq: usize) -> NodeId {
    g.shape(tokens);
    assert!(seq >= 2, "encoder needs the CLS row and at least one visible patch, got seq {seq}");
    encoder_stack(g, &ids.enc_blocks, ids.enc_norm, tokens, geom.heads, seq)
}

/// Re-scatter encoded tokens into all n patch slots (shared mask token in
/// the hidden ones), run the decoder, and predict per-patch pixels.
///
/// `vis_per_image[i]` lists image i's visible patch indices in their encoded
/// order; every image must expose the same count so the attention windows
/// stay uniform. Output is [images*n, p*p*c].
pub fn decode(
    g: &mut Graph,
    ids: &MaeIds,
    latent: NodeId,
    vis_per_image: &[Vec<usize>],
    pos_dec: &Tensor,
    geom: &Geometry,
) -> NodeId {
    let images = vis_per_image.len();
    let n = geom.n_patches();
    let v = vis_per_image[0].len();
    assert!(vis_per_image.iter().all(|m| m.len() == v), "ragged visible counts in one decode call");
    let lat_rows = images * (1 + v);
    assert_eq!(g.shape(latent)[0], lat_rows, "latent rows do not match visible counts");

    let lat = linear(g, ids.dec_embed, latent);
    let cat = g.concat_rows(&[lat, ids.mask_tok]);
    let mask_row = lat_rows;

    let mut map = Vec::with_capacity(images * (n + 1));
    for (im, vis) in vis_per_image.iter().enumerate() {
        let base = im * (1 + v);
        map.push(base);
        let mut slot = vec![mask_row; n];
        for (enc_pos, &patch) in vis.iter().enumerate() {
            assert!(patch < n, "visible patch index {patch} out of range for {n} patches");
            slot[patch] = base + 1 + enc_pos;
        }
        map.extend(slot);
    }
    let mut tok = g.slice_rows(cat, &map);

    let width = geom.dec_width;
    assert_eq!(
        pos_dec.shape,
        [n + 1, width],
        "decoder positional table {:?} does not match geometry",
        pos_dec.shape
    );
    let mut tiled = Vec::with_capacity(images * pos_dec.data.len());
    for _ in 0..images {
        tiled.extend_from_slice(&pos_dec.data);
    }
    let pos_node = g.constant(&Tensor::from_vec(&[images * (n + 1), width], tiled));
    tok = g.add(tok, pos_node);

    for b in &ids.dec_blocks {
        tok = vit_block(g, b, tok, geom.dec_heads, n + 1);
    }
    tok = g.layernorm(tok, ids.dec_norm.g, ids.dec_norm.b, LN_EPS);
    let pix = linear(g, ids.pred, tok);

    let patch_rows: Vec<usize> =
        (0..images).flat_map(|im| (1..=n).map(move |j| im * (n + 1) + j)).collect();
    g.slice_rows(pix, &patch_rows)
}

/// Per-patch normalized pixels plus the (mean, std) undo data per row.
pub fn normalize_target(grid: &Tensor, eps: f64) -> (Tensor, Vec<(f64, f64)>) {
    let rows = grid.shape[0];
    let cols = grid.shape[1];
    let mut out = grid.data.clone();
    let mut stats = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let std = (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) / std;
        }
        stats.push((mean, std));
    }
    (Tensor::from_vec(&[rows, cols], out), stats)
}

/// Mean squared error over the masked patch rows only (mask 0 = hidden).
/// Predictions at visible rows never contribute.
pub fn recon_loss(
    g: &mut Graph,
    pred: NodeId,
    target: &Tensor,
    mask: &[u8],
) -> Result<NodeId, MaskError> {
    assert_eq!(
        g.shape(pred),
        target.shape.as_slice(),
        "prediction shape {:?} does not match target {:?}",
        g.shape(pred),
        target.shape
    );
    assert_eq!(
        target.shape[0],
        mask.len(),
        "mask length {} does not match {} patch rows",
        mask.len(),
        target.shape[0]
    );
    let hidden: Vec<usize> =
        mask.iter().enumerate().filter(|(_, &m)| m == 0).map(|(i, _)| i).collect();
    if hidden.is_empty() {
        return Err(MaskError::NoMasked);
    }
    let cols = target.shape[1];
    let mut tdata = Vec::with_capacity(hidden.len() * cols);
    for &r in &hidden {
        tdata.extend_from_slice(&target.data[r * cols..(r + 1) * cols]);
    }
    let tnode = g.constant(&Tensor::from_vec(&[hidden.len(), cols], tdata));
    let pnode = g.slice_rows(pred, &hidden);
    let diff = g.sub(pnode, tnode);
    let sq = g.square(diff);
    Ok(g.mean(sq, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{patchify, sincos_pos_table};
    use crate::tensor::LogMode;

    fn tiny_geom() -> Geometry {
        Geometry {
            h: 16,
            w: 16,
            c: 1,
            p: 8,
            d: 8,
            heads: 2,
            enc_depth: 1,
            dec_width: 8,
            dec_heads: 2,
            dec_depth: 1,
            cmm_depth: 1,
            mlp_ratio: 2,
        }
    }

    fn random_grid(geom: &Geometry, seed: u64) -> Tensor {
        let mut rng = Stream::new(seed);
        let px: Vec<f64> = (0..geom.h * geom.w * geom.c).map(|_| rng.uniform(0.0, 1.0)).collect();
        patchify(&px, geom)
    }

    #[test]
    fn encoder_sees_cls_plus_visible_tokens() {
        let geom = tiny_geom();
        let mut rng = Stream::new(1);
        let mae = MaeP::init(&geom, &mut rng);
        let pos = sincos_pos_table(geom.grid_h(), geom.grid_w(), geom.d);

        let mut g = Graph::new(LogMode::Strict);
        let ids = mae.insert(&mut Inserter::new(&mut g, false));
        let tokens = mae_embed(&mut g, &ids, &random_grid(&geom, 2), &pos, 1);
        assert_eq!(g.shape(tokens), [5, 8]);

        let full = encode(&mut g, &ids, tokens, &geom, 5);
        assert_eq!(g.shape(full), [5, 8], "all patches visible keeps every token");

        let subset = g.slice_rows(tokens, &[0, 1, 3]);
        let part = encode(&mut g, &ids, subset, &geom, 3);
        assert_eq!(g.shape(part), [3, 8]);
    }

    #[test]
    fn encoding_is_consistent_across_visible_orders() {
        let geom = tiny_geom();
        let mut rng = Stream::new(3);
        let mae = MaeP::init(&geom, &mut rng);
        let pos = sincos_pos_table(geom.grid_h(), geom.grid_w(), geom.d);
        let grid = random_grid(&geom, 4);

        let run = |order: &[usize]| -> Vec<f64> {
            let mut g = Graph::new(LogMode::Strict);
            let ids = mae.insert(&mut Inserter::new(&mut g, false));
            let tokens = mae_embed(&mut g, &ids, &grid, &pos, 1);
            let subset = g.slice_rows(tokens, order);
            let out = encode(&mut g, &ids, subset, &geom, order.len());
            g.data(out).to_vec()
        };
        let a = run(&[0, 2, 4]);
        let b = run(&[0, 4, 2]);
        let d = geom.d;
        for (row_a, row_b) in [(1usize, 2usize), (2, 1)] {
            for j in 0..d {
                let x = a[row_a * d + j];
                let y = b[row_b * d + j];
                assert!((x - y).abs() < 1e-9, "token moved between orders: {x} vs {y}");
            }
        }
    }

    #[test]
    fn decode_always_emits_one_row_per_patch() {
        let geom = tiny_geom();
        let mut rng = Stream::new(5);
        let mae = MaeP::init(&geom, &mut rng);
        let pos_dec = sincos_pos_table(geom.grid_h(), geom.grid_w(), geom.dec_width);

        for vis in [vec![], vec![2], vec![0, 1, 2, 3]] {
            let mut g = Graph::new(LogMode::Strict);
            let ids = mae.insert(&mut Inserter::new(&mut g, false));
            let latent = g.constant(&Tensor::from_vec(
                &[1 + vis.len(), geom.d],
                (0..(1 + vis.len()) * geom.d).map(|i| i as f64 * 0.01).collect(),
            ));
            let out = decode(&mut g, &ids, latent, &[vis.clone()], &pos_dec, &geom);
            assert_eq!(g.shape(out), [4, 64], "visible set {vis:?} changed the output contract");
        }
    }

    #[test]
    fn zero_prediction_weights_give_zero_output() {
        let geom = tiny_geom();
        let mut rng = Stream::new(6);
        let mut mae = MaeP::init(&geom, &mut rng);
        mae.pred.w.value.data.fill(0.0);
        mae.pred.b.value.data.fill(0.0);
        let pos_dec = sincos_pos_table(geom.grid_h(), geom.grid_w(), geom.dec_width);

        let mut g = Graph::new(LogMode::Strict);
        let ids = mae.insert(&mut Inserter::new(&mut g, false));
        let latent =
            g.constant(&Tensor::from_vec(&[3, geom.d], (0..24).map(|i| i as f64).collect()));
        let out = decode(&mut g, &ids, latent, &[vec![1, 2]], &pos_dec, &geom);
        assert!(g.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_token_only_touches_hidden_slots_at_depth_zero() {
        let geom = Geometry { dec_depth: 0, ..tiny_geom() };
        let mut rng = Stream::new(7);
        let mut mae = MaeP::init(&geom, &mut rng);
        let pos_dec = sincos_pos_table(geom.grid_h(), geom.grid_w(), geom.dec_width);
        let latent_t = Tensor::from_vec(&[3, geom.d], (0..24).map(|i| (i as f64).sin()).collect());
        let vis = vec![vec![0, 3]];

        let run = |mae: &MaeP| -> Vec<f64> {
            let mut g = Graph::new(LogMode::Strict);
            let ids = mae.insert(&mut Inserter::new(&mut g, false));
            let latent = g.constant(&latent_t);
            let out = decode(&mut g, &ids, latent, &vis, &pos_dec, &geom);
            g.data(out).to_vec()
        };
        let before = run(&mae);
        for v in &mut mae.mask_tok.value.data {
            *v += 0.5;
        }
        let after = run(&mae);

        let cols = geom.patch_dim();
        for patch in 0..4 {
            let same =
                before[patch * cols..(patch + 1) * cols] == after[patch * cols..(patch + 1) * cols];
            let visible = patch == 0 || patch == 3;
            assert_eq!(
                same, visible,
                "patch {patch}: mask token must reach exactly the hidden slots"
            );
        }
    }

    #[test]
    fn normalize_target_zeroes_constant_patches_and_centers_rows() {
        let (t, stats) = normalize_target(&Tensor::from_vec(&[1, 4], vec![3.0; 4]), TARGET_EPS);
        assert!(t.data.iter().all(|&v| v == 0.0));
        assert_eq!(stats[0].0, 3.0);

        let (t, _) = normalize_target(&Tensor::from_vec(&[1, 2], vec![0.0, 2.0]), TARGET_EPS);
        assert!((t.data[0] + 1.0).abs() < 1e-5 && (t.data[1] - 1.0).abs() < 1e-5);

        let mut rng = Stream::new(9);
        let grid = Tensor::from_vec(&[6, 8], (0..48).map(|_| rng.uniform(0.0, 1.0)).collect());
        let (t, _) = normalize_target(&grid, TARGET_EPS);
        for r in 0..6 {
            let mean: f64 = t.data[r * 8..(r + 1) * 8].iter().sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9, "row {r} mean {mean}");
        }
    }

    #[test]
    fn recon_loss_scores_hidden_rows_only() {
        let target = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, -1.0]);

        let mut g = Graph::new(LogMode::Strict);
        let pred = g.constant(&Tensor::zeros(&[2, 2]));
        let loss = recon_loss(&mut g, pred, &target, &[1, 0]).unwrap();
        assert_eq!(g.value(loss), 1.0, "hand case: both hidden pixels off by one");

        let mut g = Graph::new(LogMode::Strict);
        let pred = g.constant(&Tensor::from_vec(&[2, 2], vec![9.0, -9.0, 1.0, -1.0]));
        let loss = recon_loss(&mut g, pred, &target, &[1, 0]).unwrap();
        assert_eq!(g.value(loss), 0.0, "exact prediction at the hidden row");

        let mut g = Graph::new(LogMode::Strict);
        let pred = g.constant(&Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 2.0, 0.0]));
        let loss = recon_loss(&mut g, pred, &target, &[1, 0]).unwrap();
        assert_eq!(g.value(loss), 1.0, "prediction plus one everywhere");

        assert_eq!(recon_loss(&mut g, pred, &target, &[1, 1]).unwrap_err(), MaskError::NoMasked);
    }
}
