//! Mask-module training signal: a sign-scheduled reconstruction coupling plus
//! three penalties that shape the mask distribution.

use crate::tensor::{Graph, NodeId, Tensor};

/// Count floor before the per-image mask/visible ratio is normalized.
pub const RATIO_FLOOR: f64 = 1e-8;
/// Below this total weight an image carries no reconstruction signal.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// Linear interpolation from +1 at step 0 to `lambda_end` at step `total`.
/// Positive values reward reconstruction, negative ones penalize it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lambda_end: f64,
    pub total: usize,
}

impl Schedule {
    pub fn new(lambda_end: f64, total: usize) -> Self {
        assert!(total >= 1, "schedule needs at least one step");
        assert!(lambda_end.is_finite(), "schedule endpoint must be finite");
        Schedule { lambda_end, total }
    }

    /// Weight at step `t`. Exact at both endpoints; out-of-range endpoints
    /// are clamped so downstream losses stay bounded.
    pub fn lambda_at(&self, t: usize) -> f64 {
        assert!(t <= self.total, "step {t} is past the schedule horizon {}", self.total);
        let u = t as f64 / self.total as f64;
        ((1.0 - u) + u * self.lambda_end).clamp(-1.0, 1.0)
    }

    /// Per-step decrease of the weight.
    pub fn decay(&self) -> f64 {
        (1.0 - self.lambda_end) / self.total as f64
    }
}

/// Mean per-patch pixel error, reshaped to one row per image.
/// `pred` and `target` are [images*n, pixels]; the result is [images, n].
pub fn patch_errors(
    g: &mut Graph,
    pred: NodeId,
    target: NodeId,
    images: usize,
    n: usize,
) -> NodeId {
    let diff = g.sub(pred, target);
    let sq = g.square(diff);
    let per_row = g.mean(sq, Some(1));
    g.reshape(per_row, &[images, n])
}

/// Reconstruction coupling for the mask module: per image, the error of each
/// patch weighted by how hidden it is, normalized by the total hidden weight,
/// averaged over the batch and scaled by the schedule weight.
///
/// An image whose mask leaves (almost) nothing hidden contributes no signal;
/// its term is dropped rather than divided by a vanishing weight.
pub fn curriculum_loss(g: &mut Graph, errors: NodeId, z: NodeId, lambda: f64) -> NodeId {
    let shape = g.shape(z).to_vec();
    assert_eq!(shape.len(), 2, "mask probabilities must be [images, patches]");
    assert_eq!(g.shape(errors), shape, "errors and mask probabilities disagree on shape");
    let (images, n) = (shape[0], shape[1]);

    let zdata = g.data(z);
    let mut select = Vec::with_capacity(images);
    let mut dropped = 0usize;
    for im in 0..images {
        let hidden_weight: f64 = zdata[im * n..(im + 1) * n].iter().map(|&v| 1.0 - v).sum();
        let live = hidden_weight >= WEIGHT_FLOOR;
        select.push(if live { 1.0 } else { 0.0 });
        dropped += usize::from(!live);
    }
    if dropped > 0 {
        eprintln!("warning: {dropped} of {images} masks leave nothing hidden; dropping their reconstruction terms");
    }

    let neg_z = g.neg(z);
    let w = g.add_const(neg_z, 1.0);
    let weighted = g.mul(w, errors);
    let num = g.sum(weighted, Some(1));
    let den = g.sum(w, Some(1));
    let den_safe = g.clamp_min(den, WEIGHT_FLOOR);
    let ratio = g.div(num, den_safe);
    let live = g.constant(&Tensor::from_vec(&[images], select));
    let kept = g.mul(ratio, live);
    let mean = g.mean(kept, None);
    g.mul_const(mean, lambda)
}

/// Mean Gaussian density of the mask probabilities around `mu`. Maximal when
/// every probability sits at `mu`, so it penalizes saturated masks.
pub fn gaussian_loss(g: &mut Graph, z: NodeId, mu: f64, sigma: f64) -> NodeId {
    assert!(sigma > 0.0, "gaussian width must be positive");
    let centered = g.add_const(z, -mu);
    let sq = g.square(centered);
    let scaled = g.mul_const(sq, -1.0 / (2.0 * sigma * sigma));
    let bump = g.exp(scaled);
    let coef = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let pdf = g.mul_const(bump, coef);
    g.mean(pdf, None)
}

/// Divergence between each image's hidden/visible split and the target split
/// `rho` hidden. Zero exactly when the soft counts match the target.
pub fn kl_ratio_loss(g: &mut Graph, z: NodeId, rho: f64) -> NodeId {
    assert!(rho > 0.0 && rho < 1.0, "target hidden ratio must lie strictly inside (0, 1)");
    let shape = g.shape(z).to_vec();
    assert_eq!(shape.len(), 2, "mask probabilities must be [images, patches]");
    let n = shape[1];

    let neg_z = g.neg(z);
    let one_minus = g.add_const(neg_z, 1.0);
    let hidden = g.sum(one_minus, Some(1));
    let visible = g.sum(z, Some(1));
    let hidden_floored = g.clamp_min(hidden, RATIO_FLOOR);
    let visible_floored = g.clamp_min(visible, RATIO_FLOOR);
    let scale = 1.0 / n as f64;
    let h_frac = g.mul_const(hidden_floored, scale);
    let v_frac = g.mul_const(visible_floored, scale);
    let ln_h = g.log(h_frac);
    let ln_v = g.log(v_frac);
    // rho*(ln rho - ln h) + (1-rho)*(ln(1-rho) - ln v); the grouped form
    // cancels exactly at the target split.
    let h_gap = g.add_const(ln_h, -rho.ln());
    let v_gap = g.add_const(ln_v, -(1.0 - rho).ln());
    let h_term = g.mul_const(h_gap, -rho);
    let v_term = g.mul_const(v_gap, -(1.0 - rho));
    let per_image = g.add(h_term, v_term);
    g.mean(per_image, None)
}

/// Mean pairwise similarity of the mask rows under a Gaussian kernel.
/// One when all masks agree, near zero when they are far apart.
pub fn diversity_loss(g: &mut Graph, z: NodeId) -> NodeId {
    let shape = g.shape(z).to_vec();
    assert_eq!(shape.len(), 2, "mask probabilities must be [images, patches]");
    let b = shape[0];
    if b < 2 {
        return g.scalar(0.0);
    }

    let mut pair_terms = Vec::with_capacity(b * (b - 1) / 2);
    for i in 0..b {
        for j in i + 1..b {
            let zi = g.slice_rows(z, &[i]);
            let zj = g.slice_rows(z, &[j]);
            let diff = g.sub(zi, zj);
            let sq = g.square(diff);
            let dist = g.sum(sq, None);
            let neg = g.neg(dist);
            let sim = g.exp(neg);
            pair_terms.push(g.reshape(sim, &[1, 1]));
        }
    }
    let stacked = g.concat_rows(&pair_terms);
    let total = g.sum(stacked, None);
    g.mul_const(total, 2.0 / (b * (b - 1)) as f64)
}

/// Relative weights of the three mask-shape penalties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub gauss: f64,
    pub kl: f64,
    pub div: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { gauss: 10.0, kl: 1.0, div: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("{term} loss is not finite (value {value})")]
    NonFinite { term: &'static str, value: f64 },
}

/// Weighted sum of the four scalar loss terms. Refuses to combine a term
/// that has already gone non-finite, naming the offender.
pub fn joint_loss(
    g: &mut Graph,
    cl: NodeId,
    gauss: NodeId,
    kl: NodeId,
    div: NodeId,
    w: &LossWeights,
) -> Result<NodeId, LossError> {
    for (term, id) in [("curriculum", cl), ("gaussian", gauss), ("ratio", kl), ("diversity", div)] {
        let v = g.value(id);
        if !v.is_finite() {
            return Err(LossError::NonFinite { term, value: v });
        }
    }
    let wg = g.mul_const(gauss, w.gauss);
    let wk = g.mul_const(kl, w.kl);
    let wd = g.mul_const(div, w.div);
    let a = g.add(cl, wg);
    let b = g.add(a, wk);
    Ok(g.add(b, wd))
}
