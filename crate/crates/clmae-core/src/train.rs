//! Alternating two-step training: the autoencoder learns under frozen binary
//! masks, then the masking module learns against the frozen autoencoder.

use crate::checkpoint::{Checkpoint, CkptError, RngBlob};
use crate::config::TrainConfig;
use crate::data::{DataError, Dataset};
use crate::losses::{
    curriculum_loss, diversity_loss, gaussian_loss, joint_loss, kl_ratio_loss, patch_errors,
    LossError, LossWeights,
};
use crate::mae::{decode, encode, mae_embed, normalize_target, recon_loss, MaeP, TARGET_EPS};
use crate::masking::{apply_soft_mask, cmm_forward, mask_to_pgm, threshold, visible_rows, CmmP};
use crate::nn::{absorb_grads, patchify, sincos_pos_table, Geometry, Inserter};
use crate::optim::{lr_at, AdamW};
use crate::rng::Stream;
use crate::tensor::{Graph, LogMode, Tensor};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Images rendered per in-training mask dump.
pub const DUMP_SAMPLES: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("step {step}, mask step: {source}")]
    MaskStep { step: usize, source: LossError },
    #[error("step {step}: reconstruction loss is not finite ({value})")]
    BadReconLoss { step: usize, value: f64 },
    #[error("dataset is {dh}x{dw}x{dc} but settings expect {gh}x{gw}x{gc}")]
    GeometryMismatch { dh: usize, dw: usize, dc: usize, gh: usize, gw: usize, gc: usize },
    #[error("checkpoint was written under different settings")]
    DigestMismatch,
    #[error("checkpoint shuffle covers {found} images but the dataset has {expected}")]
    DatasetChanged { expected: usize, found: usize },
    #[error("checkpoint {has} a masking module but the requested mode {wants} one")]
    ModeMismatch { has: &'static str, wants: &'static str },
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CkptError),
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|source| TrainError::Io { path: dir.display().to_string(), source })?;
    }
    std::fs::write(path, bytes)
        .map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

/// Shuffled pass over dataset indices; batches may straddle pass boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCursor {
    pub perm: Vec<u32>,
    pub pos: usize,
    pub epoch: u64,
}

impl BatchCursor {
    pub fn new(count: usize, rng: &mut Stream) -> Self {
        assert!(count >= 1, "cannot iterate an empty dataset");
        let mut perm: Vec<u32> = (0..count as u32).collect();
        rng.shuffle(&mut perm);
        BatchCursor { perm, pos: 0, epoch: 0 }
    }

    pub fn next_batch(&mut self, b: usize, rng: &mut Stream) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos == self.perm.len() {
                rng.shuffle(&mut self.perm);
                self.pos = 0;
                self.epoch += 1;
            }
            out.push(self.perm[self.pos] as usize);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Curriculum,
    Baseline,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub mae: MaeP,
    pub cmm: Option<CmmP>,
    /// Next iteration index to run.
    pub step: usize,
    pub rng: Stream,
    pub cursor: BatchCursor,
}

impl TrainState {
    /// Draw order is fixed: data shuffle, then parameter init.
    pub fn init(cfg: &TrainConfig, mode: TrainMode, dataset_count: usize) -> Self {
        let mut rng = Stream::new(cfg.seed);
        let cursor = BatchCursor::new(dataset_count, &mut rng);
        let geom = cfg.geometry();
        let mae = MaeP::init(&geom, &mut rng);
        let cmm = (mode == TrainMode::Curriculum).then(|| CmmP::init(&geom, &mut rng));
        TrainState { mae, cmm, step: 0, rng, cursor }
    }

    pub fn capture(&self, digest: [u8; 32]) -> Checkpoint {
        let mut params = self.mae.params();
        if let Some(c) = &self.cmm {
            params.extend(c.params());
        }
        let blob = RngBlob {
            rng: self.rng.state(),
            epoch: self.cursor.epoch,
            pos: self.cursor.pos as u64,
            perm: self.cursor.perm.clone(),
        };
        Checkpoint::capture(digest, &params, self.step as u64, blob)
    }

    /// Mode is inferred from the stored parameter names.
    pub fn restore(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        if ckpt.digest != cfg.digest() {
            return Err(TrainError::DigestMismatch);
        }
        let geom = cfg.geometry();
        let has_cmm = ckpt.params.iter().any(|e| e.name.starts_with("cmm."));
        // Scratch init only shapes the containers; every value is overwritten.
        let mut scratch = Stream::new(0);
        let mut mae = MaeP::init(&geom, &mut scratch);
        let mut cmm = has_cmm.then(|| CmmP::init(&geom, &mut scratch));
        let mut refs = mae.params_mut();
        if let Some(c) = &mut cmm {
            refs.extend(c.params_mut());
        }
        ckpt.restore_into(&mut refs)?;
        let rng = Stream::restore(&ckpt.rng.rng);
        let cursor = BatchCursor {
            perm: ckpt.rng.perm.clone(),
            pos: ckpt.rng.pos as usize,
            epoch: ckpt.rng.epoch,
        };
        Ok(TrainState { mae, cmm, step: ckpt.step as usize, rng, cursor })
    }

    pub fn mode(&self) -> TrainMode {
        if self.cmm.is_some() {
            TrainMode::Curriculum
        } else {
            TrainMode::Baseline
        }
    }
}

/// One metrics row per iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub step: usize,
    pub lambda_cl: f64,
    pub loss_mae: f64,
    pub loss_cl: f64,
    pub loss_gauss: f64,
    pub loss_kl: f64,
    pub loss_div: f64,
    pub loss_joint: f64,
    pub soft_mask_ratio: f64,
    pub mask_fallback_count: usize,
}

impl IterRecord {
    pub const CSV_HEADER: &'static str = "step,lambda_cl,loss_mae,loss_cl,loss_gauss,loss_kl,\
loss_div,loss_joint,soft_mask_ratio,mask_fallback_count";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.lambda_cl,
            self.loss_mae,
            self.loss_cl,
            self.loss_gauss,
            self.loss_kl,
            self.loss_div,
            self.loss_joint,
            self.soft_mask_ratio,
            self.mask_fallback_count
        )
    }
}

fn batch_grids(ds: &Dataset, geom: &Geometry, indices: &[usize]) -> Vec<Tensor> {
    indices.iter().map(|&i| patchify(&ds.image_f64(i), geom)).collect()
}

fn stack_rows<T: std::borrow::Borrow<Tensor>>(parts: &[T]) -> Tensor {
    let cols = parts[0].borrow().shape[1];
    let rows: usize = parts.iter().map(|t| t.borrow().shape[0]).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for t in parts {
        let t = t.borrow();
        assert_eq!(t.shape[1], cols, "ragged column counts in a row stack");
        data.extend_from_slice(&t.data);
    }
    Tensor::from_vec(&[rows, cols], data)
}

/// Keep probabilities for a stack of images under frozen module weights.
pub fn soft_masks(
    cmm: &CmmP,
    geom: &Geometry,
    grids: &Tensor,
    pos: &Tensor,
    images: usize,
) -> Vec<f64> {
    let mut g = Graph::new(LogMode::Strict);
    let ids = cmm.insert(&mut Inserter::new(&mut g, false));
    let z = cmm_forward(&mut g, &ids, grids, pos, geom, images);
    g.data(z).to_vec()
}

/// Patches hidden by a uniform mask at ratio `rho`, kept inside [1, n-1] so
/// both sides of the reconstruction objective stay populated.
pub fn masked_count(n: usize, rho: f64) -> usize {
    ((rho * n as f64).round() as usize).clamp(1, n - 1)
}

pub fn random_mask(n: usize, n_masked: usize, rng: &mut Stream) -> Vec<u8> {
    let mut mask = vec![1u8; n];
    for i in rng.choose_distinct(n, n_masked) {
        mask[i] = 0;
    }
    mask
}

/// Thresholded masks per image; rows leaving nothing visible or nothing to
/// reconstruct are replaced by a uniform draw. Returns the replacement count.
pub fn binary_masks(
    z: &[f64],
    n: usize,
    n_masked: usize,
    rng: &mut Stream,
) -> (Vec<Vec<u8>>, usize) {
    let mut fallbacks = 0;
    let masks = z
        .chunks(n)
        .map(|row| {
            let m = threshold(row);
            let visible = m.iter().any(|&b| b == 1);
            let hidden = m.iter().any(|&b| b == 0);
            if visible && hidden {
                m
            } else {
                fallbacks += 1;
                random_mask(n, n_masked, rng)
            }
        })
        .collect();
    (masks, fallbacks)
}

/// One reconstruction update of the autoencoder under fixed binary masks.
/// Returns the batch-mean masked reconstruction error.
#[allow(clippy::too_many_arguments)]
pub fn mae_update(
    mae: &mut MaeP,
    geom: &Geometry,
    pos_enc: &Tensor,
    pos_dec: &Tensor,
    grids: &[Tensor],
    targets: &[Tensor],
    masks: &[Vec<u8>],
    opt: &AdamW,
    lr: f64,
    opt_step: usize,
    step: usize,
) -> Result<f64, TrainError> {
    let b = grids.len();
    assert!(b >= 1 && targets.len() == b && masks.len() == b, "batch arrays diverge");
    let scale = 1.0 / b as f64;
    let n = grids[0].shape[0];

    // Images whose masks keep the same number of visible rows share one graph;
    // attention windows per image keep each image's forward value unchanged.
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..b {
        let vis = visible_rows(&masks[i]).expect("degenerate masks were replaced");
        groups.entry(vis.len()).or_default().push(i);
    }

    let mut per_image = vec![0.0; b];
    for (&seq, members) in &groups {
        let gb = members.len();
        let mut g = Graph::new(LogMode::Strict);
        let mut ins = Inserter::new(&mut g, true);
        let ids = mae.insert(&mut ins);
        let flat = ins.flat.clone();
        let refs: Vec<&Tensor> = members.iter().map(|&i| &grids[i]).collect();
        let tokens = mae_embed(&mut g, &ids, &stack_rows(&refs), pos_enc, gb);
        let mut gather = Vec::with_capacity(gb * seq);
        let mut patch_vis = Vec::with_capacity(gb);
        for (j, &i) in members.iter().enumerate() {
            let vis = visible_rows(&masks[i]).expect("degenerate masks were replaced");
            gather.extend(vis.iter().map(|&r| j * (n + 1) + r));
            patch_vis.push(vis[1..].iter().map(|&r| r - 1).collect::<Vec<usize>>());
        }
        let subset = g.slice_rows(tokens, &gather);
        let latent = encode(&mut g, &ids, subset, geom, seq);
        let pred = decode(&mut g, &ids, latent, &patch_vis, pos_dec, geom);
        let mut root = None;
        for (j, &i) in members.iter().enumerate() {
            let rows: Vec<usize> = (j * n..(j + 1) * n).collect();
            let pred_i = g.slice_rows(pred, &rows);
            let loss =
                recon_loss(&mut g, pred_i, &targets[i], &masks[i]).expect("masks keep hidden rows");
            let v = g.value(loss);
            if !v.is_finite() {
                return Err(TrainError::BadReconLoss { step, value: v });
            }
            per_image[i] = v;
            root = Some(match root {
                Some(acc) => g.add(acc, loss),
                None => loss,
            });
        }
        g.backward(root.expect("groups are nonempty"));
        absorb_grads(&g, &flat, &mut mae.params_mut(), scale);
    }
    let total = per_image.iter().map(|&v| scale * v).sum();
    opt.step(&mut mae.params_mut(), lr, opt_step);
    Ok(total)
}

/// Loss readout of one masking-module update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmmStepOut {
    pub loss_cl: f64,
    pub loss_gauss: f64,
    pub loss_kl: f64,
    pub loss_div: f64,
    pub loss_joint: f64,
    pub soft_ratio: f64,
}

/// One update of the masking module against the frozen autoencoder. The
/// soft mask scales full-length token rows, so the decoder sees every patch
/// slot and its mask token stays unused.
#[allow(clippy::too_many_arguments)]
pub fn cmm_update(
    cmm: &mut CmmP,
    mae: &MaeP,
    geom: &Geometry,
    pos_enc: &Tensor,
    pos_dec: &Tensor,
    grids: &Tensor,
    targets: &Tensor,
    images: usize,
    lambda: f64,
    weights: &LossWeights,
    mu: f64,
    sigma: f64,
    rho: f64,
    opt: &AdamW,
    lr: f64,
    opt_step: usize,
    step: usize,
) -> Result<CmmStepOut, TrainError> {
    let n = geom.n_patches();
    let mut g = Graph::new(LogMode::Strict);
    let mut ins = Inserter::new(&mut g, true);
    let cmm_ids = cmm.insert(&mut ins);
    let flat = ins.flat.clone();
    let mae_ids = mae.insert(&mut Inserter::new(&mut g, false));

    let z = cmm_forward(&mut g, &cmm_ids, grids, pos_enc, geom, images);
    let tokens = mae_embed(&mut g, &mae_ids, grids, pos_enc, images);
    let soft = apply_soft_mask(&mut g, tokens, z, geom.seq());
    let latent = encode(&mut g, &mae_ids, soft, geom, geom.seq());
    let every_patch: Vec<Vec<usize>> = (0..images).map(|_| (0..n).collect()).collect();
    let pred = decode(&mut g, &mae_ids, latent, &every_patch, pos_dec, geom);
    let target = g.constant(targets);
    let errors = patch_errors(&mut g, pred, target, images, n);

    let l_cl = curriculum_loss(&mut g, errors, z, lambda);
    let l_gauss = gaussian_loss(&mut g, z, mu, sigma);
    let l_kl = kl_ratio_loss(&mut g, z, rho);
    let l_div = diversity_loss(&mut g, z);
    let joint = joint_loss(&mut g, l_cl, l_gauss, l_kl, l_div, weights)
        .map_err(|source| TrainError::MaskStep { step, source })?;
    let jv = g.value(joint);
    if !jv.is_finite() {
        let source = LossError::NonFinite { term: "joint", value: jv };
        return Err(TrainError::MaskStep { step, source });
    }

    let zdata = g.data(z);
    let soft_ratio = 1.0 - zdata.iter().sum::<f64>() / zdata.len() as f64;
    let out = CmmStepOut {
        loss_cl: g.value(l_cl),
        loss_gauss: g.value(l_gauss),
        loss_kl: g.value(l_kl),
        loss_div: g.value(l_div),
        loss_joint: jv,
        soft_ratio,
    };
    g.backward(joint);
    absorb_grads(&g, &flat, &mut cmm.params_mut(), 1.0);
    opt.step(&mut cmm.params_mut(), lr, opt_step);
    Ok(out)
}

fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
    }
}

/// Mask renderings for the first `count` dataset images: one PGM per image
/// plus an index CSV of per-image soft-mask statistics. Degenerate masks are
/// rendered as-is here; fallbacks only apply inside training updates.
pub fn dump_masks(
    cmm: &CmmP,
    geom: &Geometry,
    ds: &Dataset,
    dir: &Path,
    count: usize,
    step: usize,
) -> Result<(), TrainError> {
    let count = count.min(ds.count());
    assert!(count >= 1, "nothing to dump from an empty dataset");
    let n = geom.n_patches();
    let indices: Vec<usize> = (0..count).collect();
    let grids = stack_rows(&batch_grids(ds, geom, &indices));
    let pos = sincos_pos_table(geom.grid_h(), geom.grid_w(), geom.d);
    let z = soft_masks(cmm, geom, &grids, &pos, count);
    let mut index = String::from("image,label,mean_z,fraction_masked,entropy\n");
    for i in 0..count {
        let zi = &z[i * n..(i + 1) * n];
        let mask = threshold(zi);
        let pgm = mask_to_pgm(&mask, geom);
        write_file(&dir.join(format!("mask_{step}_{i}.pgm")), &pgm)?;
        let mean_z = zi.iter().sum::<f64>() / n as f64;
        let visible = mask.iter().map(|&b| f64::from(b)).sum::<f64>() / n as f64;
        let fraction_masked = 1.0 - visible;
        let entropy = zi.iter().map(|&p| binary_entropy(p)).sum::<f64>() / n as f64;
        index.push_str(&format!(
            "{},{},{},{},{}\n",
            i, ds.labels[i], mean_z, fraction_masked, entropy
        ));
    }
    write_file(&dir.join(format!("mask_{step}_index.csv")), index.as_bytes())
}

/// Alternating loop over iterations `state.step..=t_total`. Both steps of an
/// iteration consume the same drawn batch; the λ logged for step t is the
/// value in force during it. Checkpoints store the next iteration index and
/// the generator state after the iteration's draws.
pub fn run_training(
    cfg: &TrainConfig,
    ds: &Dataset,
    mode: TrainMode,
    start: Option<Checkpoint>,
    mut observer: Option<&mut dyn FnMut(&TrainState, &IterRecord)>,
) -> Result<TrainState, TrainError> {
    let geom = cfg.geometry();
    if ds.h != geom.h || ds.w != geom.w || ds.c != geom.c {
        return Err(TrainError::GeometryMismatch {
            dh: ds.h,
            dw: ds.w,
            dc: ds.c,
            gh: geom.h,
            gw: geom.w,
            gc: geom.c,
        });
    }
    let mut state = match start {
        Some(ck) => {
            let st = TrainState::restore(cfg, &ck)?;
            if st.cursor.perm.len() != ds.count() {
                return Err(TrainError::DatasetChanged {
                    expected: ds.count(),
                    found: st.cursor.perm.len(),
                });
            }
            if st.mode() != mode {
                let word = |m| if m == TrainMode::Curriculum { "has" } else { "lacks" };
                return Err(TrainError::ModeMismatch { has: word(st.mode()), wants: word(mode) });
            }
            st
        }
        None => TrainState::init(cfg, mode, ds.count()),
    };

    let digest = cfg.digest();
    let out = Path::new(&cfg.out);
    write_file(&out.join("config.txt"), cfg.render().as_bytes())?;
    let pos_enc = sincos_pos_table(geom.grid_h(), geom.grid_w(), geom.d);
    let pos_dec = sincos_pos_table(geom.grid_h(), geom.grid_w(), geom.dec_width);
    let schedule = cfg.schedule();
    let weights = cfg.loss_weights();
    let opt_mae = AdamW::new(cfg.weight_decay);
    let opt_cmm = AdamW::new(cfg.weight_decay);
    let dump_at: BTreeSet<usize> = cfg.dump_steps().into_iter().collect();
    // One optimizer step per iteration of 0..=t_total, so the cosine tail
    // ends exactly at zero on the final iteration.
    let total_opt_steps = cfg.t_total + 1;
    let n = geom.n_patches();
    let uniform_masked = masked_count(n, cfg.rho);
    let mut metrics = String::from(IterRecord::CSV_HEADER);
    metrics.push('\n');

    for t in state.step..=cfg.t_total {
        if state.cmm.is_some() && dump_at.contains(&t) {
            let cmm = state.cmm.as_ref().expect("checked above");
            dump_masks(cmm, &geom, ds, &out.join("masks"), DUMP_SAMPLES, t)?;
        }

        let indices = state.cursor.next_batch(cfg.batch, &mut state.rng);
        let grids = batch_grids(ds, &geom, &indices);
        let targets: Vec<Tensor> =
            grids.iter().map(|gr| normalize_target(gr, TARGET_EPS).0).collect();
        let stacked = stack_rows(&grids);
        let stacked_targets = stack_rows(&targets);

        let (masks, fallbacks) = match &state.cmm {
            Some(cmm) => {
                let z = soft_masks(cmm, &geom, &stacked, &pos_enc, cfg.batch);
                binary_masks(&z, n, uniform_masked, &mut state.rng)
            }
            None => {
                let draw: Vec<Vec<u8>> = (0..cfg.batch)
                    .map(|_| random_mask(n, uniform_masked, &mut state.rng))
                    .collect();
                (draw, 0)
            }
        };
        if fallbacks > 0 {
            eprintln!(
                "warning: step {t}: {fallbacks} degenerate mask(s) replaced by uniform draws"
            );
        }

        let lr1 = lr_at(cfg.lr_mae, t + 1, total_opt_steps, cfg.warmup);
        let loss_mae = mae_update(
            &mut state.mae,
            &geom,
            &pos_enc,
            &pos_dec,
            &grids,
            &targets,
            &masks,
            &opt_mae,
            lr1,
            t + 1,
            t,
        )?;

        let record = if let Some(cmm) = &mut state.cmm {
            let lambda = schedule.lambda_at(t);
            let lr2 = lr_at(cfg.lr_cmm, t + 1, total_opt_steps, cfg.warmup);
            let o = cmm_update(
                cmm,
                &state.mae,
                &geom,
                &pos_enc,
                &pos_dec,
                &stacked,
                &stacked_targets,
                cfg.batch,
                lambda,
                &weights,
                cfg.mu,
                cfg.sigma,
                cfg.rho,
                &opt_cmm,
                lr2,
                t + 1,
                t,
            )?;
            IterRecord {
                step: t,
                lambda_cl: lambda,
                loss_mae,
                loss_cl: o.loss_cl,
                loss_gauss: o.loss_gauss,
                loss_kl: o.loss_kl,
                loss_div: o.loss_div,
                loss_joint: o.loss_joint,
                soft_mask_ratio: o.soft_ratio,
                mask_fallback_count: fallbacks,
            }
        } else {
            let hidden: usize = masks.iter().map(|m| m.iter().filter(|&&b| b == 0).count()).sum();
            IterRecord {
                step: t,
                lambda_cl: 0.0,
                loss_mae,
                loss_cl: 0.0,
                loss_gauss: 0.0,
                loss_kl: 0.0,
                loss_div: 0.0,
                loss_joint: 0.0,
                soft_mask_ratio: hidden as f64 / (cfg.batch * n) as f64,
                mask_fallback_count: 0,
            }
        };
        metrics.push_str(&record.csv_row());
        metrics.push('\n');
        state.step = t + 1;
        if let Some(obs) = observer.as_mut() {
            obs(&state, &record);
        }

        if (t > 0 && t % cfg.checkpoint_every == 0) || t == cfg.t_total {
            let ck = state.capture(digest);
            let path = out.join(format!("ckpt_{t:06}.bin"));
            ck.write(&path)?;
        }
    }

    write_file(&out.join("metrics.csv"), metrics.as_bytes())?;
    Ok(state)
}
