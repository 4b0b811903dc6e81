//! Frozen-encoder evaluation: nearest neighbor, linear probe, few-shot probe.

use crate::data::Dataset;
use crate::mae::{encode, mae_embed, MaeP};
use crate::nn::{absorb_grads, linear, patchify, sincos_pos_table, Geometry, Inserter, LinearP};
use crate::optim::AdamW;
use crate::rng::Stream;
use crate::tensor::{Graph, LogMode, Tensor};

/// Images encoded per forward pass during feature extraction.
const EXTRACT_CHUNK: usize = 32;

pub const RESULTS_HEADER: &str = "protocol,tag,k,acc1,acc5,seeds";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dataset is {dh}x{dw}x{dc} but the encoder expects {gh}x{gw}x{gc}")]
    GeometryMismatch { dh: usize, dw: usize, dc: usize, gh: usize, gw: usize, gc: usize },
    #[error("no training rows to compare against")]
    EmptyTrain,
    #[error("feature widths diverge: train {train} vs test {test}")]
    WidthMismatch { train: usize, test: usize },
    #[error("a probe needs at least two classes, the training rows carry {found}")]
    SingleClass { found: usize },
    #[error("class {class} has {have} training rows, fewer than the {want} requested shots")]
    TooFewShots { class: usize, have: usize, want: usize },
}

/// One row of frozen features per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl FeatureSet {
    pub fn count(&self) -> usize {
        self.features.shape[0]
    }

    pub fn width(&self) -> usize {
        self.features.shape[1]
    }

    fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.features.data[i * w..(i + 1) * w]
    }

    fn subset(&self, indices: &[usize]) -> FeatureSet {
        let w = self.width();
        let mut data = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        FeatureSet {
            features: Tensor::from_vec(&[indices.len(), w], data),
            labels,
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunScore {
    pub acc1: f64,
    pub acc5: f64,
}

/// Protocol scores in percent, with per-run values when averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub protocol: &'static str,
    pub k: Option<usize>,
    pub acc1: f64,
    pub acc5: f64,
    pub runs: Vec<RunScore>,
    pub seeds: Vec<u64>,
}

impl ProbeResult {
    fn averaged(
        protocol: &'static str,
        k: Option<usize>,
        runs: Vec<RunScore>,
        seeds: Vec<u64>,
    ) -> Self {
        let m = runs.len() as f64;
        let acc1 = runs.iter().map(|r| r.acc1).sum::<f64>() / m;
        let acc5 = runs.iter().map(|r| r.acc5).sum::<f64>() / m;
        ProbeResult { protocol, k, acc1, acc5, runs, seeds }
    }

    pub fn csv_row(&self, tag: &str) -> String {
        let k = self.k.map(|k| k.to_string()).unwrap_or_default();
        let seeds = self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";");
        format!("{},{},{},{},{},{}", self.protocol, tag, k, self.acc1, self.acc5, seeds)
    }
}

/// Mean-pooled patch-token encoder outputs with every token visible and no
/// masking module in the path. The CLS row is excluded from the pool.
pub fn extract_features(
    mae: &MaeP,
    geom: &Geometry,
    ds: &Dataset,
) -> Result<FeatureSet, EvalError> {
    if ds.h != geom.h || ds.w != geom.w || ds.c != geom.c {
        return Err(EvalError::GeometryMismatch {
            dh: ds.h,
            dw: ds.w,
            dc: ds.c,
            gh: geom.h,
            gw: geom.w,
            gc: geom.c,
        });
    }
    let s = ds.count();
    let (n, seq, d) = (geom.n_patches(), geom.seq(), geom.d);
    let pos = sincos_pos_table(geom.grid_h(), geom.grid_w(), d);
    let mut out = Vec::with_capacity(s * d);
    let mut start = 0;
    while start < s {
        let images = EXTRACT_CHUNK.min(s - start);
        let grids: Vec<Tensor> =
            (start..start + images).map(|i| patchify(&ds.image_f64(i), geom)).collect();
        let cols = grids[0].shape[1];
        let mut stacked = Vec::with_capacity(images * n * cols);
        for gr in &grids {
            stacked.extend_from_slice(&gr.data);
        }
        let stacked = Tensor::from_vec(&[images * n, cols], stacked);
        let mut g = Graph::new(LogMode::Strict);
        let ids = mae.insert(&mut Inserter::new(&mut g, false));
        let tokens = mae_embed(&mut g, &ids, &stacked, &pos, images);
        let latent = encode(&mut g, &ids, tokens, geom, seq);
        let data = g.data(latent);
        for im in 0..images {
            let base = (im * seq + 1) * d;
            for j in 0..d {
                let mut acc = 0.0;
                for p in 0..n {
                    acc += data[base + p * d + j];
                }
                out.push(acc / n as f64);
            }
        }
        start += images;
    }
    Ok(FeatureSet {
        features: Tensor::from_vec(&[s, d], out),
        labels: ds.labels.iter().map(|&l| l as usize).collect(),
        classes: ds.classes as usize,
    })
}

/// Raw pixel intensities as a feature row per image, for floor comparisons.
pub fn pixel_features(ds: &Dataset) -> FeatureSet {
    let s = ds.count();
    let w = ds.image_len();
    let mut data = Vec::with_capacity(s * w);
    for i in 0..s {
        data.extend_from_slice(&ds.image_f64(i));
    }
    FeatureSet {
        features: Tensor::from_vec(&[s, w], data),
        labels: ds.labels.iter().map(|&l| l as usize).collect(),
        classes: ds.classes as usize,
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exhaustive Euclidean nearest neighbors; distance ties prefer the lower
/// training index. Acc@5 asks whether the true label appears among the five
/// nearest neighbors' labels, over fewer neighbors when the training set is
/// smaller than five.
pub fn nn_classify(
    train: &FeatureSet,
    test: &FeatureSet,
    kmax: usize,
) -> Result<ProbeResult, EvalError> {
    if train.count() == 0 {
        return Err(EvalError::EmptyTrain);
    }
    if train.width() != test.width() {
        return Err(EvalError::WidthMismatch { train: train.width(), test: test.width() });
    }
    let k = kmax.min(train.count());
    if k < kmax {
        eprintln!(
            "note: only {} training rows, top-{kmax} accuracy uses {k} neighbors",
            train.count()
        );
    }
    let mut hit1 = 0usize;
    let mut hitk = 0usize;
    for q in 0..test.count() {
        let query = test.row(q);
        let mut order: Vec<(f64, usize)> =
            (0..train.count()).map(|i| (sq_dist(query, train.row(i)), i)).collect();
        order.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let truth = test.labels[q];
        if train.labels[order[0].1] == truth {
            hit1 += 1;
        }
        if order[..k].iter().any(|&(_, i)| train.labels[i] == truth) {
            hitk += 1;
        }
    }
    let scale = 100.0 / test.count() as f64;
    Ok(ProbeResult {
        protocol: "nn",
        k: None,
        acc1: hit1 as f64 * scale,
        acc5: hitk as f64 * scale,
        runs: Vec::new(),
        seeds: Vec::new(),
    })
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data[i * classes + l] = 1.0;
    }
    t
}

fn top_k_hits(scores: &[f64], truth: usize, k: usize) -> (bool, bool) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b))
    });
    (order[0] == truth, order[..k].iter().any(|&c| c == truth))
}

/// One softmax layer trained on frozen features with full-batch updates.
fn probe_single_run(
    train: &FeatureSet,
    test: &FeatureSet,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> RunScore {
    let (d, classes) = (train.width(), train.classes);
    let mut rng = Stream::new(seed);
    let mut layer = LinearP::init("probe", d, classes, &mut rng);
    let targets = one_hot(&train.labels, classes);
    let opt = AdamW::new(0.0);
    for epoch in 0..epochs {
        // Softmax keeps every probability strictly positive, but saturated
        // logits can round one to zero, so the log runs in clamp mode.
        let mut g = Graph::new(LogMode::Clamp);
        let mut ins = Inserter::new(&mut g, true);
        let ids = ins.linear(&layer);
        let flat = ins.flat.clone();
        let x = g.constant(&train.features);
        let logits = linear(&mut g, ids, x);
        let probs = g.softmax(logits, 1);
        let hot = g.constant(&targets);
        let picked = g.mul(probs, hot);
        let picked = g.sum(picked, Some(1));
        let logp = g.log(picked);
        let mean = g.mean(logp, None);
        let loss = g.neg(mean);
        g.backward(loss);
        let mut params = vec![&mut layer.w, &mut layer.b];
        absorb_grads(&g, &flat, &mut params, 1.0);
        opt.step(&mut params, lr, epoch + 1);
    }
    let mut g = Graph::new(LogMode::Clamp);
    let ids = Inserter::new(&mut g, false).linear(&layer);
    let x = g.constant(&test.features);
    let logits = linear(&mut g, ids, x);
    let scores = g.data(logits);
    let k = 5.min(classes);
    let mut hit1 = 0usize;
    let mut hitk = 0usize;
    for q in 0..test.count() {
        let (top1, topk) = top_k_hits(&scores[q * classes..(q + 1) * classes], test.labels[q], k);
        hit1 += usize::from(top1);
        hitk += usize::from(topk);
    }
    let scale = 100.0 / test.count() as f64;
    RunScore { acc1: hit1 as f64 * scale, acc5: hitk as f64 * scale }
}

fn check_probe_inputs(train: &FeatureSet, test: &FeatureSet) -> Result<(), EvalError> {
    if train.count() == 0 {
        return Err(EvalError::EmptyTrain);
    }
    if train.width() != test.width() {
        return Err(EvalError::WidthMismatch { train: train.width(), test: test.width() });
    }
    let mut seen = vec![false; train.classes];
    for &l in &train.labels {
        seen[l] = true;
    }
    let found = seen.iter().filter(|&&s| s).count();
    if found < 2 {
        return Err(EvalError::SingleClass { found });
    }
    Ok(())
}

/// Linear probe averaged over exactly three seeded runs.
pub fn linear_probe(
    train: &FeatureSet,
    test: &FeatureSet,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ProbeResult, EvalError> {
    check_probe_inputs(train, test)?;
    let seeds: Vec<u64> = (0..3).map(|r| seed + r).collect();
    let runs: Vec<RunScore> =
        seeds.iter().map(|&s| probe_single_run(train, test, epochs, lr, s)).collect();
    Ok(ProbeResult::averaged("probe", None, runs, seeds))
}

/// Linear probe on k seeded examples per class, averaged over three runs.
/// Selecting every example reproduces the full probe exactly because the
/// chosen indices are re-sorted into dataset order.
pub fn few_shot_probe(
    train: &FeatureSet,
    test: &FeatureSet,
    k: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ProbeResult, EvalError> {
    check_probe_inputs(train, test)?;
    assert!(k >= 1, "zero-shot probes are meaningless");
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); train.classes];
    for (i, &l) in train.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (class, rows) in by_class.iter().enumerate() {
        if !rows.is_empty() && rows.len() < k {
            return Err(EvalError::TooFewShots { class, have: rows.len(), want: k });
        }
    }
    let seeds: Vec<u64> = (0..3).map(|r| seed + r).collect();
    let mut runs = Vec::with_capacity(3);
    for &s in &seeds {
        let mut pick = Stream::new(s);
        let mut chosen = Vec::new();
        for rows in &by_class {
            if rows.is_empty() {
                continue;
            }
            chosen.extend(pick.choose_distinct(rows.len(), k).into_iter().map(|j| rows[j]));
        }
        chosen.sort_unstable();
        let subset = train.subset(&chosen);
        runs.push(probe_single_run(&subset, test, epochs, lr, s));
    }
    Ok(ProbeResult::averaged("fewshot", Some(k), runs, seeds))
}
