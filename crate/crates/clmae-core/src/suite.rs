//! Seeded finite-difference sweep over every differentiable operation and
//! every training objective.

use crate::losses::{curriculum_loss, diversity_loss, gaussian_loss, kl_ratio_loss, LossWeights};
use crate::mae::{normalize_target, recon_loss, TARGET_EPS};
use crate::rng::Stream;
use crate::tensor::{grad_check_multi, Graph, NodeId, Tensor};

/// Worst relative disagreement between reverse-mode and central differences
/// for one component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub err: f64,
}

pub const SUITE_TOLERANCE: f64 = 1e-4;

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Stream) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect())
}

/// FD checks need a scalar target; reductions to one number go through mean
/// so per-element gradients stay comparable across shapes.
fn to_scalar(g: &mut Graph, x: NodeId) -> NodeId {
    g.mean(x, None)
}

/// Every differentiable operation and objective, checked against central
/// finite differences on seeded random inputs. The probe points avoid the
/// genuine kinks (clamp floors, threshold boundaries) where a subgradient
/// and a difference quotient legitimately disagree.
pub fn gradient_suite(seed: u64) -> Vec<CheckReport> {
    let mut rng = Stream::new(seed);
    let mut out = Vec::new();
    let eps = 1e-5;

    let a = rand_tensor(&[3, 4], -1.0, 1.0, &mut rng);
    let b = rand_tensor(&[3, 4], -1.0, 1.0, &mut rng);
    let s = rand_tensor(&[1, 1], 0.3, 0.9, &mut rng);
    let pos = rand_tensor(&[3, 4], 0.2, 1.8, &mut rng);

    let mut check = |name: &'static str, err: f64| out.push(CheckReport { name, err });

    check(
        "add",
        grad_check_multi(
            |g, ids| {
                let y = g.add(ids[0], ids[1]);
                to_scalar(g, y)
            },
            &[a.clone(), b.clone()],
            eps,
        ),
    );
    check(
        "sub",
        grad_check_multi(
            |g, ids| {
                let y = g.sub(ids[0], ids[1]);
                to_scalar(g, y)
            },
            &[a.clone(), b.clone()],
            eps,
        ),
    );
    check(
        "mul",
        grad_check_multi(
            |g, ids| {
                let y = g.mul(ids[0], ids[1]);
                to_scalar(g, y)
            },
            &[a.clone(), b.clone()],
            eps,
        ),
    );
    check(
        "div",
        grad_check_multi(
            |g, ids| {
                let y = g.div(ids[0], ids[1]);
                to_scalar(g, y)
            },
            &[a.clone(), pos.clone()],
            eps,
        ),
    );
    check(
        "broadcast_scalar",
        grad_check_multi(
            |g, ids| {
                let y = g.add(ids[0], ids[1]);
                let y = g.mul(y, ids[1]);
                to_scalar(g, y)
            },
            &[a.clone(), s.clone()],
            eps,
        ),
    );
    check(
        "exp",
        grad_check_multi(
            |g, ids| {
                let y = g.exp(ids[0]);
                to_scalar(g, y)
            },
            &[a.clone()],
            eps,
        ),
    );
    check(
        "log",
        grad_check_multi(
            |g, ids| {
                let y = g.log(ids[0]);
                to_scalar(g, y)
            },
            &[pos.clone()],
            eps,
        ),
    );
    check(
        "neg",
        grad_check_multi(
            |g, ids| {
                let y = g.neg(ids[0]);
                to_scalar(g, y)
            },
            &[a.clone()],
            eps,
        ),
    );
    check(
        "square",
        grad_check_multi(
            |g, ids| {
                let y = g.square(ids[0]);
                to_scalar(g, y)
            },
            &[a.clone()],
            eps,
        ),
    );
    check(
        "add_const",
        grad_check_multi(
            |g, ids| {
                let y = g.add_const(ids[0], 0.7);
                to_scalar(g, y)
            },
            &[a.clone()],
            eps,
        ),
    );
    check(
        "mul_const",
        grad_check_multi(
            |g, ids| {
                let y = g.mul_const(ids[0], -1.3);
                to_scalar(g, y)
            },
            &[a.clone()],
            eps,
        ),
    );
    check(
        "clamp_min",
        grad_check_multi(
            |g, ids| {
                let y = g.clamp_min(ids[0], 0.0);
                to_scalar(g, y)
            },
            // Probed away from the floor, where the kink would foil FD.
            &[rand_tensor(&[3, 4], 0.4, 1.4, &mut rng)],
            eps,
        ),
    );
    check(
        "matmul",
        grad_check_multi(
            |g, ids| {
                let y = g.matmul(ids[0], ids[1]);
                to_scalar(g, y)
            },
            &[rand_tensor(&[3, 4], -1.0, 1.0, &mut rng), rand_tensor(&[4, 2], -1.0, 1.0, &mut rng)],
            eps,
        ),
    );
    check(
        "reshape",
        grad_check_multi(
            |g, ids| {
                let y = g.reshape(ids[0], &[4, 3]);
                let y = g.square(y);
                to_scalar(g, y)
            },
            &[a.clone()],
            eps,
        ),
    );
    check(
        "transpose",
        grad_check_multi(
            |g, ids| {
                let y = g.transpose(ids[0]);
                let y = g.matmul(y, ids[1]);
                to_scalar(g, y)
            },
            &[a.clone(), rand_tensor(&[3, 2], -1.0, 1.0, &mut rng)],
            eps,
        ),
    );
    check(
        "concat_rows",
        grad_check_multi(
            |g, ids| {
                let y = g.concat_rows(&[ids[0], ids[1]]);
                let y = g.square(y);
                to_scalar(g, y)
            },
            &[a.clone(), rand_tensor(&[2, 4], -1.0, 1.0, &mut rng)],
            eps,
        ),
    );
    check(
        "slice_rows",
        grad_check_multi(
            |g, ids| {
                // Repeats exercise the scatter-add in the backward pass.
                let y = g.slice_rows(ids[0], &[2, 0, 2, 1]);
                let y = g.square(y);
                to_scalar(g, y)
            },
            &[a.clone()],
            eps,
        ),
    );
    check("sum_all", grad_check_multi(|g, ids| g.sum(ids[0], None), &[a.clone()], eps));
    check(
        "sum_axis",
        grad_check_multi(
            |g, ids| {
                let y = g.sum(ids[0], Some(1));
                let y = g.square(y);
                to_scalar(g, y)
            },
            &[a.clone()],
            eps,
        ),
    );
    check("mean_all", grad_check_multi(|g, ids| g.mean(ids[0], None), &[a.clone()], eps));
    check(
        "mean_axis",
        grad_check_multi(
            |g, ids| {
                let y = g.mean(ids[0], Some(0));
                let y = g.square(y);
                to_scalar(g, y)
            },
            &[a.clone()],
            eps,
        ),
    );
    check(
        "sigmoid",
        grad_check_multi(
            |g, ids| {
                let y = g.sigmoid(ids[0]);
                to_scalar(g, y)
            },
            &[a.clone()],
            eps,
        ),
    );
    check(
        "gelu",
        grad_check_multi(
            |g, ids| {
                let y = g.gelu(ids[0]);
                to_scalar(g, y)
            },
            &[a.clone()],
            eps,
        ),
    );
    check(
        "softmax",
        grad_check_multi(
            |g, ids| {
                let y = g.softmax(ids[0], 1);
                let y = g.square(y);
                to_scalar(g, y)
            },
            &[a.clone()],
            eps,
        ),
    );
    check(
        "layernorm",
        grad_check_multi(
            |g, ids| {
                let y = g.layernorm(ids[0], ids[1], ids[2], 1e-6);
                let y = g.square(y);
                to_scalar(g, y)
            },
            &[
                a.clone(),
                rand_tensor(&[4], 0.5, 1.5, &mut rng),
                rand_tensor(&[4], -0.5, 0.5, &mut rng),
            ],
            eps,
        ),
    );
    check(
        "scale_patch_rows",
        grad_check_multi(
            |g, ids| {
                let y = g.scale_patch_rows(ids[0], ids[1], 3);
                let y = g.square(y);
                to_scalar(g, y)
            },
            &[rand_tensor(&[6, 4], -1.0, 1.0, &mut rng), rand_tensor(&[2, 2], 0.1, 0.9, &mut rng)],
            eps,
        ),
    );
    check(
        "attention",
        grad_check_multi(
            |g, ids| {
                let y = g.attention(ids[0], ids[1], ids[2], 2, 3);
                let y = g.square(y);
                to_scalar(g, y)
            },
            &[
                rand_tensor(&[6, 4], -1.0, 1.0, &mut rng),
                rand_tensor(&[6, 4], -1.0, 1.0, &mut rng),
                rand_tensor(&[6, 4], -1.0, 1.0, &mut rng),
            ],
            eps,
        ),
    );

    // The objectives, each differentiated end to end.
    let grid = rand_tensor(&[4, 6], 0.0, 1.0, &mut rng);
    let target = normalize_target(&grid, TARGET_EPS).0;
    let mask = [1u8, 0, 0, 1];
    check(
        "loss_reconstruction",
        grad_check_multi(
            |g, ids| recon_loss(g, ids[0], &target, &mask).expect("mask hides rows"),
            &[rand_tensor(&[4, 6], -1.0, 1.0, &mut rng)],
            eps,
        ),
    );
    let z2 = rand_tensor(&[2, 4], 0.15, 0.85, &mut rng);
    let errs = rand_tensor(&[2, 4], 0.05, 1.0, &mut rng);
    check(
        "loss_curriculum",
        grad_check_multi(
            |g, ids| curriculum_loss(g, ids[0], ids[1], -0.6),
            &[errs.clone(), z2.clone()],
            eps,
        ),
    );
    check(
        "loss_gaussian",
        grad_check_multi(|g, ids| gaussian_loss(g, ids[0], 0.5, 0.12), &[z2.clone()], eps),
    );
    check(
        "loss_ratio",
        grad_check_multi(|g, ids| kl_ratio_loss(g, ids[0], 0.75), &[z2.clone()], eps),
    );
    check(
        "loss_diversity",
        grad_check_multi(|g, ids| diversity_loss(g, ids[0]), &[z2.clone()], eps),
    );
    let w = LossWeights::default();
    check(
        "loss_joint",
        grad_check_multi(
            |g, ids| {
                let cl = curriculum_loss(g, ids[0], ids[1], 0.4);
                let ga = gaussian_loss(g, ids[1], 0.5, 0.12);
                let kl = kl_ratio_loss(g, ids[1], 0.75);
                let dv = diversity_loss(g, ids[1]);
                crate::losses::joint_loss(g, cl, ga, kl, dv, &w).expect("finite toy inputs")
            },
            &[errs, z2],
            eps,
        ),
    );

    out
}
