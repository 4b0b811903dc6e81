//! Finite-difference verification of reverse-mode gradients.
//!
//! Central differences of a freshly rebuilt forward pass are compared with
//! the gradients that `backward` produces, so the check stays independent of
//! the backward implementation it verifies.

use super::{Graph, LogMode, NodeId, Tensor};

/// Max over all inputs and coordinates of
/// |analytic − numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check_multi<F>(build: F, inputs: &[Tensor], eps: f64) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let forward = |points: &[Tensor]| -> f64 {
        let mut g = Graph::new(LogMode::Strict);
        let ids: Vec<NodeId> = points.iter().map(|t| g.leaf(t, false)).collect();
        let y = build(&mut g, &ids);
        g.value(y)
    };

    // One analytic pass with every input trainable.
    let mut g = Graph::new(LogMode::Strict);
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t, true)).collect();
    let y = build(&mut g, &ids);
    assert_eq!(g.data(y).len(), 1, "grad_check target must be scalar, got {:?}", g.shape(y));
    g.backward(y);

    let mut worst = 0.0f64;
    let mut points: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let zero_grad;
        let analytic: Vec<f64> = match g.grad(ids[which]) {
            Some(a) => a.to_vec(),
            None => {
                zero_grad = vec![0.0; input.numel()];
                zero_grad
            }
        };
        for i in 0..input.numel() {
            let orig = points[which].data[i];
            points[which].data[i] = orig + eps;
            let hi = forward(&points);
            points[which].data[i] = orig - eps;
            let lo = forward(&points);
            points[which].data[i] = orig;
            let numeric = (hi - lo) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

/// Single-input convenience wrapper.
pub fn grad_check<F>(build: F, input: &Tensor, eps: f64) -> f64
where
    F: Fn(&mut Graph, NodeId) -> NodeId,
{
    grad_check_multi(|g, ids| build(g, ids[0]), std::slice::from_ref(input), eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_op_scores_near_zero() {
        let x = Tensor::from_vec(&[3], vec![0.1, -0.4, 0.7]);
        let err = grad_check(
            |g, x| {
                let e = g.exp(x);
                g.sum(e, None)
            },
            &x,
            1e-5,
        );
        assert!(err > 0.0, "finite differences never agree bit-exactly");
        assert!(err < 1e-8, "exp rel err {err}");
    }

    #[test]
    fn disagreement_is_reported_not_hidden() {
        // clamp_min evaluated exactly at its floor: the subgradient says 1
        // but central differences see the kink and report 0.5, so the checker
        // must flag a large relative error.
        let x = Tensor::from_vec(&[1], vec![0.0]);
        let err = grad_check(
            |g, x| {
                let c = g.clamp_min(x, 0.0);
                g.sum(c, None)
            },
            &x,
            1e-5,
        );
        assert!(err > 0.3, "kink mismatch must surface, got {err}");
    }
}
