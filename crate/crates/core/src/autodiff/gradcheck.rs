//! Central finite-difference gradient check.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::Result;

/// Compares reverse-mode gradients of a scalar function against central
/// differences, elementwise over every input tensor, and returns the worst
/// relative error `|a - b| / max(|a|, |b|, 1e-8)`.
///
/// `f` receives a fresh graph and one node per input tensor and returns
/// the loss node.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let ids = inputs
        .iter()
        .map(|t| graph.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut graph, &ids)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| graph.grad(id).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids = tensors
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut g, &ids)?;
        Ok(g.value(loss).data()[0])
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for t in 0..inputs.len() {
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[t][i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_is_near_exact() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.7 - 1.1);
        let err = finite_diff_check(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                g.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_on_random_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::from_fn(&[3, 5], |_| rng.random_range(-2.0..2.0));
        let err = finite_diff_check(
            |g, ids| g.cross_entropy(ids[0], &[Some(4), Some(0), Some(2)]),
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let inputs = [rand(&[5, 4]), rand(&[4, 4]), rand(&[4]), rand(&[4]), rand(&[5, 3])];
        let segs = [
            crate::autodiff::Segment { start: 0, len: 2 },
            crate::autodiff::Segment { start: 2, len: 3 },
        ];
        let err = finite_diff_check(
            |g, ids| {
                let ln = g.layer_norm(ids[0], ids[2], ids[3], 1e-5)?;
                let q = g.matmul_t(ln, ids[1])?;
                let act = g.gelu(q)?;
                let att = g.causal_attention(q, act, ln, 2, &segs)?;
                let pooled = g.segment_mean(att, &segs)?;
                let gate = g.softmax(ids[4], 1)?;
                let scaled = g.scale_rows_by_column(pooled, gate, 1)?;
                let mixed = g.add(scaled, att)?;
                let ce = g.cross_entropy(mixed, &[Some(0), None, Some(3), Some(1), Some(2)])?;
                let route = g.nll_of_probs(gate, &[Some(0), Some(1), None, Some(2), Some(0)])?;
                let route = g.scale(route, 0.3)?;
                g.add(ce, route)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn softmax_leading_axis_gradient() {
        let x = Tensor::from_fn(&[3, 2], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(&[3, 2], |i| (i as f64 * 1.3).cos());
        let err = finite_diff_check(
            |g, ids| {
                let s = g.softmax(ids[0], 0)?;
                let p = g.mul(s, ids[1])?;
                g.sum(p)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }
}
