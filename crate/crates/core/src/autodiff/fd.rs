//! Central finite-difference verification of analytic gradients.

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Compares the analytic gradient of a scalar-valued graph against central
/// finite differences, returning the worst relative error.
///
/// `build` must construct the same (deterministic) graph from any input
/// values; inputs are registered as gradient leaves in order.
pub fn fd_check<F>(build: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g: Graph<f64> = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.input(t.clone(), true)).collect();
        let out = build(&mut g, &ids)?;
        if g.value(out).numel() != 1 {
            return Err(Error::invalid("fd_check expects a scalar output"));
        }
        Ok(g.scalar_value(out))
    };

    // Analytic gradients from one tape pass.
    let mut g: Graph<f64> = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = build(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[k])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for e in 0..input.numel() {
            let orig = work[k].data[e];
            work[k].data[e] = orig + h;
            let fp = eval(&work)?;
            work[k].data[e] = orig - h;
            let fm = eval(&work)?;
            work[k].data[e] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[e];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_away_from_kink() {
        let input = Tensor::new(vec![4], vec![1.5, -2.0, 0.7, -0.3]).unwrap();
        let target = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let err = fd_check(
            |g, ids| {
                let y = g.leaky_relu(ids[0], 0.2);
                g.mse_loss(y, &target)
            },
            &[input],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }
}
