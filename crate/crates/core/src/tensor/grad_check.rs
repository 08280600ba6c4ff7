//! Finite-difference gradient oracle.
//!
//! The oracle re-evaluates the checked function forward-only at perturbed
//! inputs, so it never depends on the backward implementation it validates.

use super::{GradGraph, Node, Tensor, TensorError};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub tol: f64,
    /// (input index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Check the gradient of a scalar-valued tensor function at `inputs`.
///
/// `build` must construct the same computation every call; it is invoked once
/// for the analytic pass and `2 * element_count` times for the central
/// differences (step `h`, i.e. `(f(x+h) - f(x-h)) / 2h` per element).
/// Relative error per element is `|a - n| / max(|a|, |n|, 1)`.
pub fn grad_check<F>(
    build: F,
    inputs: &[Tensor],
    tol: f64,
    step: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut GradGraph, &[Node]) -> Result<Node, TensorError>,
{
    // Analytic gradients.
    let mut graph = GradGraph::new();
    let nodes: Vec<Node> = inputs
        .iter()
        .map(|t| graph.leaf(t.clone(), true))
        .collect();
    let root = build(&mut graph, &nodes)?;
    let root_shape = graph.value(root).shape().to_vec();
    if graph.value(root).len() != 1 {
        return Err(TensorError::NonScalarRoot(root_shape));
    }
    graph.backward(root)?;
    let analytic: Vec<Tensor> = nodes
        .iter()
        .zip(inputs)
        .map(|(&n, t)| {
            graph
                .grad(n)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = GradGraph::new();
        let ns: Vec<Node> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let r = build(&mut g, &ns)?;
        Ok(g.value(r).scalar_value())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        tol,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let original = input.data()[idx];
            work[which].data_mut()[idx] = original + step;
            let plus = eval(&work)?;
            work[which].data_mut()[idx] = original - step;
            let minus = eval(&work)?;
            work[which].data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[which].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((which, idx, a, numeric));
            }
        }
    }
    Ok(report)
}
