use super::{Graph, NodeId, Result, Tensor};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares analytic gradients of a scalar-valued graph against central
/// finite differences, in 64-bit.
///
/// `build` receives a fresh graph plus one leaf per entry of `inputs` and
/// returns the scalar root.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    grad_check_sampled(build, inputs, step, usize::MAX)
}

/// Like [`grad_check`] but probes at most `per_input` evenly spaced
/// elements of each input.
pub fn grad_check_sampled<F>(
    build: F,
    inputs: &[Tensor<f64>],
    step: f64,
    per_input: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids = vals
            .iter()
            .map(|t| g.leaf(t.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let root = build(&mut g, &ids)?;
        Ok(g.value(root).data()[0])
    };

    let mut g = Graph::new();
    let ids = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let root = build(&mut g, &ids)?;
    let grads = g.backward(root)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (ii, &id) in ids.iter().enumerate() {
        let analytic = grads.get_or_zeros(id, &inputs[ii]);
        let len = inputs[ii].len();
        let stride = len.div_ceil(per_input.max(1)).max(1);
        for e in (0..len).step_by(stride) {
            let orig = inputs[ii].data()[e];
            work[ii].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[ii].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[ii].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (ii, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
