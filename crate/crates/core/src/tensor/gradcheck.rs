use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub name: String,
    /// `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, 1e-8)`
    pub rel_err: f64,
    pub max_abs_diff: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub h: f64,
    pub tol: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradcheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

/// Compares reverse-mode gradients of the scalar `output` against central
/// differences for every leaf in `inputs`.
///
/// The graph is replayed for each perturbation and left at its original
/// leaf values afterwards.
pub fn gradcheck(
    graph: &mut Graph,
    output: Var,
    inputs: &[Var],
    h: f64,
    tol: f64,
) -> Result<GradcheckReport> {
    if !(h > 0.0 && tol > 0.0) {
        return Err(Error::Contract(format!(
            "gradcheck needs h > 0 and tol > 0, got h={h}, tol={tol}"
        )));
    }
    let analytic = graph.gradient(output, inputs)?;
    let mut entries = Vec::with_capacity(inputs.len());
    for (&input, analytic) in inputs.iter().zip(&analytic) {
        let numeric = numeric_gradient(graph, output, input, h)?;
        let scale = analytic
            .data()
            .iter()
            .chain(numeric.data())
            .fold(1e-8, |m: f64, v| m.max(v.abs()));
        let max_abs_diff = analytic.max_abs_diff(&numeric);
        let rel_err = max_abs_diff / scale;
        entries.push(GradcheckEntry {
            name: graph
                .name_of(input)
                .map_or_else(|| format!("#{}", input.index()), str::to_string),
            rel_err,
            max_abs_diff,
            passed: rel_err <= tol,
        });
    }
    graph.recompute()?;
    Ok(GradcheckReport { h, tol, entries })
}

/// Central-difference gradient of a scalar node with respect to one leaf.
pub(crate) fn numeric_gradient(graph: &mut Graph, output: Var, input: Var, h: f64) -> Result<Tensor> {
    let base = graph.value(input).clone();
    let mut grad = Tensor::zeros(base.shape());
    for i in 0..base.len() {
        let x0 = base.data()[i];
        graph.leaf_data_mut(input)[i] = x0 + h;
        graph.recompute()?;
        let fp = graph.value(output).item()?;
        graph.leaf_data_mut(input)[i] = x0 - h;
        graph.recompute()?;
        let fm = graph.value(output).item()?;
        graph.leaf_data_mut(input)[i] = x0;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}
