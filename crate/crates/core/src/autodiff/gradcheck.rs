use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a − n| / max(1e-8, |a| + |n|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±eps probes land on different ReLU pieces. The
    /// central difference is meaningless across a kink, so they are skipped.
    pub excluded: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("grad_check objective evaluated to {v}")));
    }
    Ok((v, g.relu_pattern()))
}

/// Compares reverse-mode gradients of `f` against central differences.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    g.backward(loss)?;
    let base_pattern = g.relu_pattern();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v)).collect();
    drop(g);

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, excluded: 0 };
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let orig = p.data()[j];
            probe[pi].data_mut()[j] = orig + eps;
            let (plus, pat_plus) = evaluate(&f, &probe)?;
            probe[pi].data_mut()[j] = orig - eps;
            let (minus, pat_minus) = evaluate(&f, &probe)?;
            probe[pi].data_mut()[j] = orig;
            if pat_plus != base_pattern || pat_minus != base_pattern {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[j];
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient of param {pi}[{j}]")));
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
