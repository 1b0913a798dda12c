use crate::{Graph, ParamStore, Result, Var};

/// Denominator floor of the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[flat index]` of the worst entry.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compare reverse-mode gradients against central differences.
///
/// `loss_fn` builds a fresh graph from the store and returns it with its
/// scalar loss. Every element of every parameter is perturbed by `±eps`.
/// The relative error of one entry is `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn grad_check<F>(store: &mut ParamStore<f64>, eps: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    let (g, loss) = loss_fn(store)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|p| {
            let a = grads
                .params()
                .find(|(n, _)| *n == p.name)
                .and_then(|(_, t)| t.map(|t| t.data().to_vec()))
                .unwrap_or_else(|| vec![0.0; p.value().numel()]);
            (p.name.clone(), a)
        })
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (name, a) in analytic {
        for (i, &ai) in a.iter().enumerate() {
            let orig = store.value(&name)?.data()[i];
            store.get_mut(&name)?.value_mut().data_mut()[i] = orig + eps;
            let (g, l) = loss_fn(store)?;
            let plus = g.value(l).item();
            store.get_mut(&name)?.value_mut().data_mut()[i] = orig - eps;
            let (g, l) = loss_fn(store)?;
            let minus = g.value(l).item();
            store.get_mut(&name)?.value_mut().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let denom = ai.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let rel = (ai - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{i}]");
                report.analytic = ai;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
