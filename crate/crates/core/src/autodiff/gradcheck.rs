use super::{AutodiffError, Graph, ParamStore, Var};

/// Denominator floor for relative errors, so that gradients that are zero
/// up to roundoff do not blow the ratio up.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub n_coords: usize,
    pub tol: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares autodiff gradients of a scalar loss against central differences
/// for every scalar of `store`.
///
/// `loss` builds the loss into the graph it is handed; it must be
/// deterministic, so any noise has to be fixed outside the closure.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    loss: F,
    step: f64,
    tol: f64,
) -> Result<FiniteDiffReport, AutodiffError>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let root = loss(store, &mut g)?;
    let analytic = g.backward(root)?.for_store(store);

    let eval = |s: &ParamStore| -> Result<f64, AutodiffError> {
        let mut g = Graph::no_grad();
        let root = loss(s, &mut g)?;
        Ok(g.value(root).item())
    };

    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        worst: None,
        n_coords: 0,
        tol,
        passed: true,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + step;
            let up = eval(store);
            store.get_mut(id).data_mut()[k] = orig - step;
            let down = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up? - down?) / (2.0 * step);
            let err = relative_error(analytic[id.index()].data()[k], numeric);
            report.n_coords += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
