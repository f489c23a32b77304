//! Central finite-difference gradient oracle.

use crate::error::NumericsError;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Flat indices whose relative error exceeds the tolerance.
    pub flagged: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged.is_empty())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)` for every scalar of every parameter.
///
/// `f` records the loss on the graph it is given and returns its handle. The
/// store's gradient accumulators are overwritten; parameter values are left
/// exactly as they were.
pub fn finite_diff_check<E, F>(
    store: &mut ParamStore,
    f: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    E: From<NumericsError>,
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, E>,
{
    finite_diff_check_where(store, f, eps, tol, |_| true)
}

/// Like [`finite_diff_check`] but only probes parameters whose name passes
/// `select`.
pub fn finite_diff_check_where<E, F>(
    store: &mut ParamStore,
    mut f: F,
    eps: f64,
    tol: f64,
    select: impl Fn(&str) -> bool,
) -> Result<GradCheckReport, E>
where
    E: From<NumericsError>,
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, E>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(NumericsError::InvalidArgument(format!("eps must be positive, got {eps}")).into());
    }
    store.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss, store)?;

    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.value(loss)
            .item()
            .ok_or_else(|| NumericsError::NonScalarLoss { shape: g.shape(loss).to_vec() }.into())
    };

    let mut params = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        if !select(store.name(id)) {
            continue;
        }
        let analytic = store.grad(id).data().to_vec();
        let original = store.value(id).data().to_vec();
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            entries: original.len(),
            max_rel_error: 0.0,
            flagged: Vec::new(),
        };
        for i in 0..original.len() {
            let mut probe = original.clone();
            probe[i] = original[i] + eps;
            store.value_mut(id).assign(&probe)?;
            let plus = eval(store);
            probe[i] = original[i] - eps;
            store.value_mut(id).assign(&probe)?;
            let minus = eval(store);
            store.value_mut(id).assign(&original)?;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let err = relative_error(analytic[i], numeric);
            check.max_rel_error = check.max_rel_error.max(err);
            if err > tol {
                check.flagged.push(i);
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { eps, tol, params })
}
