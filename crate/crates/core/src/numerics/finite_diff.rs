use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Central-difference estimate `(f(θ+h) − f(θ−h)) / 2h` for every scalar of
/// every parameter in `store`.
pub fn finite_diff_grad<F>(f: F, store: &mut ParamStore, h: f64) -> Result<Gradients>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    finite_diff_grad_for(f, store, h, &ids)
}

/// As [`finite_diff_grad`] but only for `ids`. Each perturbed coordinate is
/// restored bit-exactly before moving on.
pub fn finite_diff_grad_for<F>(
    mut f: F,
    store: &mut ParamStore,
    h: f64,
    ids: &[ParamId],
) -> Result<Gradients>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut out = Gradients::new(store.len());
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        let mut est = Tensor::zeros(&shape);
        for k in 0..est.numel() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let plus = f(store)?;
            store.value_mut(id).data_mut()[k] = orig - h;
            let minus = f(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            est.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        out.set(id, est);
    }
    Ok(out)
}

/// Largest coordinate-wise relative error between two gradient estimates.
///
/// Each coordinate is compared as `|a − b| / max(|a|, |b|, floor)` where the
/// floor is `1e-3` times the largest magnitude in either tensor. Coordinates
/// whose true gradient is essentially zero are then judged against the scale
/// of the tensor rather than against finite-difference round-off.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    let floor = 1e-3 * scale;
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}
