//! Central finite-difference gradient checks.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::Result;

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub relative_error: f64,
    pub coordinates: usize,
    /// Parameter with the largest relative error and that error.
    pub worst: Option<(String, f64)>,
}

/// Compares tape gradients of `forward`'s scalar output against central
/// differences, parameter by parameter. At most `max_per_param` evenly spaced
/// coordinates are probed in each parameter.
pub fn check_params(
    store: &mut ParamStore<f64>,
    h: f64,
    max_per_param: usize,
    mut forward: impl FnMut(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
) -> Result<GradCheck> {
    store.zero_grad();
    let (mut g, loss) = forward(store)?;
    g.backward(loss)?;
    g.accumulate_param_grads(store);

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut worst: Option<(String, f64)> = None;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).value.len();
        let stride = (n / max_per_param.max(1)).max(1);
        let mut a_local = Vec::new();
        let mut n_local = Vec::new();
        for j in (0..n).step_by(stride).take(max_per_param) {
            let orig = store.get(id).value.data()[j];
            let mut eval = |v: f64, store: &mut ParamStore<f64>| -> Result<f64> {
                store.get_mut(id).value.data_mut()[j] = v;
                let (g, l) = forward(store)?;
                g.value(l).item()
            };
            let up = eval(orig + h, store)?;
            let down = eval(orig - h, store)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            a_local.push(store.get(id).grad.data()[j]);
            n_local.push((up - down) / (2.0 * h));
        }
        let err = relative_error(&a_local, &n_local);
        if worst.as_ref().map_or(true, |(_, w)| err > *w) {
            worst = Some((store.get(id).name.clone(), err));
        }
        analytic.extend(a_local);
        numeric.extend(n_local);
    }
    store.zero_grad();
    Ok(GradCheck { relative_error: relative_error(&analytic, &numeric), coordinates: analytic.len(), worst })
}
