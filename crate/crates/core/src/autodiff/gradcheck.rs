//! Central-difference gradient verification in 64-bit precision.

use rand::seq::index::sample;
use rand::Rng;

use super::graph::{Graph, Var};
use super::param::{GroupSet, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Relative error used throughout: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// One compared coordinate.
#[derive(Debug, Clone, Copy)]
pub struct GradSample {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_err(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: for<'p> Fn(&mut Graph<'p, f64>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

fn compare<F>(
    store: &ParamStore<f64>,
    eps: f64,
    f: &F,
    coords: &[(ParamId, usize)],
) -> Result<Vec<GradSample>>
where
    F: for<'p> Fn(&mut Graph<'p, f64>) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss, GroupSet::all())?
    };
    let mut probe = store.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &(id, index) in coords {
        let orig = probe.value(id).data()[index];
        probe.get_mut(id).value.data_mut()[index] = orig + eps;
        let plus = eval(&probe, f)?;
        probe.get_mut(id).value.data_mut()[index] = orig - eps;
        let minus = eval(&probe, f)?;
        probe.get_mut(id).value.data_mut()[index] = orig;
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[index]);
        out.push(GradSample {
            param: id,
            index,
            analytic,
            numeric: (plus - minus) / (2.0 * eps),
        });
    }
    Ok(out)
}

/// Max relative error between the analytic gradient and central differences
/// over every scalar of every parameter in `store`.
pub fn grad_check<F>(store: &ParamStore<f64>, eps: f64, f: F) -> Result<f64>
where
    F: for<'p> Fn(&mut Graph<'p, f64>) -> Result<Var>,
{
    let coords: Vec<_> = store
        .iter()
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i)))
        .collect();
    let samples = compare(store, eps, &f, &coords)?;
    Ok(samples.iter().map(GradSample::rel_err).fold(0.0, f64::max))
}

/// Like [`grad_check`] but over `n` coordinates drawn uniformly without
/// replacement, returning every comparison.
pub fn grad_check_sampled<F, R>(
    store: &ParamStore<f64>,
    eps: f64,
    n: usize,
    rng: &mut R,
    f: F,
) -> Result<Vec<GradSample>>
where
    F: for<'p> Fn(&mut Graph<'p, f64>) -> Result<Var>,
    R: Rng,
{
    let all: Vec<_> = store
        .iter()
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i)))
        .collect();
    let picked: Vec<_> = sample(rng, all.len(), n.min(all.len()))
        .into_iter()
        .map(|i| all[i])
        .collect();
    compare(store, eps, &f, &picked)
}
