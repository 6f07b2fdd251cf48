//! Latent-space editing: attribute moves along probe directions, identity
//! interpolation and identity swap.

use serde::{Deserialize, Serialize};

use crate::analytics::{ProbeEntry, ProbeModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Branch, D2AEModel, FeaturePair};

/// Half-width of the allowed alpha range, in units of the branch's running
/// standard deviation projected on the direction.
pub const ALPHA_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeEdit {
    pub attribute: String,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityTarget {
    pub f_t: Vec<f32>,
    pub beta: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub edits: Vec<AttributeEdit>,
    pub identity: Option<IdentityTarget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedEdit {
    pub attribute: String,
    pub branch: Branch,
    pub requested: f64,
    pub applied: f64,
    pub alpha_max: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub edits: Vec<AppliedEdit>,
    pub beta: Option<f64>,
}

fn branch_of(entry: &ProbeEntry) -> Result<Branch> {
    entry.branch.ok_or_else(|| {
        Error::invalid(format!(
            "probe '{}' was trained on concatenated features and cannot drive edits",
            entry.attribute
        ))
    })
}

/// `3 * sqrt(w^T diag(sigma^2) w)` with the branch's running sigma.
pub fn alpha_max(model: &D2AEModel<f32>, entry: &ProbeEntry) -> Result<f64> {
    let sigma = model.running_sigma(branch_of(entry)?);
    if sigma.len() != entry.w.len() {
        return Err(Error::shape(
            "alpha_max",
            format!("direction {} vs branch {}", entry.w.len(), sigma.len()),
        ));
    }
    let var: f64 = entry.w.iter().zip(sigma).map(|(w, &s)| (w * f64::from(s)).powi(2)).sum();
    Ok(ALPHA_SIGMAS * var.sqrt())
}

/// `f* = f + sum_n alpha_n w_n` on each probe's branch, alphas clamped to
/// the confidence bound. Unknown attributes are rejected before any change.
pub fn edit_attribute(
    model: &D2AEModel<f32>,
    fp: &FeaturePair<f32>,
    probes: &ProbeModel,
    edits: &[AttributeEdit],
) -> Result<(FeaturePair<f32>, Vec<AppliedEdit>)> {
    let mut plan = Vec::with_capacity(edits.len());
    for e in edits {
        let entry = probes
            .get(&e.attribute)
            .ok_or_else(|| Error::invalid(format!("unknown attribute '{}'", e.attribute)))?;
        if !e.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha for '{}' is not finite", e.attribute)));
        }
        let branch = branch_of(entry)?;
        if entry.w.len() != fp.branch(branch).len() {
            return Err(Error::shape(
                "edit_attribute",
                format!("direction {} vs feature {}", entry.w.len(), fp.branch(branch).len()),
            ));
        }
        let bound = alpha_max(model, entry)?;
        let applied = e.alpha.clamp(-bound, bound);
        let clamped = applied != e.alpha;
        if clamped {
            log::warn!("alpha {} for '{}' clamped to {applied}", e.alpha, e.attribute);
        }
        plan.push((
            entry,
            AppliedEdit {
                attribute: e.attribute.clone(),
                branch,
                requested: e.alpha,
                applied,
                alpha_max: bound,
                clamped,
            },
        ));
    }
    // offsets accumulate in f64 and are added once, so the result does not
    // depend on the order of the edits
    let mut offset_t = vec![0.0f64; fp.f_t.len()];
    let mut offset_p = vec![0.0f64; fp.f_p.len()];
    let mut touched = [false, false];
    for (entry, a) in &plan {
        let (off, k) = match a.branch {
            Branch::T => (&mut offset_t, 0),
            Branch::P => (&mut offset_p, 1),
        };
        touched[k] = true;
        for (o, w) in off.iter_mut().zip(&entry.w) {
            *o += a.applied * w;
        }
    }
    let shift = |f: &[f32], off: &[f64]| -> Vec<f32> { f.iter().zip(off).map(|(&v, o)| (f64::from(v) + o) as f32).collect() };
    let out = FeaturePair::new(
        if touched[0] { shift(&fp.f_t, &offset_t) } else { fp.f_t.clone() },
        if touched[1] { shift(&fp.f_p, &offset_p) } else { fp.f_p.clone() },
    );
    Ok((out, plan.into_iter().map(|(_, a)| a).collect()))
}

/// `(beta f_T^A + (1 - beta) f_T^B, f_P^A)`. The endpoints return the source
/// vectors exactly.
pub fn identity_interpolate(fp_a: &FeaturePair<f32>, f_t_b: &[f32], beta: f64) -> Result<FeaturePair<f32>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    if f_t_b.len() != fp_a.f_t.len() {
        return Err(Error::shape(
            "identity_interpolate",
            format!("{} vs {}", fp_a.f_t.len(), f_t_b.len()),
        ));
    }
    let f_t = if beta == 1.0 {
        fp_a.f_t.clone()
    } else if beta == 0.0 {
        f_t_b.to_vec()
    } else {
        fp_a.f_t
            .iter()
            .zip(f_t_b)
            .map(|(&a, &b)| (beta * f64::from(a) + (1.0 - beta) * f64::from(b)) as f32)
            .collect()
    };
    Ok(FeaturePair::new(f_t, fp_a.f_p.clone()))
}

/// `(f_T^B, f_P^A)`.
pub fn identity_swap(fp_a: &FeaturePair<f32>, fp_b: &FeaturePair<f32>) -> Result<FeaturePair<f32>> {
    if fp_a.f_t.len() != fp_b.f_t.len() {
        return Err(Error::shape("identity_swap", format!("{} vs {}", fp_a.f_t.len(), fp_b.f_t.len())));
    }
    Ok(FeaturePair::new(fp_b.f_t.clone(), fp_a.f_p.clone()))
}

/// Encode, apply the request, decode.
pub fn render_edit(
    model: &D2AEModel<f32>,
    probes: &ProbeModel,
    image: &Tensor<f32>,
    req: &EditRequest,
) -> Result<(Tensor<f32>, Provenance)> {
    let fp = model.encode(image)?;
    let (fp, edits) = edit_attribute(model, &fp, probes, &req.edits)?;
    let (fp, beta) = match &req.identity {
        Some(t) => (identity_interpolate(&fp, &t.f_t, t.beta)?, Some(t.beta)),
        None => (fp, None),
    };
    Ok((model.decode(&fp)?, Provenance { edits, beta }))
}
