use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{FlatGrad, Layout};

/// Below this squared norm the retain gradient carries no usable direction.
pub const DEGENERATE_NORM_SQ: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurgeryScope {
    /// One projection over the whole parameter vector.
    #[default]
    Global,
    /// Independent projection per parameter tensor.
    PerTensor,
}

fn project(gu: &[f64], gr: &[f64], lambda: f64, out: &mut [f64]) {
    let dot: f64 = gu.iter().zip(gr).map(|(a, b)| a * b).sum();
    let norm_sq: f64 = gr.iter().map(|b| b * b).sum();
    if dot >= 0.0 || norm_sq < DEGENERATE_NORM_SQ {
        out.copy_from_slice(gu);
        return;
    }
    let coef = lambda * (dot / norm_sq);
    for ((o, a), b) in out.iter_mut().zip(gu).zip(gr) {
        *o = a - coef * b;
    }
    if lambda >= 1.0 {
        remove_rounding_conflict(out, gr, norm_sq);
    }
}

/// After a full projection any remaining opposition to `gr` is rounding error. Project it
/// away again; if `out` is then still opposed it is nothing but rounding residue (the
/// inputs were anti-parallel) and the exact answer is zero.
fn remove_rounding_conflict(out: &mut [f64], gr: &[f64], norm_sq: f64) {
    let aligned = |out: &[f64]| {
        let d: f64 = out.iter().zip(gr).map(|(a, b)| a * b).sum();
        let n: f64 = out.iter().map(|a| a * a).sum::<f64>().sqrt();
        (d, d >= -1e-9 * n * norm_sq.sqrt())
    };
    for _ in 0..2 {
        let (d, ok) = aligned(out);
        if ok {
            return;
        }
        let c = d / norm_sq;
        out.iter_mut().zip(gr).for_each(|(o, b)| *o -= c * b);
    }
    if !aligned(out).1 {
        out.fill(0.0);
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    Ok(())
}

/// Removes `lambda` times the component of `gu` that opposes `gr`. Gradients that do not
/// conflict (`gu . gr >= 0`) are returned unchanged.
pub fn surgery(gu: &FlatGrad, gr: &FlatGrad, lambda: f64) -> Result<FlatGrad> {
    gu.check_compatible(gr)?;
    check_lambda(lambda)?;
    let mut out = vec![0.0; gu.len()];
    project(&gu.values, &gr.values, lambda, &mut out);
    Ok(FlatGrad::new(out, gu.layout_hash))
}

/// [`surgery`] applied separately to each tensor of `layout`.
pub fn surgery_per_tensor(
    gu: &FlatGrad,
    gr: &FlatGrad,
    lambda: f64,
    layout: &Layout,
) -> Result<FlatGrad> {
    gu.check_compatible(gr)?;
    check_lambda(lambda)?;
    if layout.hash() != gu.layout_hash || layout.total() != gu.len() {
        return Err(Error::Layout(
            "layout does not describe these gradients".into(),
        ));
    }
    let mut out = vec![0.0; gu.len()];
    for e in layout.entries() {
        let r = e.offset..e.offset + e.len();
        project(
            &gu.values[r.clone()],
            &gr.values[r.clone()],
            lambda,
            &mut out[r],
        );
    }
    Ok(FlatGrad::new(out, gu.layout_hash))
}

pub fn apply_surgery(
    gu: &FlatGrad,
    gr: &FlatGrad,
    lambda: f64,
    scope: SurgeryScope,
    layout: &Layout,
) -> Result<FlatGrad> {
    match scope {
        SurgeryScope::Global => surgery(gu, gr, lambda),
        SurgeryScope::PerTensor => surgery_per_tensor(gu, gr, lambda, layout),
    }
}
