//! Central finite-difference gradient checking.
//!
//! The caller supplies analytic gradients and a deterministic loss closure;
//! this module perturbs every scalar parameter by ±h and compares. Relative
//! error uses `|a - fd| / max(|a|, |fd|, REL_FLOOR)`, so entries far below
//! the gradient scale of the model are compared absolutely against
//! `tol * REL_FLOOR` instead of drowning in finite-difference noise.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ndgrad::ModelParams;

/// Denominator floor for relative error; see the module docs.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct EntryCheck {
    pub name: String,
    /// Flat index of the worst scalar within the entry.
    pub worst_index: usize,
    pub max_rel_err: f64,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<EntryCheck>,
    pub max_rel_err: f64,
    /// Entries whose max relative error exceeded the tolerance.
    pub flagged: Vec<String>,
    /// Parameter names where a non-finite analytic or numeric value appeared.
    pub non_finite: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty() && self.non_finite.is_empty()
    }

    pub fn worst(&self) -> Option<&EntryCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `analytic` against central differences of `loss_fn` around `params`.
///
/// `loss_fn` must be deterministic; it is re-evaluated 2 times per scalar
/// parameter. Work is split over a thread pool in contiguous index chunks.
pub fn gradcheck<F>(
    loss_fn: F,
    params: &ModelParams,
    analytic: &ModelParams,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ModelParams) -> Result<f64> + Sync,
{
    if h <= 0.0 || tol <= 0.0 {
        return Err(Error::InvalidConfig(
            "gradcheck requires positive h and tol".into(),
        ));
    }
    if params.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradcheck: {} parameter entries vs {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }

    // (entry, flat index) pairs, chunked so each task clones params once.
    let mut coords = Vec::new();
    for e in 0..params.len() {
        let (_, t) = params.tensor_at(e);
        for i in 0..t.len() {
            coords.push((e, i));
        }
    }
    let chunk = 512.max(coords.len() / 64).max(1);

    let results: Vec<Result<Vec<(usize, usize, f64, f64)>>> = coords
        .par_chunks(chunk)
        .map(|chunk| {
            let mut local = params.clone();
            let mut out = Vec::with_capacity(chunk.len());
            for &(e, i) in chunk {
                let orig = local.tensor_at(e).1.data()[i];
                local.tensor_at_mut(e).data_mut()[i] = orig + h;
                let up = loss_fn(&local)?;
                local.tensor_at_mut(e).data_mut()[i] = orig - h;
                let down = loss_fn(&local)?;
                local.tensor_at_mut(e).data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic.tensor_at(e).1.data()[i];
                out.push((e, i, a, fd));
            }
            Ok(out)
        })
        .collect();

    let mut entries: Vec<EntryCheck> = params
        .iter()
        .map(|(n, _)| EntryCheck {
            name: n.to_string(),
            worst_index: 0,
            max_rel_err: 0.0,
            analytic: 0.0,
            numeric: 0.0,
        })
        .collect();
    let mut non_finite = Vec::new();

    for res in results {
        for (e, i, a, fd) in res? {
            let name = &entries[e].name;
            if !a.is_finite() || !fd.is_finite() {
                if !non_finite.contains(name) {
                    non_finite.push(name.clone());
                }
                continue;
            }
            let rel = relative_error(a, fd);
            if rel > entries[e].max_rel_err {
                entries[e].max_rel_err = rel;
                entries[e].worst_index = i;
                entries[e].analytic = a;
                entries[e].numeric = fd;
            }
        }
    }

    let max_rel_err = entries.iter().fold(0.0f64, |m, e| m.max(e.max_rel_err));
    let flagged = entries
        .iter()
        .filter(|e| e.max_rel_err > tol)
        .map(|e| e.name.clone())
        .collect();

    Ok(GradCheckReport {
        entries,
        max_rel_err,
        flagged,
        non_finite,
    })
}
