use super::{DiffError, Tensor};

/// Denominator floor for the relative error. Central differences of an O(1)
/// loss carry about 1e-10 of round-off, so coordinates whose true gradient is
/// smaller than this are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − fd| / max(|analytic|, |fd|, [`REL_FLOOR`])
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn coords(&self) -> usize {
        self.analytic.len()
    }
}

/// Compares the analytic gradient of `f` at `point` against central finite
/// differences with step `eps`.
///
/// `f` returns the scalar value and its analytic gradient (flattened like
/// `point`). It must be deterministic: any noise must be frozen by the caller.
pub fn grad_check<F, E>(mut f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport, E>
where
    F: FnMut(&Tensor) -> Result<(f64, Vec<f64>), E>,
    E: From<DiffError>,
{
    if !(eps > 0.0) {
        return Err(DiffError::BadStep(eps).into());
    }
    let (v0, analytic) = f(point)?;
    if !v0.is_finite() {
        return Err(DiffError::NonFiniteProbe {
            coord: 0,
            detail: "value at the base point".into(),
        }
        .into());
    }
    if analytic.len() != point.len() {
        return Err(DiffError::DataLength {
            rows: point.rows(),
            cols: point.cols(),
            len: analytic.len(),
        }
        .into());
    }
    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.clone();
    let mut max_rel = 0.0;
    let mut worst = 0;
    for i in 0..point.len() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + eps;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = x - eps;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(DiffError::NonFiniteProbe {
                coord: i,
                detail: format!("f(x+eps)={plus}, f(x-eps)={minus}"),
            }
            .into());
        }
        let fd = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        if !a.is_finite() {
            return Err(DiffError::NonFiniteProbe {
                coord: i,
                detail: format!("analytic gradient {a}"),
            }
            .into());
        }
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
        numeric.push(fd);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_coord: worst,
        analytic,
        numeric,
    })
}
