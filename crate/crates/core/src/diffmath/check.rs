use std::collections::BTreeMap;

use super::{evaluate, gradient, Array, Expr, MathError, ParamId};

/// Worst relative disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDifferenceReport {
    pub per_param: BTreeMap<ParamId, f64>,
}

impl FiniteDifferenceReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.values().cloned().fold(0.0, f64::max)
    }
}

/// Compares `gradient(expr)` against central differences of `evaluate(expr)`.
///
/// Relative error per element uses `max(|analytic|, |numeric|, 1e-8)` as the
/// denominator.
pub fn finite_difference_check(
    expr: &Expr,
    bindings: &BTreeMap<ParamId, Array>,
    step: f64,
) -> Result<FiniteDifferenceReport, MathError> {
    if !(step > 0.0) {
        return Err(MathError::BadStep(step));
    }
    let analytic = gradient(expr, bindings)?;
    let mut probe = bindings.clone();
    let mut per_param = BTreeMap::new();
    for (id, grad) in &analytic {
        let mut worst: f64 = 0.0;
        for k in 0..grad.len() {
            let original = probe[id].data()[k];
            probe.get_mut(id).unwrap().data_mut()[k] = original + step;
            let plus = scalar_value(expr, &probe)?;
            probe.get_mut(id).unwrap().data_mut()[k] = original - step;
            let minus = scalar_value(expr, &probe)?;
            probe.get_mut(id).unwrap().data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let exact = grad.data()[k];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
        }
        per_param.insert(*id, worst);
    }
    Ok(FiniteDifferenceReport { per_param })
}

fn scalar_value(expr: &Expr, bindings: &BTreeMap<ParamId, Array>) -> Result<f64, MathError> {
    let v = evaluate(expr, bindings)?;
    v.item().ok_or(MathError::NotScalar {
        shape: v.shape().to_vec(),
    })
}
