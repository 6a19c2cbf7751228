use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tape, Var};

/// Relative-error threshold for a gradient check to pass.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub trainable: bool,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

impl ParamCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    /// True when every trainable parameter is within tolerance.
    pub fn passed(&self) -> bool {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .all(|e| e.passed(self.tolerance))
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = libm::fabs(a).max(libm::fabs(b)).max(1e-8);
    libm::fabs(a - b) / denom
}

fn evaluate<F>(f: &mut F, params: &ParamSet) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let value = tape.value(loss);
    if value.len() != 1 {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    Ok(value.item())
}

/// Compares reverse-mode gradients of `f` with central differences
/// `(f(θ+eps) − f(θ−eps)) / 2eps` for every element of every parameter.
///
/// `f` records a scalar loss on the supplied tape. Frozen parameters are
/// reported with an autodiff gradient of zero and do not affect `passed`.
pub fn grad_check<F>(params: &ParamSet, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamSet) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(alloc::format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let first = evaluate(&mut f, params)?;
    let second = evaluate(&mut f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut analytic = params.clone();
    analytic.clear_grads();
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, &analytic.clone())?;
        tape.backward_into(loss, &mut analytic)?;
    }

    let mut probe = params.clone();
    let mut entries = Vec::with_capacity(params.len());
    for id in params.ids() {
        let p = params.get(id);
        let grad = analytic.grad(id).expect("backward_into fills every gradient");
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        for k in 0..p.value.len() {
            let original = p.value.data()[k];
            probe.value_mut(id).data_mut()[k] = original + eps;
            let plus = evaluate(&mut f, &probe)?;
            probe.value_mut(id).data_mut()[k] = original - eps;
            let minus = evaluate(&mut f, &probe)?;
            probe.value_mut(id).data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let auto = grad.data()[k];
            max_abs = max_abs.max(libm::fabs(auto - numeric));
            max_rel = max_rel.max(relative_error(auto, numeric));
        }
        entries.push(ParamCheck {
            name: p.name.clone(),
            elements: p.value.len(),
            trainable: p.trainable,
            max_abs_error: max_abs,
            max_rel_error: max_rel,
        });
    }
    Ok(GradCheckReport {
        entries,
        tolerance: GRAD_CHECK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use alloc::vec;
    use core::cell::Cell;

    #[test]
    fn quadratic_is_exact() {
        // f(p) = Σ c_k p_k² has f''' = 0, so central differences are exact up to rounding.
        let mut ps = ParamSet::new();
        let id = ps.add("p", Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap()).unwrap();
        let coeff = Tensor::new(vec![3], vec![1.0, 2.0, 0.5]).unwrap();
        let report = grad_check(&ps, 1e-5, |tape, params| {
            let p = tape.param(params, id);
            let c = tape.constant(coeff.clone());
            let sq = tape.mul(p, p)?;
            let w = tape.mul(sq, c)?;
            Ok(tape.sum(w))
        })
        .unwrap();
        assert!(report.passed());
        assert!(report.entries[0].max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn frozen_parameter_has_zero_gradient() {
        let mut ps = ParamSet::new();
        let used = ps.add("used", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let frozen = ps.add("frozen", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
        ps.set_trainable(frozen, false);
        let mut analytic = ps.clone();
        let mut tape = Tape::new();
        let u = tape.param(&analytic, used);
        let _ = tape.param(&analytic, frozen);
        let loss = tape.sum(u);
        tape.backward_into(loss, &mut analytic).unwrap();
        assert_eq!(analytic.grad(frozen).unwrap().data(), &[0.0, 0.0]);

        let report = grad_check(&ps, 1e-5, |tape, params| {
            let u = tape.param(params, used);
            let _ = tape.param(params, frozen);
            let sq = tape.mul(u, u)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        let f = report.entries.iter().find(|e| e.name == "frozen").unwrap();
        assert!(!f.trainable);
        assert!(f.max_abs_error < 1e-12);
        assert!(report.passed());
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let ps = ParamSet::new();
        let err = grad_check(&ps, 1e-2, |tape, _| Ok(tape.constant(Tensor::scalar(0.0))));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn non_deterministic_function_rejected() {
        let mut ps = ParamSet::new();
        ps.add("p", Tensor::zeros(&[1])).unwrap();
        let counter = Cell::new(0.0);
        let err = grad_check(&ps, 1e-5, |tape, _| {
            counter.set(counter.get() + 1.0);
            Ok(tape.constant(Tensor::scalar(counter.get())))
        });
        assert!(matches!(err, Err(Error::NonDeterministic { .. })));
    }
}
