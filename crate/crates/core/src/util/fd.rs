//! Central-difference gradient checking.
//!
//! Callers supply the analytic gradients (from `backward` at the base
//! point) and a scalar evaluation closure. For losses containing
//! stop-gradients or straight-through copies, the closure should evaluate
//! the smooth surrogate those constructs define — the function whose true
//! derivative the analytic gradient claims to be — with any frozen values
//! captured at the base point.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

/// Worst-case errors observed while probing one parameter tensor.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub name: String,
    /// Coordinates probed.
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

/// Compares `grads` against central differences of `f`.
///
/// For each var, up to `max_coords` coordinates are probed at even strides;
/// each probe evaluates `f` at `±h` and restores the var afterwards.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)` so near-zero gradient
/// pairs are judged by absolute error. Requires float64 vars — float32
/// rounding would drown the comparison.
pub fn fd_check(
    vars: &[(String, Var)],
    grads: &GradStore,
    f: impl Fn() -> Result<f64>,
    h: f64,
    max_coords: usize,
) -> Result<Vec<FdReport>> {
    if h.is_nan() || h <= 0.0 || max_coords == 0 {
        return Err(Error::validation("fd_check needs h > 0 and max_coords > 0"));
    }
    let mut reports = Vec::with_capacity(vars.len());
    for (name, var) in vars {
        if var.dtype() != DType::F64 {
            return Err(Error::validation(format!(
                "fd_check requires float64 vars, `{name}` is {:?}",
                var.dtype()
            )));
        }
        let device = var.device().clone();
        let shape = var.shape().clone();
        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let analytic = match grads.get(var) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; base.len()],
        };
        let n = base.len();
        let stride = (n / max_coords).max(1);
        let mut report = FdReport {
            name: name.clone(),
            checked: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
        };
        for i in (0..n).step_by(stride).take(max_coords) {
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            var.set(&Tensor::from_vec(probe.clone(), shape.clone(), &device)?)?;
            let f_plus = f()?;
            probe[i] = base[i] - h;
            var.set(&Tensor::from_vec(probe, shape.clone(), &device)?)?;
            let f_minus = f()?;
            var.set(&Tensor::from_vec(base.clone(), shape.clone(), &device)?)?;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let abs = (analytic[i] - numeric).abs();
            let rel = abs / analytic[i].abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Asserts every report's relative error is below `tol`, panicking with a
/// readable summary otherwise. Test helper.
pub fn assert_fd_reports(reports: &[FdReport], tol: f64) {
    let mut bad = Vec::new();
    for r in reports {
        // NaN must fail too, hence not `< tol`.
        if r.max_rel_err.is_nan() || r.max_rel_err >= tol {
            bad.push(format!(
                "  {}: rel {:.3e} abs {:.3e} over {} coords",
                r.name, r.max_rel_err, r.max_abs_err, r.checked
            ));
        }
    }
    assert!(
        bad.is_empty(),
        "gradient check failed (tol {tol:.1e}):\n{}",
        bad.join("\n")
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    // Loss with a known closed form: f(w) = sum((w * x - y)^2).
    #[test]
    fn quadratic_gradients_match() {
        let device = Device::Cpu;
        let x = Tensor::from_vec(vec![1.0f64, 2.0, -0.5], 3, &device).unwrap();
        let y = Tensor::from_vec(vec![0.3f64, -1.0, 0.7], 3, &device).unwrap();
        let w = Var::from_tensor(&Tensor::from_vec(vec![0.2f64, -0.4, 1.1], 3, &device).unwrap())
            .unwrap();
        let loss_t = w
            .as_tensor()
            .mul(&x)
            .unwrap()
            .sub(&y)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss_t.backward().unwrap();
        let vars = vec![("w".to_string(), w.clone())];
        let f = || -> Result<f64> {
            let v = w
                .as_tensor()
                .mul(&x)?
                .sub(&y)?
                .sqr()?
                .sum_all()?
                .to_scalar::<f64>()?;
            Ok(v)
        };
        let reports = fd_check(&vars, &grads, f, 1e-5, 8).unwrap();
        assert_eq!(reports[0].checked, 3);
        assert_fd_reports(&reports, 1e-8);
    }

    // A deliberately wrong gradient must trip the assertion.
    #[test]
    fn detects_wrong_gradient() {
        let device = Device::Cpu;
        let w = Var::from_tensor(&Tensor::from_vec(vec![0.5f64], 1, &device).unwrap()).unwrap();
        // Analytic gradients from f(w) = w^2, but evaluate g(w) = 3 w^2.
        let loss_t = w.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss_t.backward().unwrap();
        let vars = vec![("w".to_string(), w.clone())];
        let f = || -> Result<f64> {
            Ok(3.0 * w.as_tensor().sqr()?.sum_all()?.to_scalar::<f64>()?)
        };
        let reports = fd_check(&vars, &grads, f, 1e-5, 4).unwrap();
        assert!(reports[0].max_rel_err > 0.1);
    }

    #[test]
    fn rejects_f32_vars() {
        let device = Device::Cpu;
        let w =
            Var::from_tensor(&Tensor::from_vec(vec![0.5f32], 1, &device).unwrap()).unwrap();
        let loss_t = w.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss_t.backward().unwrap();
        let err = fd_check(
            &[("w".to_string(), w)],
            &grads,
            || Ok(0.0),
            1e-5,
            4,
        );
        assert!(err.is_err());
    }
}
