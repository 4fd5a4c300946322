use crate::error::{contract, Error, Result};

/// Compares an analytic gradient against central differences.
///
/// Returns `max_i |analytic_i − numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let all: Vec<usize> = (0..params.len()).collect();
    finite_diff_check_at(&mut f, params, analytic, eps, &all)
}

/// Like [`finite_diff_check`] but only over the listed coordinates.
pub fn finite_diff_check_at<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(contract("finite difference step must be positive"));
    }
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        if i >= params.len() {
            return Err(Error::Index {
                index: i,
                size: params.len(),
            });
        }
        probe[i] = params[i] + eps;
        let plus = finite(f(&probe)?)?;
        probe[i] = params[i] - eps;
        let minus = finite(f(&probe)?)?;
        probe[i] = params[i];
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("finite-difference evaluation".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quadratic() {
        let p = [1.0, 2.0, 3.0];
        let grad: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let err = finite_diff_check(|x| Ok(x.iter().map(|v| v * v).sum()), &p, &grad, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn softmax_first_component() {
        // f(x) = softmax(x)[0]; ∂f/∂x_j = s0(δ0j − s_j)
        let p = [0.0, 0.0];
        let s = [0.5, 0.5];
        let grad = [s[0] * (1.0 - s[0]), -s[0] * s[1]];
        let f = |x: &[f64]| {
            let m = x[0].max(x[1]);
            let e0 = (x[0] - m).exp();
            let e1 = (x[1] - m).exp();
            Ok(e0 / (e0 + e1))
        };
        let err = finite_diff_check(f, &p, &grad, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn catches_wrong_gradient() {
        let p = [1.0, 2.0, 3.0];
        // deliberately missing the factor 2
        let grad: Vec<f64> = p.to_vec();
        let err = finite_diff_check(|x| Ok(x.iter().map(|v| v * v).sum()), &p, &grad, 1e-5).unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn propagates_non_finite() {
        let r = finite_diff_check(|_| Ok(f64::NAN), &[1.0], &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(finite_diff_check(|_| Ok(0.0), &[1.0], &[0.0], 0.0).is_err());
    }
}
