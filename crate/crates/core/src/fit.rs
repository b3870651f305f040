//! Weighted least-squares fitting.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Fitted parameters with standard errors from the unscaled covariance
/// `(JᵀWJ)⁻¹`. Unidentifiable parameters report an infinite error.
#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub params: Vec<f64>,
    pub errors: Vec<f64>,
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
    /// Parameter covariance; a pseudo-inverse when `JᵀWJ` is singular.
    pub covariance: DMatrix<f64>,
}

fn covariance(jtj: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = jtj.nrows();
    if let Some(inv) = jtj.clone().try_inverse() {
        let diag: Vec<f64> = (0..n).map(|k| inv[(k, k)]).collect();
        if diag.iter().all(|d| d.is_finite() && *d >= 0.0) {
            return (inv, diag.into_iter().map(f64::sqrt).collect());
        }
    }
    // Singular: report finite errors only for well-determined directions.
    let svd = jtj.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = smax * 1e-12;
    let pinv = svd
        .clone()
        .pseudo_inverse(cutoff.max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DMatrix::from_element(n, n, f64::NAN));
    let v_t = svd.v_t.expect("v_t requested");
    let errors = (0..n)
        .map(|k| {
            let mut var = 0.0;
            for (s_idx, &s) in svd.singular_values.iter().enumerate() {
                let comp = v_t[(s_idx, k)];
                if comp.abs() < 1e-9 {
                    continue;
                }
                if s <= cutoff {
                    return f64::INFINITY;
                }
                var += comp * comp / s;
            }
            var.sqrt()
        })
        .collect();
    (pinv, errors)
}

/// Levenberg–Marquardt on `Σ ((y − f(x; p)) / σ)²`.
///
/// `model(x, p, grad)` returns `f(x; p)` and writes `∂f/∂p` into `grad`.
pub fn levenberg_marquardt<F>(
    xs: &[f64],
    ys: &[f64],
    sigmas: &[f64],
    p0: &[f64],
    max_iter: usize,
    model: F,
) -> Result<FitOutcome>
where
    F: Fn(f64, &[f64], &mut [f64]) -> f64,
{
    let n = xs.len();
    let k = p0.len();
    if ys.len() != n || sigmas.len() != n {
        return Err(Error::Fit("x, y and sigma lengths differ".into()));
    }
    if n < k {
        return Err(Error::Fit(format!(
            "{n} points cannot determine {k} parameters"
        )));
    }
    if sigmas.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Fit("all sigmas must be positive".into()));
    }

    let mut grad = vec![0.0; k];
    let eval = |p: &[f64], grad: &mut [f64]| -> (f64, DMatrix<f64>, DVector<f64>) {
        let mut jtj = DMatrix::zeros(k, k);
        let mut jtr = DVector::zeros(k);
        let mut chi2 = 0.0;
        for i in 0..n {
            let f = model(xs[i], p, grad);
            let w = 1.0 / (sigmas[i] * sigmas[i]);
            let r = ys[i] - f;
            chi2 += w * r * r;
            for a in 0..k {
                jtr[a] += w * grad[a] * r;
                for b in 0..=a {
                    jtj[(a, b)] += w * grad[a] * grad[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                jtj[(b, a)] = jtj[(a, b)];
            }
        }
        (chi2, jtj, jtr)
    };

    let mut p = p0.to_vec();
    let (mut chi2, mut jtj, mut jtr) = eval(&p, &mut grad);
    if !chi2.is_finite() {
        return Err(Error::Fit(
            "model is not finite at the starting point".into(),
        ));
    }
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut a = jtj.clone();
        for d in 0..k {
            a[(d, d)] += lambda * jtj[(d, d)].max(1e-300);
        }
        let step = match a.clone().cholesky() {
            Some(ch) => ch.solve(&jtr),
            None => match a.svd(true, true).solve(&jtr, 1e-14) {
                Ok(s) => s,
                Err(_) => {
                    lambda *= 10.0;
                    continue;
                }
            },
        };
        let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(x, d)| x + d).collect();
        let (c2, j2, r2) = eval(&trial, &mut grad);
        if c2.is_finite() && c2 <= chi2 {
            let small_step = step
                .iter()
                .zip(&p)
                .all(|(d, x)| d.abs() <= 1e-12 * (x.abs() + 1e-12));
            let small_gain = chi2 - c2 <= 1e-14 * chi2.max(1e-300);
            p = trial;
            chi2 = c2;
            jtj = j2;
            jtr = r2;
            lambda = (lambda / 10.0).max(1e-15);
            if small_step || small_gain || chi2 < 1e-28 {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e16 {
                // No downhill direction remains: a (possibly flat) minimum.
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::Fit(format!(
            "no convergence after {max_iter} iterations (chi2 = {chi2:.6e}, lambda = {lambda:.1e}, params = {p:?})"
        )));
    }
    let (covariance, errors) = covariance(&jtj);
    Ok(FitOutcome {
        errors,
        covariance,
        params: p,
        chi2,
        dof: n - k,
        iterations,
    })
}

/// Weighted linear least squares `y ≈ Σ_j p_j · basis_j(x)`.
pub fn linear_least_squares(
    xs: &[f64],
    ys: &[f64],
    sigmas: &[f64],
    basis: &[&dyn Fn(f64) -> f64],
) -> Result<FitOutcome> {
    let n = xs.len();
    let k = basis.len();
    if n < k || ys.len() != n || sigmas.len() != n {
        return Err(Error::Fit("not enough points for the linear model".into()));
    }
    if sigmas.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Fit("all sigmas must be positive".into()));
    }
    let a = DMatrix::from_fn(n, k, |i, j| basis[j](xs[i]) / sigmas[i]);
    let b = DVector::from_fn(n, |i, _| ys[i] / sigmas[i]);
    let ata = a.transpose() * &a;
    let atb = a.transpose() * &b;
    let sol = ata
        .clone()
        .cholesky()
        .map(|c| c.solve(&atb))
        .ok_or_else(|| Error::Fit("design matrix is rank deficient".into()))?;
    let resid = &b - &a * &sol;
    let (covariance, errors) = covariance(&ata);
    Ok(FitOutcome {
        params: sol.iter().copied().collect(),
        errors,
        covariance,
        chi2: resid.norm_squared(),
        dof: n - k,
        iterations: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_recovered() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.25).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * (-0.7 * x).exp()).collect();
        let sig = vec![0.01; xs.len()];
        let fit = levenberg_marquardt(&xs, &ys, &sig, &[1.0, 0.1], 200, |x, p, g| {
            let e = (-p[1] * x).exp();
            g[0] = e;
            g[1] = -p[0] * x * e;
            p[0] * e
        })
        .unwrap();
        assert!((fit.params[0] - 3.0).abs() < 1e-9);
        assert!((fit.params[1] - 0.7).abs() < 1e-9);
    }

    #[test]
    fn line_fit_errors() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 3.0, 5.0, 7.0];
        let sig = [1.0; 4];
        let fit = linear_least_squares(&xs, &ys, &sig, &[&|_| 1.0, &|x| x]).unwrap();
        assert!((fit.params[0] - 1.0).abs() < 1e-12);
        assert!((fit.params[1] - 2.0).abs() < 1e-12);
        // Var(slope) = 1 / Σ(x − x̄)² = 1 / 5
        assert!((fit.errors[1] - (0.2f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_linear_fit_fails() {
        let xs = [1.0, 1.0, 1.0];
        let r = linear_least_squares(&xs, &[1.0, 2.0, 3.0], &[1.0; 3], &[&|_| 1.0, &|x| x]);
        assert!(r.is_err());
    }
}
