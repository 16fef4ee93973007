use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{check_finite, StatsError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    /// Upper asymptote.
    pub l: f64,
    /// Steepness.
    pub k: f64,
    /// Midpoint.
    pub x0: f64,
}

impl LogisticParams {
    pub fn eval(&self, x: f64) -> f64 {
        self.l / (1.0 + (-self.k * (x - self.x0)).exp())
    }
}

/// Starting point for the fit. `None` fields fall back to
/// `L = max(y)`, `k = 1`, `x0 = median(x)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogisticInit {
    pub l: Option<f64>,
    pub k: Option<f64>,
    pub x0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub params: LogisticParams,
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the data cannot identify the steepness (constant x or y).
    pub degenerate: bool,
}

const MAX_ITER: usize = 500;

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn sse(p: &LogisticParams, x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| (yi - p.eval(xi)).powi(2))
        .sum()
}

/// Least-squares fit of `y = L / (1 + exp(-k (x - x0)))` by damped
/// Gauss-Newton (Levenberg-Marquardt damping on the normal equations).
///
/// Non-convergence is not an error: the best parameters seen are returned
/// with `converged = false`.
pub fn fit_logistic(x: &[f64], y: &[f64], init: LogisticInit) -> Result<LogisticFit, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFewPoints {
            needed: 3,
            got: x.len(),
        });
    }
    check_finite(x)?;
    check_finite(y)?;
    let n = x.len() as f64;
    let ymax = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ymin = y.iter().copied().fold(f64::INFINITY, f64::min);
    let xmax = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let xmin = x.iter().copied().fold(f64::INFINITY, f64::min);

    let mut p = LogisticParams {
        l: init.l.unwrap_or(ymax),
        k: init.k.unwrap_or(1.0),
        x0: init.x0.unwrap_or_else(|| median(x)),
    };

    if ymax == ymin || xmax == xmin {
        // A flat response (or a single x) fixes L at most; k is unidentifiable.
        let p = LogisticParams {
            l: if ymax == ymin { 2.0 * ymax } else { p.l },
            k: 0.0,
            x0: p.x0,
        };
        let rmse = (sse(&p, x, y) / n).sqrt();
        return Ok(LogisticFit {
            params: p,
            rmse,
            iterations: 0,
            converged: false,
            degenerate: true,
        });
    }

    let mut cost = sse(&p, x, y);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=MAX_ITER {
        iterations = it;
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for (&xi, &yi) in x.iter().zip(y) {
            let s = 1.0 / (1.0 + (-p.k * (xi - p.x0)).exp());
            let ds = p.l * s * (1.0 - s);
            let g = Vector3::new(s, ds * (xi - p.x0), -ds * p.k);
            let r = yi - p.l * s;
            jtj += g * g.transpose();
            jtr += g * r;
        }

        let mut improved = false;
        while lambda < 1e16 {
            let mut a = jtj;
            for d in 0..3 {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let cand = LogisticParams {
                l: p.l + step[0],
                k: p.k + step[1],
                x0: p.x0 + step[2],
            };
            let cand_cost = sse(&cand, x, y);
            if cand_cost.is_finite() && cand_cost <= cost {
                let rel_step = step.norm() / (1.0 + Vector3::new(p.l, p.k, p.x0).norm());
                let drop = cost - cand_cost;
                p = cand;
                cost = cand_cost;
                lambda = (lambda / 10.0).max(1e-15);
                improved = true;
                if rel_step < 1e-14 || cost < 1e-30 || drop <= 1e-16 * cost {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No downhill step at any damping: we are at a (local) minimum.
            converged = true;
        }
        if converged {
            break;
        }
    }

    Ok(LogisticFit {
        params: p,
        rmse: (cost / n).sqrt(),
        iterations,
        converged,
        degenerate: false,
    })
}
