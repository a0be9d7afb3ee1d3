//! Box-constrained quasi-Newton minimization.
//!
//! Projected BFGS: variables sitting on a bound with the gradient pushing
//! outward are frozen, the search direction comes from the inverse-Hessian
//! estimate restricted to the free set, and every trial point is projected
//! back into the box before the Armijo test.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BoxOptions {
    pub max_iter: usize,
    /// Stop once an accepted step improves the objective by less than this.
    pub ftol: f64,
    /// Stop once the projected gradient's max-norm falls below this.
    pub gtol: f64,
    /// Infinity-norm of the first (and every reset) search step.
    pub initial_step: f64,
}

impl Default for BoxOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            ftol: 1e-6,
            gtol: 1e-8,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-12;

/// Minimize `f` over `[lower, upper]` starting from `x0` (clamped into the box).
///
/// `f` returns the value and gradient; a non-finite value marks the point as
/// infeasible and makes the line search back off.
pub fn minimize_box<F>(mut f: F, x0: &[f64], lower: &[f64], upper: &[f64], opts: &BoxOptions) -> Minimum
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let project = |x: &mut [f64]| {
        for i in 0..x.len() {
            x[i] = x[i].clamp(lower[i], upper[i]);
        }
    };
    let mut x = x0.to_vec();
    project(&mut x);
    let (mut fx, mut g) = f(&x);
    let mut evaluations = 1;
    let mut iterations = 0;
    if !fx.is_finite() || n == 0 {
        return Minimum { x, value: fx, iterations, evaluations };
    }

    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;

    while iterations < opts.max_iter {
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0)))
            .collect();
        let pg = (0..n).filter(|&i| free[i]).map(|i| g[i].abs()).fold(0.0, f64::max);
        if pg <= opts.gtol {
            break;
        }

        let gv = DVector::from_iterator(n, (0..n).map(|i| if free[i] { g[i] } else { 0.0 }));
        let mut d: Vec<f64> = if fresh {
            gv.iter().map(|v| -v).collect()
        } else {
            let hd = &h * &gv;
            (0..n).map(|i| if free[i] { -hd[i] } else { 0.0 }).collect()
        };
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            fresh = true;
            d = gv.iter().map(|v| -v).collect();
        }
        if fresh {
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if dmax > 0.0 {
                d.iter_mut().for_each(|v| *v *= opts.initial_step / dmax);
            }
        }

        let mut t = 1.0;
        let mut accepted = None;
        while t >= MIN_STEP {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            project(&mut xn);
            if xn == x {
                break;
            }
            let (fn_, gn) = f(&xn);
            evaluations += 1;
            let decrease: f64 = g.iter().zip(xn.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
            if fn_.is_finite() && fn_ <= fx + ARMIJO * decrease {
                accepted = Some((xn, fn_, gn));
                break;
            }
            t *= 0.5;
        }
        iterations += 1;

        let Some((xn, fn_, gn)) = accepted else {
            if fresh {
                break;
            }
            h = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };

        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, gn.iter().zip(&g).map(|(a, b)| a - b));
        let improvement = fx - fn_;
        x = xn;
        fx = fn_;
        g = gn;

        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if fresh {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - (&s * y.transpose()) * rho;
            let right = &eye - (&y * s.transpose()) * rho;
            h = &left * &h * &right + (&s * s.transpose()) * rho;
            fresh = false;
        }

        if improvement < opts.ftol {
            break;
        }
    }

    Minimum { x, value: fx, iterations, evaluations }
}

/// Central-difference gradient with per-coordinate steps, falling back to a
/// one-sided difference where a step would leave the box.
pub fn numerical_gradient<F>(f: &mut F, x: &[f64], steps: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let f0 = f(x);
    (0..x.len())
        .map(|i| {
            let h = steps[i];
            let up = (x[i] + h).min(upper[i]);
            let down = (x[i] - h).max(lower[i]);
            let value_at = |probe: &mut Vec<f64>, f: &mut F, v: f64| {
                probe[i] = v;
                let out = f(probe);
                probe[i] = x[i];
                out
            };
            match (up > x[i], down < x[i]) {
                (true, true) => {
                    (value_at(&mut probe, f, up) - value_at(&mut probe, f, down)) / (up - down)
                }
                (true, false) => (value_at(&mut probe, f, up) - f0) / (up - x[i]),
                (false, true) => (f0 - value_at(&mut probe, f, down)) / (x[i] - down),
                (false, false) => 0.0,
            }
        })
        .collect()
}
