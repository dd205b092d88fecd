//! Derivative-free minimizers: Nelder–Mead for the joint REML fit and
//! Brent's method for one-dimensional profiling.

/// Nelder–Mead settings. The simplex diameter is measured after mapping
/// the vertices through `to_natural`, so convergence is judged on the
/// parameters actually reported.
#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    pub max_iter: usize,
    pub x_tol: f64,
    pub f_tol: f64,
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_iter: 2000,
            x_tol: 1e-8,
            f_tol: 1e-10,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn nelder_mead<F, T>(f: F, to_natural: T, x0: &[f64], opts: NelderMeadOptions) -> Minimum
where
    F: Fn(&[f64]) -> f64,
    T: Fn(&[f64]) -> Vec<f64>,
{
    let n = x0.len();
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += opts.initial_step;
        simplex.push(x);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(x)).collect();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        values = idx.iter().map(|&i| values[i]).collect();

        let spread = values[n] - values[0];
        let natural: Vec<Vec<f64>> = simplex.iter().map(|x| to_natural(x)).collect();
        let diameter = natural[1..]
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&natural[0])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if spread.is_finite() && spread < opts.f_tol && diameter < opts.x_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|x| x[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };

        let xr = along(-1.0);
        let fr = eval(&xr);
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = eval(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(-0.5);
            let fc = eval(&xc);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = eval(&xc);
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        // shrink towards the best vertex
        let best = simplex[0].clone();
        for i in 1..=n {
            simplex[i] = simplex[i]
                .iter()
                .zip(&best)
                .map(|(x, b)| b + 0.5 * (x - b))
                .collect();
            values[i] = eval(&simplex[i]);
        }
    }
    let best = (0..=n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("non-empty simplex");
    Minimum {
        x: simplex[best].clone(),
        value: values[best],
        iterations,
        converged,
    }
}

/// Brent's minimization on [a, b] (golden section with parabolic steps).
/// Returns (argmin, min).
pub fn brent_min<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64, max_iter: usize) -> (f64, f64) {
    const CGOLD: f64 = 0.381_966_011_250_105_1;
    let eps = f64::EPSILON.sqrt();
    let (mut a, mut b) = (a.min(b), a.max(b));
    let mut x = a + CGOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;

    for _ in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = eps * x.abs() + tol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm - x >= 0.0 { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

/// ln(1 + eˣ) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = nelder_mead(
            f,
            |x| x.to_vec(),
            &[-1.2, 1.0],
            NelderMeadOptions {
                max_iter: 5000,
                initial_step: 0.5,
                ..Default::default()
            },
        );
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn brent_quadratic_and_boundary() {
        let (x, _) = brent_min(|x| (x - 0.3).powi(2), 0.0, 2.0, 1e-10, 200);
        assert!((x - 0.3).abs() < 1e-7);
        let (x, _) = brent_min(|x| (x + 1.0).powi(2), 0.0, 2.0, 1e-10, 200);
        assert!(x < 1e-8);
    }

    #[test]
    fn softplus_roundtrip() {
        for &y in &[1e-9, 1e-3, 0.5, 2.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() <= 1e-12 * y.max(1.0));
        }
    }
}
