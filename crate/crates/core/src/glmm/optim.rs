//! Derivative-free minimization (Nelder–Mead with box projection) and
//! finite-difference derivatives for polishing.

#[derive(Debug, Clone)]
pub(crate) struct NelderMead {
    pub steps: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub ftol: f64,
    pub xtol: f64,
    pub max_evals: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

impl NelderMead {
    fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    pub(crate) fn minimize<F: FnMut(&[f64]) -> f64>(&self, x0: &[f64], mut f: F) -> Minimum {
        let n = x0.len();
        let mut evals = 0;
        let mut eval = |x: &[f64], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        let mut start = x0.to_vec();
        self.project(&mut start);
        let f0 = eval(&start, &mut evals);
        simplex.push((start.clone(), f0));
        for i in 0..n {
            let mut x = start.clone();
            x[i] += self.steps[i];
            if x[i] > self.upper[i] {
                x[i] = start[i] - self.steps[i];
            }
            self.project(&mut x);
            let fx = eval(&x, &mut evals);
            simplex.push((x, fx));
        }

        let mut converged = false;
        while evals < self.max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let (best, worst) = (simplex[0].1, simplex[n].1);
            let diameter = simplex[1..]
                .iter()
                .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if (worst - best).abs() <= self.ftol * (1.0 + best.abs()) && diameter <= self.xtol {
                converged = true;
                break;
            }
            let centroid: Vec<f64> =
                (0..n).map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64).collect();
            let towards = |t: f64, this: &Self| {
                let mut x: Vec<f64> = (0..n).map(|j| centroid[j] + t * (simplex[n].0[j] - centroid[j])).collect();
                this.project(&mut x);
                x
            };
            let xr = towards(-1.0, self);
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].1 {
                let xe = towards(-2.0, self);
                let fe = eval(&xe, &mut evals);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let (xc, fc) = if fr < simplex[n].1 {
                    let xc = towards(-0.5, self);
                    let fc = eval(&xc, &mut evals);
                    (xc, fc)
                } else {
                    let xc = towards(0.5, self);
                    let fc = eval(&xc, &mut evals);
                    (xc, fc)
                };
                if fc < simplex[n].1.min(fr) {
                    simplex[n] = (xc, fc);
                } else {
                    let x_best = simplex[0].0.clone();
                    for k in 1..=n {
                        let mut x: Vec<f64> = (0..n).map(|j| x_best[j] + 0.5 * (simplex[k].0[j] - x_best[j])).collect();
                        self.project(&mut x);
                        let fx = eval(&x, &mut evals);
                        simplex[k] = (x, fx);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (x, f) = simplex.swap_remove(0);
        Minimum { x, f, evals, converged }
    }
}

/// Central-difference gradient over the coordinates listed in `free`.
pub(crate) fn fd_gradient<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], free: &[usize], h: f64) -> Vec<f64> {
    free.iter()
        .map(|&i| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Hessian over `free` (row-major, `free.len()` square).
pub(crate) fn fd_hessian<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], free: &[usize], h: f64) -> Vec<f64> {
    let m = free.len();
    let f0 = f(x);
    let mut out = vec![0.0; m * m];
    let shifted = |steps: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, s) in steps {
            y[i] += s;
        }
        y
    };
    for a in 0..m {
        let i = free[a];
        let fp = f(&shifted(&[(i, h)]));
        let fm = f(&shifted(&[(i, -h)]));
        out[a * m + a] = (fp - 2.0 * f0 + fm) / (h * h);
        for b in 0..a {
            let j = free[b];
            let v =
                (f(&shifted(&[(i, h), (j, h)])) - f(&shifted(&[(i, h), (j, -h)])) - f(&shifted(&[(i, -h), (j, h)]))
                    + f(&shifted(&[(i, -h), (j, -h)])))
                    / (4.0 * h * h);
            out[a * m + b] = v;
            out[b * m + a] = v;
        }
    }
    out
}
