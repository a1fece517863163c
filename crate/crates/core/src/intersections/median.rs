//! Geometric median by Weiszfeld iteration.

use crate::geo::LocalPoint;

use super::IntersectionError;

#[derive(Debug, Clone)]
pub struct GeometricMedian {
    pub point: LocalPoint,
    pub iterations: usize,
    /// `false` when `max_iter` ran out; `point` is then the best iterate seen.
    pub converged: bool,
    /// Sum of distances at the start point and after every accepted step.
    pub objective_history: Vec<f64>,
}

pub fn objective(points: &[LocalPoint], x: f64, y: f64) -> f64 {
    points.iter().map(|p| (p.x - x).hypot(p.y - y)).sum()
}

/// Point minimizing the sum of Euclidean distances to `points`.
///
/// Starts at the coordinate-wise mean and applies the Weiszfeld map
/// `y <- sum(x_i / d_i) / sum(1 / d_i)` until successive iterates move less
/// than `tol`. When an iterate comes within `tol` of a data point, that point
/// is tested with the subgradient condition `|R| <= multiplicity` (R the sum
/// of unit vectors from it to the other points); it is returned if optimal,
/// otherwise the iterate is pushed `tol` along `R` and iteration resumes.
pub fn geometric_median(
    points: &[LocalPoint],
    tol: f64,
    max_iter: usize,
) -> Result<GeometricMedian, IntersectionError> {
    if points.is_empty() {
        return Err(IntersectionError::InvalidParameter("geometric median of an empty set".into()));
    }
    if !(tol > 0.0) {
        return Err(IntersectionError::InvalidParameter(format!("tol = {tol}")));
    }
    let origin = points[0].origin;
    let n = points.len() as f64;
    let mut cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let mut cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mut f = objective(points, cx, cy);
    let mut history = vec![f];
    let done = |x: f64, y: f64, iterations: usize, converged: bool, history: Vec<f64>| GeometricMedian {
        point: LocalPoint::new(x, y, origin),
        iterations,
        converged,
        objective_history: history,
    };

    for iter in 1..=max_iter {
        // nearest data point to the current iterate
        let (k, dk) = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p.x - cx).hypot(p.y - cy)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty");

        let (nx, ny) = if dk < tol {
            let anchor = points[k];
            let (mut rx, mut ry, mut mult) = (0.0, 0.0, 0.0);
            for p in points {
                let d = (p.x - anchor.x).hypot(p.y - anchor.y);
                if d < tol {
                    mult += 1.0;
                } else {
                    rx += (p.x - anchor.x) / d;
                    ry += (p.y - anchor.y) / d;
                }
            }
            let r = rx.hypot(ry);
            if r <= mult {
                let fa = objective(points, anchor.x, anchor.y);
                if fa <= f {
                    history.push(fa);
                    return Ok(done(anchor.x, anchor.y, iter, true, history));
                }
                return Ok(done(cx, cy, iter, true, history));
            }
            (anchor.x + tol * rx / r, anchor.y + tol * ry / r)
        } else {
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for p in points {
                let w = 1.0 / (p.x - cx).hypot(p.y - cy);
                sx += p.x * w;
                sy += p.y * w;
                sw += w;
            }
            (sx / sw, sy / sw)
        };

        let nf = objective(points, nx, ny);
        if nf > f {
            // only reachable from the perturbation branch; keep the better point
            log::debug!("weiszfeld: perturbation did not descend ({nf} > {f})");
            return Ok(done(cx, cy, iter, true, history));
        }
        let step = (nx - cx).hypot(ny - cy);
        cx = nx;
        cy = ny;
        f = nf;
        history.push(f);
        if step < tol {
            return Ok(done(cx, cy, iter, true, history));
        }
    }
    log::warn!("weiszfeld: no convergence after {max_iter} iterations");
    Ok(done(cx, cy, max_iter, false, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> LocalPoint {
        LocalPoint::planar(x, y)
    }

    #[test]
    fn identical_points() {
        let pts = vec![p(3.0, -2.0); 5];
        let m = geometric_median(&pts, 1e-9, 100).unwrap();
        assert_eq!((m.point.x, m.point.y), (3.0, -2.0));
        assert!(m.converged);
    }

    #[test]
    fn unit_square_center() {
        let pts = [p(0.0, 0.0), p(1.0, 0.0), p(0.0, 1.0), p(1.0, 1.0)];
        let m = geometric_median(&pts, 1e-9, 100).unwrap();
        assert!((m.point.x - 0.5).abs() < 1e-9 && (m.point.y - 0.5).abs() < 1e-9);
    }

    #[test]
    fn median_at_a_data_point() {
        // a heavy vertex: three coincident points dominate the two others
        let pts = [p(0.0, 0.0), p(0.0, 0.0), p(0.0, 0.0), p(10.0, 0.0), p(0.0, 10.0)];
        let m = geometric_median(&pts, 1e-9, 10_000).unwrap();
        assert!(m.point.x.hypot(m.point.y) < 1e-6, "{:?}", m.point);
        assert!(m.converged);
    }

    #[test]
    fn collinear_odd_count_is_middle_point() {
        let pts = [p(0.0, 0.0), p(1.0, 0.0), p(7.0, 0.0)];
        let m = geometric_median(&pts, 1e-10, 10_000).unwrap();
        assert!((m.point.x - 1.0).abs() < 1e-6, "{:?}", m.point);
    }

    #[test]
    fn reports_non_convergence() {
        let pts = [p(0.0, 0.0), p(2.0, 0.0), p(1.0, 5.0)];
        let m = geometric_median(&pts, 1e-15, 2).unwrap();
        assert!(!m.converged);
        assert_eq!(m.iterations, 2);
    }

    #[test]
    fn rejects_empty_and_bad_tol() {
        assert!(geometric_median(&[], 1e-6, 10).is_err());
        assert!(geometric_median(&[p(0.0, 0.0)], 0.0, 10).is_err());
    }
}
