//! Exact polishing of a working-independence fit.
//!
//! The check-loss objective is convex and piecewise linear, so some minimizer
//! interpolates p observations. Starting from the p rows with smallest
//! absolute residual at the smoothed root, we walk vertex to vertex along
//! descending edges until none is left.

use nalgebra::{DMatrix, DVector};

use crate::model::check_loss_unchecked;

const ZERO_RESIDUAL: f64 = 1e-12;

pub(crate) fn objective(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, tau: f64) -> f64 {
    (y - x * beta).iter().map(|&e| check_loss_unchecked(e, tau)).sum()
}

fn initial_basis(x: &DMatrix<f64>, residuals: &DVector<f64>) -> Option<Vec<usize>> {
    let p = x.ncols();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.sort_by(|&a, &b| residuals[a].abs().total_cmp(&residuals[b].abs()));
    let mut basis = Vec::with_capacity(p);
    // Gram–Schmidt on the candidate rows
    let mut ortho: Vec<DVector<f64>> = Vec::with_capacity(p);
    for i in order {
        let row = x.row(i).transpose();
        let scale = row.norm();
        if scale == 0.0 {
            continue;
        }
        let mut v = row.clone();
        for u in &ortho {
            v -= u * u.dot(&row);
        }
        if v.norm() > 1e-8 * scale {
            ortho.push(v.normalize());
            basis.push(i);
            if basis.len() == p {
                return Some(basis);
            }
        }
    }
    None
}

fn basis_solution(x: &DMatrix<f64>, y: &DVector<f64>, basis: &[usize]) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let p = basis.len();
    let xb = DMatrix::from_fn(p, p, |r, c| x[(basis[r], c)]);
    let yb = DVector::from_fn(p, |r, _| y[basis[r]]);
    let inv = xb.try_inverse()?;
    let beta = &inv * yb;
    Some((beta, inv))
}

/// Returns an exact minimizer of the check-loss objective reached from `start`,
/// or `None` when no nonsingular basis can be formed.
pub(crate) fn refine_to_vertex(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64, start: &DVector<f64>) -> Option<DVector<f64>> {
    let n = x.nrows();
    let p = x.ncols();
    let mut basis = initial_basis(x, &(y - x * start))?;
    let (mut beta, mut inv) = basis_solution(x, y, &basis)?;
    let mut current = objective(x, y, &beta, tau);

    let mut best = (current, beta.clone());
    let start_obj = objective(x, y, start, tau);
    if start_obj < best.0 {
        best = (start_obj, start.clone());
    }

    for _ in 0..(10 * n + 100) {
        let resid = y - x * &beta;
        let scale = 1.0 + resid.amax();
        let mut in_basis = vec![false; n];
        for &b in &basis {
            in_basis[b] = true;
        }

        // steepest descending edge among the 2p directions ±X_B⁻¹e_k
        let mut chosen: Option<(usize, DVector<f64>, DVector<f64>, f64)> = None;
        for k in 0..p {
            for sign in [1.0, -1.0] {
                let d = inv.column(k) * sign;
                let a = x * &d;
                let mut slope = 0.0;
                for i in 0..n {
                    let ai = if in_basis[i] {
                        if i == basis[k] {
                            sign
                        } else {
                            0.0
                        }
                    } else {
                        a[i]
                    };
                    let r = if in_basis[i] { 0.0 } else { resid[i] };
                    slope += if r > ZERO_RESIDUAL * scale {
                        -tau * ai
                    } else if r < -ZERO_RESIDUAL * scale {
                        (1.0 - tau) * ai
                    } else {
                        (-tau * ai).max((1.0 - tau) * ai)
                    };
                }
                let norm = d.norm();
                if slope < -1e-12 * norm && chosen.as_ref().is_none_or(|c| slope / norm < c.3) {
                    chosen = Some((k, d, a, slope / norm));
                }
            }
        }
        let Some((k, d, a, unit_slope)) = chosen else {
            break;
        };

        // exact line search over the residual sign changes
        let mut slope = unit_slope * d.norm();
        let mut breaks: Vec<(f64, usize)> = (0..n)
            .filter(|&i| !in_basis[i] && resid[i].abs() > ZERO_RESIDUAL * scale && a[i].abs() > 1e-14)
            .filter_map(|i| {
                let t = resid[i] / a[i];
                (t > 0.0).then_some((t, i))
            })
            .collect();
        breaks.sort_by(|l, r| l.0.total_cmp(&r.0));
        let mut entering = None;
        for (t, i) in breaks {
            slope += a[i].abs();
            if slope >= 0.0 {
                entering = Some((t, i));
                break;
            }
        }
        let Some((_, i)) = entering else {
            break;
        };
        let mut next = basis.clone();
        next[k] = i;
        let Some((b, v)) = basis_solution(x, y, &next) else {
            break;
        };
        let obj = objective(x, y, &b, tau);
        if obj > current + 1e-13 * (1.0 + current.abs()) {
            break;
        }
        basis = next;
        beta = b;
        inv = v;
        current = obj;
        if current < best.0 {
            best = (current, beta.clone());
        }
    }
    Some(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_sample() {
        let x = DMatrix::from_element(5, 1, 1.0);
        let y = DVector::from_vec(vec![5.0, 1.0, 4.0, 2.0, 3.0]);
        let b = refine_to_vertex(&x, &y, 0.5, &DVector::from_vec(vec![0.0])).unwrap();
        assert_eq!(b[0], 3.0);
    }

    #[test]
    fn lower_quartile_line() {
        // points on y = 1 + 2x plus positive noise except for two exact points
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let noise = [0.0, 0.5, 1.0, 0.3, 0.0, 2.0, 0.7];
        let x = DMatrix::from_fn(7, 2, |r, c| if c == 0 { 1.0 } else { xs[r] });
        let y = DVector::from_fn(7, |r, _| 1.0 + 2.0 * xs[r] + noise[r]);
        let b = refine_to_vertex(&x, &y, 0.1, &DVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-12 && (b[1] - 2.0).abs() < 1e-12, "{b}");
    }
}
