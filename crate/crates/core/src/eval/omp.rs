//! Nonnegative least squares, the adapted OMP seed search and COSE curves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::eval::metrics::{CurveKind, CurveSeries};

pub const OMP_MAX_ITERATIONS: usize = 100;
pub const DEFAULT_BIN_THRESHOLD: f64 = 0.5;
/// Seed-percentage grid of a COSE curve.
pub const COSE_GRID: std::ops::RangeInclusive<u32> = 1..=100;

/// Lawson-Hanson active set for `min ||A x - b||` subject to `x >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows but {} targets",
            a.nrows(),
            b.len()
        )));
    }
    let gram = a.transpose() * a;
    let atb = a.transpose() * b;
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    nnls_gram(&gram, &atb, scale * scale * 1e-12 * a.nrows().max(a.ncols()) as f64)
}

/// NNLS given the Gram matrix `A^T A` and `A^T b`.
fn nnls_gram(gram: &DMatrix<f64>, atb: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    let n = atb.len();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let gradient = |x: &DVector<f64>| atb - gram * x;
    let mut w = gradient(&x);
    for _ in 0..3 * n + 10 {
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .fold(None::<usize>, |best, j| match best {
                Some(b) if w[b] >= w[j] => Some(b),
                _ => Some(j),
            });
        let Some(t) = candidate else {
            return Ok(x);
        };
        passive[t] = true;
        loop {
            let z = solve_passive(gram, atb, &passive)?;
            let infeasible: Vec<usize> = (0..n).filter(|&j| passive[j] && z[j] <= 0.0).collect();
            if infeasible.is_empty() {
                x = z;
                break;
            }
            let alpha = infeasible
                .iter()
                .map(|&j| x[j] / (x[j] - z[j]))
                .fold(f64::INFINITY, f64::min);
            x += (z - &x) * alpha;
            for j in 0..n {
                if passive[j] && x[j] <= tol {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
        w = gradient(&x);
    }
    Err(Error::NumericalFailure(
        "nonnegative least squares did not converge".into(),
    ))
}

/// Unconstrained least squares on the passive set, zero elsewhere.
fn solve_passive(gram: &DMatrix<f64>, atb: &DVector<f64>, passive: &[bool]) -> Result<DVector<f64>> {
    let idx: Vec<usize> = (0..passive.len()).filter(|&j| passive[j]).collect();
    let g = gram.select_rows(&idx).select_columns(&idx);
    let rhs = atb.select_rows(&idx);
    let sol = match g.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => g
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::NumericalFailure(e.to_string()))?,
    };
    let mut z = DVector::zeros(passive.len());
    for (k, &j) in idx.iter().enumerate() {
        z[j] = sol[k];
    }
    Ok(z)
}

/// Min-max rescale then `>= threshold`. A constant vector maps to 1 where
/// positive and 0 elsewhere.
pub fn binarize(v: &DVector<f64>, threshold: f64) -> DVector<f64> {
    let (lo, hi) = (v.min(), v.max());
    if !(hi > lo) {
        return v.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
    }
    v.map(|x| if (x - lo) / (hi - lo) >= threshold { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmpResult {
    pub seed: DVector<f64>,
    /// Indices in selection order.
    pub selected: Vec<usize>,
    /// `(r_i, a_i)` per iteration, starting with `(0, 0)` for the empty seed.
    pub trace: Vec<(f64, f64)>,
    /// `||GT - A^-1 s||` per iteration, starting with `||GT||`.
    pub ls_residuals: Vec<f64>,
}

/// Greedy nonnegative seed search over the foreground columns of `a_inv`.
///
/// Each step picks the foreground column most correlated with the current
/// least-squares residual, refits all chosen coefficients by NNLS and scores
/// the binarized diffusion against the ground truth. Stops once
/// `||GT - bin(A^-1 s)|| < stop_c`, the foreground is exhausted, or after
/// [`OMP_MAX_ITERATIONS`] picks.
pub fn adapted_omp(
    a_inv: &DMatrix<f64>,
    gt_nodes: &DVector<f64>,
    stop_c: f64,
    bin_threshold: f64,
) -> Result<OmpResult> {
    let n = gt_nodes.len();
    if a_inv.nrows() != n || a_inv.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "dictionary is {}x{} for {n} nodes",
            a_inv.nrows(),
            a_inv.ncols()
        )));
    }
    let gt = gt_nodes.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let mut remaining: Vec<usize> = (0..n).filter(|&i| gt[i] == 1.0).collect();
    let n_fg = remaining.len();
    if n_fg == 0 {
        return Err(Error::EmptyForeground);
    }
    let gt_norm = gt.norm();
    let gram = a_inv.transpose() * a_inv;
    let atb = a_inv.transpose() * &gt;
    let scale = a_inv.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let tol = scale * scale * 1e-12 * n as f64;

    let mut seed = DVector::zeros(n);
    let mut selected = Vec::new();
    let mut res = gt.clone();
    let mut trace = vec![(0.0, 0.0)];
    let mut ls_residuals = vec![gt_norm];
    while !remaining.is_empty() && selected.len() < OMP_MAX_ITERATIONS {
        let corr = a_inv.transpose() * &res;
        let (pos, _) = remaining
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &j)| {
                if corr[j].abs() > best.1 {
                    (k, corr[j].abs())
                } else {
                    best
                }
            });
        selected.push(remaining.remove(pos));

        let g = gram.select_rows(&selected).select_columns(&selected);
        let rhs = atb.select_rows(&selected);
        let coeffs = nnls_gram(&g, &rhs, tol)?;
        seed.fill(0.0);
        for (k, &j) in selected.iter().enumerate() {
            seed[j] = coeffs[k];
        }
        let y = a_inv * &seed;
        res = &gt - &y;
        let res_bin = &gt - binarize(&y, bin_threshold);
        let nnz = seed.iter().filter(|&&v| v != 0.0).count();
        trace.push((100.0 * nnz as f64 / n_fg as f64, (gt_norm - res_bin.norm()) / gt_norm));
        ls_residuals.push(res.norm());
        if res_bin.norm() < stop_c {
            break;
        }
    }
    Ok(OmpResult {
        seed,
        selected,
        trace,
        ls_residuals,
    })
}

/// Linear interpolation of one trace at seed percentage `x`, flat past the
/// last point. Among points with equal `r` the later one wins.
pub fn interpolate_trace(trace: &[(f64, f64)], x: f64) -> f64 {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(trace.len());
    for &p in trace {
        match pts.last_mut() {
            Some(last) if last.0 == p.0 => *last = p,
            _ => pts.push(p),
        }
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    match pts.iter().position(|p| p.0 > x) {
        None => pts.last().map_or(0.0, |p| p.1),
        Some(0) => pts[0].1,
        Some(k) => {
            let (x0, y0) = pts[k - 1];
            let (x1, y1) = pts[k];
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        }
    }
}

/// Mean of the traces resampled on `r = 1..100`.
pub fn cose_curve(traces: &[Vec<(f64, f64)>]) -> Result<CurveSeries> {
    if traces.is_empty() {
        return Err(Error::InsufficientData("no traces to average".into()));
    }
    let n = traces.len() as f64;
    let points = COSE_GRID
        .map(|r| {
            let x = f64::from(r);
            (x, traces.iter().map(|t| interpolate_trace(t, x)).sum::<f64>() / n)
        })
        .collect();
    Ok(CurveSeries::new(points, CurveKind::Cose, traces.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nnls_unconstrained_optimum_inside_orthant() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let x = nnls(&a, &b).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nnls_clamps_negative_direction() {
        let a = DMatrix::identity(2, 2);
        let b = DVector::from_column_slice(&[-1.0, 2.0]);
        let x = nnls(&a, &b).unwrap();
        assert_eq!(x.as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn nnls_satisfies_kkt_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (m, n) = (rng.random_range(3..12), rng.random_range(1..8));
            let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let b = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
            let x = nnls(&a, &b).unwrap();
            let w = a.transpose() * (&b - &a * &x);
            for j in 0..n {
                assert!(x[j] >= 0.0);
                assert!(w[j] <= 1e-9, "dual feasibility {}", w[j]);
                if x[j] > 0.0 {
                    assert!(w[j].abs() < 1e-9, "complementarity {}", w[j]);
                }
            }
        }
    }

    #[test]
    fn identity_dictionary_single_foreground() {
        let gt = DVector::from_column_slice(&[0.0, 0.0, 0.0, 1.0, 0.0]);
        let r = adapted_omp(&DMatrix::identity(5, 5), &gt, 0.0, DEFAULT_BIN_THRESHOLD).unwrap();
        assert_eq!(r.selected, vec![3]);
        assert_eq!(r.seed, gt);
        assert_eq!(r.trace, vec![(0.0, 0.0), (100.0, 1.0)]);
    }

    #[test]
    fn identity_dictionary_closed_form_trace() {
        let gt = DVector::from_column_slice(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let r = adapted_omp(&DMatrix::identity(8, 8), &gt, 0.0, DEFAULT_BIN_THRESHOLD).unwrap();
        let m = 4.0f64;
        assert_eq!(r.trace.len(), 5);
        for (i, &(ri, ai)) in r.trace.iter().enumerate() {
            let i = i as f64;
            assert!((ri - 100.0 * i / m).abs() < 1e-12);
            assert!((ai - (m.sqrt() - (m - i).sqrt()) / m.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_foreground_is_rejected() {
        assert!(matches!(
            adapted_omp(&DMatrix::identity(3, 3), &DVector::zeros(3), 0.0, 0.5),
            Err(Error::EmptyForeground)
        ));
    }

    #[test]
    fn stop_threshold_ends_early() {
        let gt = DVector::from_element(6, 1.0);
        let r = adapted_omp(&DMatrix::identity(6, 6), &gt, 10.0, 0.5).unwrap();
        assert_eq!(r.selected.len(), 1);
    }

    #[test]
    fn interpolation_and_flat_extension() {
        let t = vec![(0.0, 0.0), (25.0, 0.4), (50.0, 0.6)];
        assert!((interpolate_trace(&t, 10.0) - 0.16).abs() < 1e-12);
        assert_eq!(interpolate_trace(&t, 80.0), 0.6);
        // Equal r: the later iteration's accuracy.
        let t = vec![(0.0, 0.0), (50.0, 0.3), (50.0, 0.5)];
        assert_eq!(interpolate_trace(&t, 60.0), 0.5);
    }

    #[test]
    fn cose_averaging_is_idempotent() {
        let t = vec![(0.0, 0.0), (30.0, 0.5), (60.0, 0.8)];
        let one = cose_curve(std::slice::from_ref(&t)).unwrap();
        let two = cose_curve(&[t.clone(), t.clone()]).unwrap();
        assert_eq!(one.points, two.points);
        assert_eq!(one.points.len(), 100);
        assert!((one.y_at(30.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_cose_curve_values() {
        let gt = DVector::from_column_slice(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let r = adapted_omp(&DMatrix::identity(6, 6), &gt, 0.0, 0.5).unwrap();
        let c = cose_curve(&[r.trace]).unwrap();
        for (x, y) in [(25.0, 0.134), (50.0, 0.293), (75.0, 0.5), (100.0, 1.0)] {
            assert!((c.y_at(x).unwrap() - y).abs() < 1e-3, "{x}");
        }
        assert!(c.points.windows(2).all(|w| w[0].1 <= w[1].1));
    }
}
