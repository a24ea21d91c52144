//! Clamped uniform B-spline bases and their curvature penalties.
//!
//! Basis functions are evaluated with the standard iterative span
//! algorithm. The penalty matrix `P[l1, l2] = int theta''_l1 theta''_l2 dt`
//! is assembled exactly by per-span Gauss-Legendre quadrature: on each knot
//! span the integrand is a polynomial of degree `2 (degree - 2)`, so
//! `degree - 1` nodes per span already integrate it without error.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::multilinear::{SplineDesign, TimeGrid};

/// Evaluate a clamped uniform B-spline basis of dimension `basis_dim` and
/// polynomial degree `degree` on `grid`, returning the design together
/// with its curvature penalty.
pub fn build_bspline_basis(
    grid: &TimeGrid,
    basis_dim: usize,
    degree: usize,
) -> Result<SplineDesign> {
    if degree == 0 {
        return Err(Error::InvalidConfig("spline degree must be at least 1".into()));
    }
    if basis_dim < degree + 1 {
        return Err(Error::InvalidConfig(format!(
            "basis dimension {} is too small for degree {} (need at least {})",
            basis_dim,
            degree,
            degree + 1
        )));
    }
    let pts = grid.points();
    let knots = clamped_uniform_knots(pts[0], pts[pts.len() - 1], basis_dim, degree);
    let mut theta = DMatrix::zeros(basis_dim, pts.len());
    for (col, &t) in pts.iter().enumerate() {
        let span = find_span(&knots, degree, basis_dim, t);
        let vals = basis_funs(&knots, span, t, degree);
        for (offset, v) in vals.iter().enumerate() {
            theta[(span - degree + offset, col)] = *v;
        }
    }
    let mut design = SplineDesign {
        theta,
        penalty: DMatrix::zeros(basis_dim, basis_dim),
        degree,
        knots,
    };
    design.penalty = build_penalty_matrix(&design)?;
    Ok(design)
}

/// Exact curvature Gram matrix of the design's basis. For degree 1 the
/// second derivative vanishes everywhere and the matrix is zero.
pub fn build_penalty_matrix(design: &SplineDesign) -> Result<DMatrix<f64>> {
    let l = design.basis_dim();
    let degree = design.degree;
    if design.knots.len() != l + degree + 1 {
        return Err(Error::InvalidConfig(format!(
            "knot vector length {} does not match basis dimension {} and degree {}",
            design.knots.len(),
            l,
            degree
        )));
    }
    let mut penalty = DMatrix::zeros(l, l);
    if degree < 2 {
        return Ok(penalty);
    }
    let knots = &design.knots;
    let rule = gauss_legendre(degree - 1);
    for span in degree..l {
        let (a, b) = (knots[span], knots[span + 1]);
        if b <= a {
            continue;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for &(x, w) in &rule {
            let t = mid + half * x;
            let d2 = second_derivatives(knots, span, t, degree);
            let weight = w * half;
            for i in 0..=degree {
                let gi = span - degree + i;
                let di = d2[i];
                if di == 0.0 {
                    continue;
                }
                for j in 0..=degree {
                    penalty[(gi, span - degree + j)] += weight * di * d2[j];
                }
            }
        }
    }
    Ok(penalty)
}

/// Clamped knot vector with uniformly spaced interior knots on `[a, b]`.
fn clamped_uniform_knots(a: f64, b: f64, basis_dim: usize, degree: usize) -> Vec<f64> {
    let interior = basis_dim - degree - 1;
    let mut knots = Vec::with_capacity(basis_dim + degree + 1);
    knots.extend(std::iter::repeat(a).take(degree + 1));
    for i in 1..=interior {
        knots.push(a + (b - a) * i as f64 / (interior + 1) as f64);
    }
    knots.extend(std::iter::repeat(b).take(degree + 1));
    knots
}

/// Index of the knot span containing `t`, clamped so the final domain
/// point lands in the last non-empty span.
fn find_span(knots: &[f64], degree: usize, basis_dim: usize, t: f64) -> usize {
    if t >= knots[basis_dim] {
        return basis_dim - 1;
    }
    if t <= knots[degree] {
        return degree;
    }
    // binary search over [degree, basis_dim)
    let (mut lo, mut hi) = (degree, basis_dim);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if t < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// Values of the `degree + 1` basis functions that are non-zero on `span`,
/// in index order `span - degree ..= span`.
fn basis_funs(knots: &[f64], span: usize, t: f64, degree: usize) -> Vec<f64> {
    let mut vals = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    vals[0] = 1.0;
    for j in 1..=degree {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { vals[r] / denom };
            vals[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        vals[j] = saved;
    }
    vals
}

/// Second derivatives of the `degree + 1` basis functions non-zero on
/// `span`, via the two-step derivative recursion on lower-degree bases.
/// Requires `degree >= 2`.
fn second_derivatives(knots: &[f64], span: usize, t: f64, degree: usize) -> Vec<f64> {
    let p = degree;
    // degree p-2 values, indices span-(p-2) ..= span
    let base = basis_funs(knots, span, t, p - 2);
    let low = span - (p - 2);
    let n_q = |i: isize| -> f64 {
        if i < low as isize || i > span as isize {
            0.0
        } else {
            base[(i - low as isize) as usize]
        }
    };
    // first derivatives of the degree p-1 functions, indices span-(p-1) ..= span
    let d1_low = span - (p - 1);
    let d1 = |i: isize| -> f64 {
        if i < d1_low as isize || i > span as isize {
            return 0.0;
        }
        let iu = i as usize;
        let mut acc = 0.0;
        let den_a = knots[iu + p - 1] - knots[iu];
        if den_a != 0.0 {
            acc += n_q(i) / den_a;
        }
        let den_b = knots[iu + p] - knots[iu + 1];
        if den_b != 0.0 {
            acc -= n_q(i + 1) / den_b;
        }
        (p - 1) as f64 * acc
    };
    let mut out = vec![0.0; p + 1];
    for (offset, slot) in out.iter_mut().enumerate() {
        let i = span - p + offset;
        let mut acc = 0.0;
        let den_a = knots[i + p] - knots[i];
        if den_a != 0.0 {
            acc += d1(i as isize) / den_a;
        }
        let den_b = knots[i + p + 1] - knots[i + 1];
        if den_b != 0.0 {
            acc -= d1(i as isize + 1) / den_b;
        }
        *slot = p as f64 * acc;
    }
    out
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, by Newton iteration on
/// the Legendre recurrence.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let n = n.max(1);
    let mut rule = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        rule.push((x, w));
    }
    rule
}

/// Legendre polynomial `P_n(x)` and its derivative.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Textbook Cox-de Boor recursion, intentionally naive; the final
    /// non-empty span is treated as right-closed so the clamped endpoint
    /// evaluates to 1.
    fn naive_basis(knots: &[f64], i: usize, p: usize, t: f64, domain_end: f64) -> f64 {
        if p == 0 {
            let in_span = knots[i] <= t && t < knots[i + 1];
            let at_end = t == domain_end && knots[i] < t && knots[i + 1] == domain_end;
            return if in_span || at_end { 1.0 } else { 0.0 };
        }
        let mut value = 0.0;
        let den_a = knots[i + p] - knots[i];
        if den_a > 0.0 {
            value += (t - knots[i]) / den_a * naive_basis(knots, i, p - 1, t, domain_end);
        }
        let den_b = knots[i + p + 1] - knots[i + 1];
        if den_b > 0.0 {
            value += (knots[i + p + 1] - t) / den_b * naive_basis(knots, i + 1, p - 1, t, domain_end);
        }
        value
    }

    #[test]
    fn matches_naive_cox_de_boor_recursion() {
        let grid = TimeGrid::new((0..33).map(|i| i as f64 / 32.0).collect()).unwrap();
        for degree in 1..=4usize {
            for basis_dim in [degree + 1, degree + 5, 12] {
                let design = build_bspline_basis(&grid, basis_dim, degree).unwrap();
                let end = *design.knots.last().unwrap();
                for (col, &t) in grid.points().iter().enumerate() {
                    for l in 0..basis_dim {
                        let want = naive_basis(&design.knots, l, degree, t, end);
                        let got = design.theta[(l, col)];
                        assert!(
                            (got - want).abs() <= 1e-12,
                            "degree {degree} dim {basis_dim} basis {l} at t={t}: {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn columns_sum_to_one() {
        let grid = TimeGrid::uniform(100);
        let design = build_bspline_basis(&grid, 15, 3).unwrap();
        for col in 0..design.grid_len() {
            let s: f64 = design.theta.column(col).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "column {col} sums to {s}");
        }
    }

    #[test]
    fn bernstein_case_has_known_values() {
        let grid = TimeGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        let design = build_bspline_basis(&grid, 4, 3).unwrap();
        // with no interior knots the basis is the cubic Bernstein family
        let left: Vec<f64> = design.theta.column(0).iter().copied().collect();
        let mid: Vec<f64> = design.theta.column(1).iter().copied().collect();
        let right: Vec<f64> = design.theta.column(2).iter().copied().collect();
        assert_eq!(left, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(right, vec![0.0, 0.0, 0.0, 1.0]);
        for (got, want) in mid.iter().zip([0.125, 0.375, 0.375, 0.125]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-14);
        }
    }

    #[test]
    fn rejects_undersized_bases() {
        let grid = TimeGrid::uniform(10);
        assert!(build_bspline_basis(&grid, 3, 3).is_err());
        assert!(build_bspline_basis(&grid, 5, 0).is_err());
        assert!(build_bspline_basis(&grid, 4, 3).is_ok());
    }

    #[test]
    fn knot_vector_is_clamped_and_uniform() {
        let grid = TimeGrid::new((0..11).map(|i| i as f64 / 10.0).collect()).unwrap();
        let design = build_bspline_basis(&grid, 7, 3).unwrap();
        let k = &design.knots;
        assert_eq!(k.len(), 7 + 3 + 1);
        assert_eq!(&k[..4], &[0.0; 4]);
        assert_eq!(&k[7..], &[1.0; 4]);
        for (got, want) in k[4..7].iter().zip([0.25, 0.5, 0.75]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-14);
        }
    }

    #[test]
    fn degree_one_penalty_is_zero() {
        let grid = TimeGrid::uniform(20);
        let design = build_bspline_basis(&grid, 8, 1).unwrap();
        assert!(design.penalty.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn second_derivatives_match_finite_differences() {
        let grid = TimeGrid::new((0..41).map(|i| i as f64 / 40.0).collect()).unwrap();
        let design = build_bspline_basis(&grid, 8, 3).unwrap();
        let knots = &design.knots;
        let h = 1e-4;
        let eval = |t: f64| -> Vec<f64> {
            let span = find_span(knots, 3, 8, t);
            let vals = basis_funs(knots, span, t, 3);
            let mut full = vec![0.0; 8];
            for (o, v) in vals.iter().enumerate() {
                full[span - 3 + o] = *v;
            }
            full
        };
        // interior points away from knots so the difference stencil stays
        // inside one polynomial piece
        for &t in &[0.11, 0.23, 0.42, 0.58, 0.77, 0.93] {
            let span = find_span(knots, 3, 8, t);
            let d2 = second_derivatives(knots, span, t, 3);
            let (lo, mi, hi) = (eval(t - h), eval(t), eval(t + h));
            for l in 0..8 {
                let fd = (lo[l] - 2.0 * mi[l] + hi[l]) / (h * h);
                let analytic = if l >= span - 3 && l <= span { d2[l - (span - 3)] } else { 0.0 };
                assert!(
                    (fd - analytic).abs() <= 1e-3 * (1.0 + analytic.abs()),
                    "basis {l} at t={t}: fd {fd} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn penalty_matches_trapezoid_oracle() {
        // independent integration route: dense trapezoid rule on 1e5 points
        let grid = TimeGrid::uniform(50);
        let design = build_bspline_basis(&grid, 15, 3).unwrap();
        let knots = &design.knots;
        let (a, b) = (knots[3], knots[15]);
        let m = 100_000usize;
        let mut trap = DMatrix::<f64>::zeros(15, 15);
        for step in 0..=m {
            let t = a + (b - a) * step as f64 / m as f64;
            let span = find_span(knots, 3, 15, t);
            let d2 = second_derivatives(knots, span, t, 3);
            let w = if step == 0 || step == m { 0.5 } else { 1.0 } * (b - a) / m as f64;
            for i in 0..=3 {
                for j in 0..=3 {
                    trap[(span - 3 + i, span - 3 + j)] += w * d2[i] * d2[j];
                }
            }
        }
        let scale = design.penalty.norm();
        assert!(scale > 0.0);
        let err = (&design.penalty - &trap).norm() / scale;
        assert!(err <= 1e-6, "relative Frobenius error {err}");
    }

    #[test]
    fn penalty_is_symmetric_and_psd() {
        let grid = TimeGrid::uniform(60);
        let design = build_bspline_basis(&grid, 12, 3).unwrap();
        let p = &design.penalty;
        assert!((p - p.transpose()).norm() <= 1e-14 * p.norm());
        let eig = p.clone().symmetric_eigen();
        let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
        let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
        assert!(min >= -1e-10 * max, "min eigenvalue {min}, max {max}");
    }

    #[test]
    fn curvature_energy_of_polynomials_is_exact() {
        // quadratics are inside the cubic spline space: f(t) = t^2 has
        // curvature energy int (f'')^2 = 4 (b - a); linear functions have
        // zero energy.
        let grid = TimeGrid::uniform(50);
        let design = build_bspline_basis(&grid, 10, 3).unwrap();
        let pts = grid.points();
        let (a, b) = (pts[0], pts[pts.len() - 1]);

        let fit = |f: &dyn Fn(f64) -> f64| -> nalgebra::DVector<f64> {
            let y = nalgebra::DVector::from_iterator(pts.len(), pts.iter().map(|t| f(*t)));
            let gram = &design.theta * design.theta.transpose();
            let rhs = &design.theta * y;
            gram.cholesky().expect("basis Gram is PD on a rich grid").solve(&rhs)
        };

        let c_quad = fit(&|t| t * t);
        let energy = (c_quad.transpose() * &design.penalty * &c_quad)[(0, 0)];
        let want = 4.0 * (b - a);
        assert!(
            (energy - want).abs() <= 1e-6 * want,
            "quadratic energy {energy} vs {want}"
        );

        let c_lin = fit(&|t| 2.0 * t + 1.0);
        let lin_energy = (c_lin.transpose() * &design.penalty * &c_lin)[(0, 0)];
        assert!(lin_energy.abs() <= 1e-10 * design.penalty.norm());
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        // n-node rule is exact through degree 2n - 1
        for n in 1..=5usize {
            let rule = gauss_legendre(n);
            let w_sum: f64 = rule.iter().map(|(_, w)| w).sum();
            assert_abs_diff_eq!(w_sum, 2.0, epsilon = 1e-13);
            let deg = 2 * n - 1;
            let integral: f64 = rule.iter().map(|(x, w)| w * x.powi(deg as i32 - 1)).sum();
            // int_{-1}^{1} x^(even) dx = 2/(even+1); odd powers integrate to 0
            let even = deg - 1;
            let want = if even % 2 == 0 { 2.0 / (even as f64 + 1.0) } else { 0.0 };
            assert_abs_diff_eq!(integral, want, epsilon = 1e-12);
        }
    }
}
