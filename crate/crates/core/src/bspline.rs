//! Cubic B-spline bases: clamped (open uniform) for curve fitting and
//! uniform for free-form deformation grids.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEGREE: usize = 3;

/// Clamped uniform knot vector on [0, 1] for `n` control points.
pub fn clamped_knots(n: usize) -> Vec<f64> {
    assert!(n > DEGREE, "need at least {} control points", DEGREE + 1);
    let interior = n - DEGREE; // number of spans
    let mut knots = vec![0.0; DEGREE + 1];
    for i in 1..interior {
        knots.push(i as f64 / interior as f64);
    }
    knots.extend(std::iter::repeat_n(1.0, DEGREE + 1));
    knots
}

/// Knot span index containing `t` (clamped into [0, 1]).
pub fn find_span(n: usize, knots: &[f64], t: f64) -> usize {
    let t = t.clamp(0.0, 1.0);
    if t >= knots[n] {
        return n - 1;
    }
    let (mut lo, mut hi) = (DEGREE, n);
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

/// Nonzero basis values of degree `p` at `t` in `span` (Cox–de Boor).
fn basis_funs(span: usize, t: f64, knots: &[f64], p: usize) -> [f64; 4] {
    let mut n = [0.0; 4];
    let mut left = [0.0; 4];
    let mut right = [0.0; 4];
    n[0] = 1.0;
    for j in 1..=p {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    n
}

/// Values and first derivatives of the four cubic basis functions
/// `span-3 ..= span` at `t`.
pub fn basis_with_derivs(n_ctrl: usize, knots: &[f64], t: f64) -> (usize, [f64; 4], [f64; 4]) {
    let t = t.clamp(0.0, 1.0);
    let span = find_span(n_ctrl, knots, t);
    let n3 = basis_funs(span, t, knots, 3);
    let n2 = basis_funs(span, t, knots, 2); // indices span-2 ..= span
    let mut d = [0.0; 4];
    for (r, dr) in d.iter_mut().enumerate() {
        let i = span - 3 + r;
        // N_{i,2} and N_{i+1,2}; index into n2 by offset from span-2
        let a = if r >= 1 { n2[r - 1] } else { 0.0 };
        let b = if r <= 2 { n2[r] } else { 0.0 };
        let da = knots[i + 3] - knots[i];
        let db = knots[i + 4] - knots[i + 1];
        let mut v = 0.0;
        if da > 0.0 {
            v += 3.0 * a / da;
        }
        if db > 0.0 {
            v -= 3.0 * b / db;
        }
        *dr = v;
    }
    (span - 3, n3, d)
}

/// Least-squares clamped cubic fit of `values` (rows) at parameters `ts`.
///
/// Returns `n_ctrl` control rows of the same width as `values`.
pub fn fit_clamped(ts: &[f64], values: &[Vec<f64>], n_ctrl: usize) -> Result<Vec<Vec<f64>>> {
    let m = ts.len();
    if m < n_ctrl {
        return Err(Error::InvalidParameter(format!(
            "{m} samples cannot determine {n_ctrl} control points"
        )));
    }
    let knots = clamped_knots(n_ctrl);
    let mut a = DMatrix::<f64>::zeros(m, n_ctrl);
    for (row, &t) in ts.iter().enumerate() {
        let (first, b, _) = basis_with_derivs(n_ctrl, &knots, t);
        for (r, v) in b.iter().enumerate() {
            a[(row, first + r)] = *v;
        }
    }
    let width = values.first().map_or(0, |v| v.len());
    let svd = a.svd(true, true);
    let mut ctrl = vec![vec![0.0; width]; n_ctrl];
    for c in 0..width {
        let rhs = DVector::from_iterator(m, values.iter().map(|v| v[c]));
        let sol = svd
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::InvalidParameter(format!("spline fit failed: {e}")))?;
        for (k, row) in ctrl.iter_mut().enumerate() {
            row[c] = sol[k];
        }
    }
    Ok(ctrl)
}

/// Uniform cubic B-spline weights for local coordinate `u` in [0, 1).
#[inline]
pub fn uniform_weights(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

/// Derivatives of [`uniform_weights`] with respect to `u`.
#[inline]
pub fn uniform_weight_derivs(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [
        -v * v / 2.0,
        (3.0 * u * u - 4.0 * u) / 2.0,
        (-3.0 * u * u + 2.0 * u + 1.0) / 2.0,
        u * u / 2.0,
    ]
}
