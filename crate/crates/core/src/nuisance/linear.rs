//! Ridge least squares and an additive natural cubic spline basis.

use crate::linalg::{ridge_least_squares, Matrix, Vector};

use super::Predictor;

/// Natural cubic spline basis for one feature, in truncated-power form.
///
/// The feature is rescaled to `[0, 1]` over the knot range before expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBasis {
    knots: Vec<f64>,
    lo: f64,
    scale: f64,
    /// Only a linear term (too few distinct values for a spline).
    linear_only: bool,
    /// Constant feature: contributes no columns.
    constant: bool,
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

impl FeatureBasis {
    pub fn fit(values: &[f64], n_knots: usize) -> Self {
        let mut sorted: Vec<f64> = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let lo = sorted.first().copied().unwrap_or(0.0);
        let hi = sorted.last().copied().unwrap_or(0.0);
        if sorted.is_empty() || hi - lo <= 0.0 {
            return FeatureBasis { knots: vec![], lo, scale: 1.0, linear_only: true, constant: true };
        }
        let scale = hi - lo;
        let n_knots = n_knots.max(2);
        let mut knots: Vec<f64> = (0..n_knots)
            .map(|k| (quantile_sorted(&sorted, k as f64 / (n_knots - 1) as f64) - lo) / scale)
            .collect();
        knots.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        let mut distinct = sorted.clone();
        distinct.dedup();
        let linear_only = knots.len() < 3 || distinct.len() < 4;
        FeatureBasis { knots, lo, scale, linear_only, constant: false }
    }

    pub fn width(&self) -> usize {
        if self.constant {
            0
        } else if self.linear_only {
            1
        } else {
            self.knots.len() - 1
        }
    }

    pub fn expand_into(&self, x: f64, out: &mut Vec<f64>) {
        if self.constant {
            return;
        }
        let u = (x - self.lo) / self.scale;
        out.push(u);
        if self.linear_only {
            return;
        }
        let k = self.knots.len();
        let last = self.knots[k - 1];
        let prev = self.knots[k - 2];
        let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
        let d = |xi: f64| (cube(u - xi) - cube(u - last)) / (last - xi);
        let d_prev = d(prev);
        for &xi in &self.knots[..k - 2] {
            out.push(d(xi) - d_prev);
        }
    }
}

/// Additive spline expansion of a feature vector (no intercept column).
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    features: Vec<FeatureBasis>,
}

impl SplineBasis {
    /// Fit knots per column of `rows` at evenly spaced sample quantiles.
    pub fn fit(rows: &[Vec<f64>], n_knots: usize) -> Self {
        let d = rows.first().map_or(0, |r| r.len());
        let features = (0..d)
            .map(|j| {
                let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                FeatureBasis::fit(&col, n_knots)
            })
            .collect();
        SplineBasis { features }
    }

    pub fn width(&self) -> usize {
        self.features.iter().map(FeatureBasis::width).sum()
    }

    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width());
        for (fb, &v) in self.features.iter().zip(x) {
            fb.expand_into(v, &mut out);
        }
        out
    }
}

/// Design matrix with a leading intercept column.
pub(crate) fn design_with_intercept(rows: &[Vec<f64>]) -> Matrix {
    let d = rows.first().map_or(0, |r| r.len());
    Matrix::from_fn(rows.len(), d + 1, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] })
}

#[derive(Debug, Clone)]
pub struct LinearModel {
    /// Intercept first.
    pub coef: Vec<f64>,
}

impl LinearModel {
    pub fn fit(x: &[Vec<f64>], y: &[f64], ridge: f64) -> Self {
        let design = design_with_intercept(x);
        let coef = ridge_least_squares(&design, &Vector::from_column_slice(y), ridge);
        LinearModel { coef: coef.iter().copied().collect() }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coef[0] + self.coef[1..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }
}

impl Predictor for LinearModel {
    fn predict(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
}

#[derive(Debug, Clone)]
pub struct SplineModel {
    basis: SplineBasis,
    linear: LinearModel,
}

impl SplineModel {
    pub fn fit(x: &[Vec<f64>], y: &[f64], n_knots: usize, ridge: f64) -> Self {
        let basis = SplineBasis::fit(x, n_knots);
        let expanded: Vec<Vec<f64>> = x.iter().map(|r| basis.expand(r)).collect();
        let linear = LinearModel::fit(&expanded, y, ridge);
        SplineModel { basis, linear }
    }
}

impl Predictor for SplineModel {
    fn predict(&self, x: &[f64]) -> f64 {
        self.linear.eval(&self.basis.expand(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fit_recovers_line() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.37 - 2.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| 1.0 + 2.0 * r[0]).collect();
        let m = LinearModel::fit(&x, &y, 0.0);
        assert!((m.coef[0] - 1.0).abs() < 1e-10);
        assert!((m.coef[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn natural_spline_is_linear_beyond_boundary_knots() {
        let vals: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        let fb = FeatureBasis::fit(&vals, 5);
        assert_eq!(fb.width(), 4);
        // second differences vanish outside [min, max]
        let eval = |x: f64| {
            let mut out = vec![];
            fb.expand_into(x, &mut out);
            out
        };
        let (a, b, c) = (eval(1.5), eval(2.0), eval(2.5));
        for k in 0..4 {
            assert!((a[k] - 2.0 * b[k] + c[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn spline_fits_smooth_curve_better_than_line() {
        let x: Vec<Vec<f64>> = (0..300).map(|i| vec![-2.0 + 4.0 * i as f64 / 299.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0].sin()).collect();
        let spline = SplineModel::fit(&x, &y, 5, 1e-8);
        let line = LinearModel::fit(&x, &y, 1e-8);
        let sse = |p: &dyn Predictor| x.iter().zip(&y).map(|(r, t)| (p.predict(r) - t).powi(2)).sum::<f64>();
        assert!(sse(&spline) < 0.05 * sse(&line));
    }

    #[test]
    fn constant_feature_adds_no_columns() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]];
        let basis = SplineBasis::fit(&rows, 5);
        assert_eq!(basis.width(), 1);
    }
}
