//! Stacking ensemble: a nonnegative weighted average of member learners.
//!
//! Weights come from one regression of the outcome on the members' in-sample
//! predictions. Under the identity link this is least squares without
//! intercept, clipped at zero. Under the log link the weights solve the
//! Poisson score equations `sum_i (y_i / mu_i - 1) P_ij = 0` for the mean
//! `mu_i = sum_j w_j P_ij`, by Newton's method. Either way the weights are
//! renormalized to sum to one.

use log::warn;

use crate::cee::LinkKind;
use crate::error::{Error, Result};
use crate::linalg::{ridge_least_squares, sym_pinv, Matrix, Vector};

use super::{fit_regressor, Predictor, RegressorKind};

#[derive(Debug)]
pub struct StackModel {
    members: Vec<Box<dyn Predictor>>,
    weights: Vec<f64>,
    link: LinkKind,
}

impl StackModel {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let v: f64 = self.members.iter().zip(&self.weights).map(|(m, w)| w * m.predict(x)).sum();
        match self.link {
            LinkKind::Log => v.max(0.0),
            LinkKind::Identity => v,
        }
    }
}

impl Predictor for StackModel {
    fn predict(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
}

fn equal_weights(j: usize) -> Vec<f64> {
    vec![1.0 / j as f64; j]
}

fn normalize(raw: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = raw.iter().map(|w| w.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total > 0.0 && total.is_finite() {
        clipped.iter().map(|w| w / total).collect()
    } else {
        equal_weights(raw.len())
    }
}

fn least_squares_weights(preds: &Matrix, y: &Vector) -> Vec<f64> {
    let w = ridge_least_squares(preds, y, 0.0);
    normalize(w.as_slice())
}

fn poisson_loglik(preds: &Matrix, y: &Vector, w: &Vector) -> Option<f64> {
    let mu = preds * w;
    let mut ll = 0.0;
    for (m, yi) in mu.iter().zip(y.iter()) {
        if *m < 0.0 || (*yi > 0.0 && *m <= 0.0) {
            return None;
        }
        if *yi > 0.0 {
            ll += yi * m.ln();
        }
        ll -= m;
    }
    Some(ll)
}

/// Newton on the Poisson score; `None` on non-convergence.
fn poisson_weights(preds: &Matrix, y: &Vector) -> Option<Vec<f64>> {
    let j = preds.ncols();
    let mut w = Vector::from_element(j, 1.0 / j as f64);
    let mut ll = poisson_loglik(preds, y, &w)?;
    for _ in 0..100 {
        let mu = preds * &w;
        let mut grad = Vector::zeros(j);
        let mut info = Matrix::zeros(j, j);
        for i in 0..preds.nrows() {
            let row = preds.row(i).transpose();
            let yi = y[i];
            if yi > 0.0 {
                grad += &row * (yi / mu[i] - 1.0);
                info += &row * row.transpose() * (yi / (mu[i] * mu[i]));
            } else {
                grad -= &row;
            }
        }
        let scale = 1.0 + y.iter().sum::<f64>();
        if grad.amax() <= 1e-9 * scale {
            return Some(w.iter().copied().collect());
        }
        let step = sym_pinv(&info, 1e-10)? * &grad;
        let mut accepted = false;
        let mut t = 1.0;
        for _ in 0..40 {
            let cand = &w + &step * t;
            if let Some(cand_ll) = poisson_loglik(preds, y, &cand) {
                if cand_ll >= ll {
                    w = cand;
                    ll = cand_ll;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            // no ascent direction left: stationary up to round-off
            return Some(w.iter().copied().collect());
        }
    }
    None
}

/// Fit members on `(x, y)` and combine them.
pub fn fit_stack(members: &[RegressorKind], x: &[Vec<f64>], y: &[f64], link: LinkKind, salt: u64) -> Result<StackModel> {
    if members.len() < 2 {
        return Err(Error::InvalidArgument("a stack needs at least two members".into()));
    }
    let fitted = members
        .iter()
        .enumerate()
        .map(|(k, kind)| fit_regressor(kind, x, y, salt.wrapping_add(k as u64 * 7919)))
        .collect::<Result<Vec<_>>>()?;
    let m = y.len();
    let j = fitted.len();
    let preds = Matrix::from_fn(m, j, |i, k| fitted[k].predict(&x[i]));
    let yv = Vector::from_column_slice(y);

    // members whose predictions vanish carry no information and get weight 0
    let active: Vec<usize> = (0..j).filter(|&k| preds.column(k).amax() > 0.0).collect();
    let weights = if active.is_empty() || m == 0 {
        equal_weights(j)
    } else {
        let sub = Matrix::from_fn(m, active.len(), |i, c| preds[(i, active[c])]);
        let sub_w = match link {
            LinkKind::Identity => least_squares_weights(&sub, &yv),
            LinkKind::Log => {
                let nonneg = sub.iter().all(|v| *v >= 0.0);
                match nonneg.then(|| poisson_weights(&sub, &yv)).flatten() {
                    Some(w) => normalize(&w),
                    None => {
                        warn!("stack: Poisson weight fit did not converge, using equal weights");
                        equal_weights(active.len())
                    }
                }
            }
        };
        let mut full = vec![0.0; j];
        for (c, &k) in active.iter().enumerate() {
            full[k] = sub_w[c];
        }
        full
    };
    Ok(StackModel { members: fitted, weights, link })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn draw(m: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.random_range(-2.0..2.0), rng.random::<f64>()]).collect();
        let y = x
            .iter()
            .map(|r| Poisson::new((0.5 + 0.4 * r[0]).exp()).unwrap().sample(&mut rng))
            .collect();
        (x, y)
    }

    #[test]
    fn identical_members_split_evenly() {
        let (x, y) = draw(200, 1);
        let lin = RegressorKind::LinearLs { ridge: 1e-8 };
        for link in [LinkKind::Identity, LinkKind::Log] {
            let s = fit_stack(&[lin.clone(), lin.clone()], &x, &y, link, 0).unwrap();
            assert!((s.weights()[0] - 0.5).abs() < 1e-9, "{link}: {:?}", s.weights());
            assert!((s.weights()[1] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_member_takes_all_weight() {
        let (x, y) = draw(150, 2);
        let exact = RegressorKind::Tree { max_depth: None, min_leaf: 1 };
        let zero = RegressorKind::Constant { value: 0.0 };
        for link in [LinkKind::Identity, LinkKind::Log] {
            let s = fit_stack(&[exact.clone(), zero.clone()], &x, &y, link, 0).unwrap();
            assert!(s.weights()[0] >= 0.99, "{link}: {:?}", s.weights());
        }
    }

    #[test]
    fn constant_members_at_the_mean_reproduce_it() {
        let (x, y) = draw(100, 3);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let c = RegressorKind::Constant { value: mean };
        for link in [LinkKind::Identity, LinkKind::Log] {
            let s = fit_stack(&[c.clone(), c.clone()], &x, &y, link, 0).unwrap();
            assert!((s.eval(&x[0]) - mean).abs() < 1e-10);
        }
    }
}
