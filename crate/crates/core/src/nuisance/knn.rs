use super::Predictor;

/// k-nearest-neighbour average under Euclidean distance. Ties are broken by
/// training order so predictions are deterministic.
#[derive(Debug, Clone)]
pub struct KnnModel {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    k: usize,
}

impl KnnModel {
    pub fn fit(x: &[Vec<f64>], y: &[f64], k: usize) -> Self {
        KnnModel { x: x.to_vec(), y: y.to_vec(), k: k.max(1) }
    }

    pub fn eval(&self, q: &[f64]) -> f64 {
        let m = self.y.len();
        if m == 0 {
            return 0.0;
        }
        let k = self.k.min(m);
        if k == m {
            return self.y.iter().sum::<f64>() / m as f64;
        }
        let mut dist: Vec<(f64, usize)> = self
            .x
            .iter()
            .enumerate()
            .map(|(i, row)| (row.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        dist[..k].iter().map(|&(_, i)| self.y[i]).sum::<f64>() / k as f64
    }
}

impl Predictor for KnnModel {
    fn predict(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_neighbourhood_is_global_mean() {
        let x = vec![vec![0.0], vec![1.0], vec![5.0], vec![9.0]];
        let y = vec![1.0, 2.0, 3.0, 6.0];
        let knn = KnnModel::fit(&x, &y, 4);
        assert_eq!(knn.eval(&[100.0]), 3.0);
        assert_eq!(knn.eval(&[-3.0]), 3.0);
    }

    #[test]
    fn nearest_neighbour() {
        let x = vec![vec![0.0], vec![1.0], vec![5.0]];
        let y = vec![1.0, 2.0, 3.0];
        let knn = KnnModel::fit(&x, &y, 1);
        assert_eq!(knn.eval(&[4.0]), 3.0);
        assert_eq!(KnnModel::fit(&x, &y, 2).eval(&[0.4]), 1.5);
    }
}
