//! CART regression trees and a subsampled random forest.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Predictor;

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct TreeParams {
    /// `None` grows until leaves are pure or too small.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features tried per split; `None` tries all of them.
    pub mtry: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    params: &'a TreeParams,
    nodes: Vec<Node>,
    n_features: usize,
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(Node::Leaf(mean));
        self.nodes.len() - 1
    }

    fn best_split(&self, idx: &mut [usize], features: &[usize]) -> Option<(usize, f64, f64)> {
        let min_leaf = self.params.min_leaf.max(1);
        let m = idx.len();
        let total: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let base = total * total / m as f64;
        let mut best: Option<(usize, f64, f64)> = None;
        for &f in features {
            idx.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left_sum = 0.0;
            for k in 0..m - 1 {
                left_sum += self.y[idx[k]];
                let n_left = k + 1;
                let n_right = m - n_left;
                if n_left < min_leaf || n_right < min_leaf {
                    continue;
                }
                let here = self.x[idx[k]][f];
                let next = self.x[idx[k + 1]][f];
                if next <= here {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / n_right as f64 - base;
                if gain > 1e-12 && best.is_none_or(|(_, _, g)| gain > g) {
                    best = Some((f, 0.5 * (here + next), gain));
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut Option<&mut ChaCha8Rng>) -> usize {
        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        let min_leaf = self.params.min_leaf.max(1);
        let pure = idx.iter().all(|&i| self.y[i] == self.y[idx[0]]);
        if !depth_ok || idx.len() < 2 * min_leaf || pure {
            return self.leaf(idx);
        }
        let features: Vec<usize> = match (self.params.mtry, rng.as_mut()) {
            (Some(k), Some(r)) if k < self.n_features => {
                let mut chosen = sample(*r, self.n_features, k).into_vec();
                chosen.sort_unstable();
                chosen
            }
            _ => (0..self.n_features).collect(),
        };
        let Some((feature, threshold, _)) = self.best_split(idx, &features) else {
            return self.leaf(idx);
        };
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf(0.0));
        let mut left_idx: Vec<usize> = idx.iter().copied().filter(|&i| self.x[i][feature] <= threshold).collect();
        let mut right_idx: Vec<usize> = idx.iter().copied().filter(|&i| self.x[i][feature] > threshold).collect();
        let left = self.grow(&mut left_idx, depth + 1, rng);
        let right = self.grow(&mut right_idx, depth + 1, rng);
        self.nodes[slot] = Node::Split { feature, threshold, left, right };
        slot
    }
}

impl RegressionTree {
    pub fn fit(x: &[Vec<f64>], y: &[f64], params: &TreeParams) -> Self {
        Self::fit_rows(x, y, (0..y.len()).collect(), params, None)
    }

    fn fit_rows(
        x: &[Vec<f64>],
        y: &[f64],
        mut rows: Vec<usize>,
        params: &TreeParams,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Self {
        let n_features = x.first().map_or(0, |r| r.len());
        let mut builder = Builder { x, y, params, nodes: Vec::new(), n_features };
        if rows.is_empty() {
            return RegressionTree { nodes: vec![Node::Leaf(0.0)] };
        }
        let mut rng = rng;
        builder.grow(&mut rows, 0, &mut rng);
        RegressionTree { nodes: builder.nodes }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf(v) => return *v,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

impl Predictor for RegressionTree {
    fn predict(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
}

#[derive(Debug, Clone)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Fraction of rows drawn without replacement for each tree.
    pub subsample: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RandomForest {
    trees: Vec<RegressionTree>,
}

impl RandomForest {
    pub fn fit(x: &[Vec<f64>], y: &[f64], params: &ForestParams) -> Self {
        let m = y.len();
        let n_features = x.first().map_or(0, |r| r.len());
        let mtry = ((n_features as f64).sqrt().floor() as usize).max(1);
        let tree_params = TreeParams { max_depth: params.max_depth, min_leaf: params.min_leaf, mtry: Some(mtry) };
        let draw = ((params.subsample * m as f64).floor() as usize).clamp(1.min(m), m);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let trees = (0..params.n_trees.max(1))
            .map(|_| {
                let rows = if m == 0 { vec![] } else { sample(&mut rng, m, draw).into_vec() };
                RegressionTree::fit_rows(x, y, rows, &tree_params, Some(&mut rng))
            })
            .collect();
        RandomForest { trees }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.eval(x)).sum::<f64>() / self.trees.len() as f64
    }
}

impl Predictor for RandomForest {
    fn predict(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
}
