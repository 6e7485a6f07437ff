//! Regression random forest used as the Bayesian-optimization surrogate.
//!
//! Trees are grown on bootstrap resamples with exhaustive SSE splits; the
//! per-tree spread of predictions provides the uncertainty for expected
//! improvement.

use rand::Rng;

#[derive(Debug, Clone)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig { trees: 50, max_depth: 12, min_leaf: 2, bootstrap: true }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    idx = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomForest {
    trees: Vec<Tree>,
}

impl RandomForest {
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &ForestConfig, rng: &mut impl Rng) -> RandomForest {
        assert_eq!(x.len(), y.len());
        assert!(!x.is_empty());
        let n = x.len();
        let trees = (0..cfg.trees)
            .map(|_| {
                let sample: Vec<usize> = if cfg.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                let mut nodes = Vec::new();
                grow(&mut nodes, x, y, sample, 0, cfg);
                Tree { nodes }
            })
            .collect();
        RandomForest { trees }
    }

    /// Mean and standard deviation of the per-tree predictions.
    pub fn predict_stats(&self, x: &[f64]) -> (f64, f64) {
        let preds: Vec<f64> = self.trees.iter().map(|t| t.predict(x)).collect();
        let n = preds.len() as f64;
        let mean = preds.iter().sum::<f64>() / n;
        let var = preds.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

/// Grow a subtree over `indices`; returns the node index.
fn grow(
    nodes: &mut Vec<Node>,
    x: &[Vec<f64>],
    y: &[f64],
    indices: Vec<usize>,
    depth: usize,
    cfg: &ForestConfig,
) -> usize {
    let mean = indices.iter().map(|&i| y[i]).sum::<f64>() / indices.len() as f64;
    let sse: f64 = indices.iter().map(|&i| (y[i] - mean) * (y[i] - mean)).sum();
    if depth >= cfg.max_depth || indices.len() < 2 * cfg.min_leaf || sse <= 1e-24 {
        nodes.push(Node::Leaf { value: mean });
        return nodes.len() - 1;
    }
    let n_features = x[indices[0]].len();
    let mut best: Option<(f64, usize, f64)> = None; // (sse, feature, threshold)
    let mut order = indices.clone();
    for feature in 0..n_features {
        order.sort_by(|&a, &b| x[a][feature].partial_cmp(&x[b][feature]).unwrap());
        // Prefix sums let every split point be scored in one pass.
        let mut left_sum = 0.0;
        let mut left_sq = 0.0;
        let total_sum: f64 = order.iter().map(|&i| y[i]).sum();
        let total_sq: f64 = order.iter().map(|&i| y[i] * y[i]).sum();
        for k in 0..order.len() - 1 {
            let yi = y[order[k]];
            left_sum += yi;
            left_sq += yi * yi;
            let nl = (k + 1) as f64;
            let nr = (order.len() - k - 1) as f64;
            if (k + 1) < cfg.min_leaf || (order.len() - k - 1) < cfg.min_leaf {
                continue;
            }
            let xa = x[order[k]][feature];
            let xb = x[order[k + 1]][feature];
            if xa == xb {
                continue;
            }
            let right_sum = total_sum - left_sum;
            let right_sq = total_sq - left_sq;
            let split_sse =
                (left_sq - left_sum * left_sum / nl) + (right_sq - right_sum * right_sum / nr);
            if best.is_none_or(|(b, _, _)| split_sse < b) {
                best = Some((split_sse, feature, 0.5 * (xa + xb)));
            }
        }
    }
    match best {
        None => {
            nodes.push(Node::Leaf { value: mean });
            nodes.len() - 1
        }
        Some((_, feature, threshold)) => {
            let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
                indices.into_iter().partition(|&i| x[i][feature] <= threshold);
            // Reserve the split slot, then grow the children.
            let me = nodes.len();
            nodes.push(Node::Leaf { value: mean });
            let left = grow(nodes, x, y, left_idx, depth + 1, cfg);
            let right = grow(nodes, x, y, right_idx, depth + 1, cfg);
            nodes[me] = Node::Split { feature, threshold, left, right };
            me
        }
    }
}
