//! Gradient boosting on logistic loss with exact greedy regression trees.

use super::{sigmoid, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf {
        value: f64,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Flat tree; node 0 is the root and children follow their parent.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, left).max(walk(t, right)),
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbModel {
    /// Log-odds of the training positive rate.
    pub init_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
}

impl GbModel {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.init_score + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }
}

/// Per-row logistic loss for a raw score.
fn log_loss(score: f64, label: bool) -> f64 {
    let m = if label { -score } else { score };
    if m > 0.0 {
        m + (-m).exp().ln_1p()
    } else {
        m.exp().ln_1p()
    }
}

fn mean_loss(scores: &[f64], y: &[bool]) -> f64 {
    scores.iter().zip(y).map(|(&s, &l)| log_loss(s, l)).sum::<f64>() / y.len() as f64
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    scores: &'a [f64],
    residuals: Vec<f64>,
    hessians: Vec<f64>,
    learning_rate: f64,
    max_depth: usize,
    goes_left: Vec<bool>,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Builder<'_> {
    /// `lists[f]` holds this node's rows sorted by feature `f`.
    fn grow(&mut self, lists: Vec<Vec<u32>>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let rows = &lists[0];
        let split = if depth < self.max_depth && rows.len() >= 2 {
            self.best_split(&lists)
        } else {
            None
        };
        let Some(split) = split else {
            let value = self.leaf_value(rows);
            self.nodes[id] = Node::Leaf { value };
            return id;
        };
        for &r in rows {
            self.goes_left[r as usize] = self.x[r as usize][split.feature] <= split.threshold;
        }
        let mut left_lists = Vec::with_capacity(lists.len());
        let mut right_lists = Vec::with_capacity(lists.len());
        for list in lists {
            let (l, r): (Vec<u32>, Vec<u32>) = list.into_iter().partition(|&i| self.goes_left[i as usize]);
            left_lists.push(l);
            right_lists.push(r);
        }
        let left = self.grow(left_lists, depth + 1);
        let right = self.grow(right_lists, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }

    /// Largest reduction in squared error of the residuals; ties keep the
    /// lowest feature index and the lowest threshold.
    fn best_split(&self, lists: &[Vec<u32>]) -> Option<BestSplit> {
        let n = lists[0].len();
        let total: f64 = lists[0].iter().map(|&i| self.residuals[i as usize]).sum();
        let parent = total * total / n as f64;
        let mut best: Option<BestSplit> = None;
        for (feature, list) in lists.iter().enumerate() {
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                let i = list[k] as usize;
                left_sum += self.residuals[i];
                let a = self.x[i][feature];
                let b = self.x[list[k + 1] as usize][feature];
                if a == b {
                    continue;
                }
                let nl = (k + 1) as f64;
                let nr = (n - k - 1) as f64;
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / nl + right_sum * right_sum / nr - parent;
                if gain > 1e-14 && best.as_ref().is_none_or(|s| gain > s.gain) {
                    let mut threshold = a + (b - a) / 2.0;
                    if threshold >= b {
                        threshold = a;
                    }
                    best = Some(BestSplit {
                        feature,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best
    }

    /// Newton step, halved until it no longer raises this leaf's loss.
    fn leaf_value(&self, rows: &[u32]) -> f64 {
        let num: f64 = rows.iter().map(|&i| self.residuals[i as usize]).sum();
        let den: f64 = rows.iter().map(|&i| self.hessians[i as usize]).sum();
        if den <= 1e-300 || num == 0.0 {
            return 0.0;
        }
        let leaf_loss = |v: f64| -> f64 {
            rows.iter()
                .map(|&i| log_loss(self.scores[i as usize] + self.learning_rate * v, self.y[i as usize]))
                .sum()
        };
        let before = leaf_loss(0.0);
        let mut value = num / den;
        for _ in 0..60 {
            if value.is_finite() && leaf_loss(value) <= before {
                return value;
            }
            value *= 0.5;
        }
        0.0
    }
}

/// Returns the model and the mean training log loss after the initial score
/// and after each tree.
pub(super) fn fit(x: &[Vec<f64>], y: &[bool], config: &TrainConfig) -> (GbModel, Vec<f64>) {
    let n = x.len();
    let p = x[0].len();
    let positives = y.iter().filter(|&&b| b).count() as f64;
    let rate = positives / n as f64;
    let init_score = (rate / (1.0 - rate)).ln();

    let sorted: Vec<Vec<u32>> = (0..p)
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| x[a as usize][f].total_cmp(&x[b as usize][f]));
            idx
        })
        .collect();

    let mut scores = vec![init_score; n];
    let mut history = vec![mean_loss(&scores, y)];
    let mut trees = Vec::with_capacity(config.gb_estimators);
    for _ in 0..config.gb_estimators {
        let probs: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
        let residuals = probs
            .iter()
            .zip(y)
            .map(|(&p, &l)| if l { 1.0 } else { 0.0 } - p)
            .collect();
        let hessians = probs.iter().map(|&p| p * (1.0 - p)).collect();
        let mut builder = Builder {
            x,
            y,
            scores: &scores,
            residuals,
            hessians,
            learning_rate: config.gb_learning_rate,
            max_depth: config.gb_max_depth,
            goes_left: vec![false; n],
            nodes: Vec::new(),
        };
        builder.grow(sorted.clone(), 0);
        let tree = Tree { nodes: builder.nodes };
        for (s, row) in scores.iter_mut().zip(x) {
            *s += config.gb_learning_rate * tree.predict(row);
        }
        history.push(mean_loss(&scores, y));
        trees.push(tree);
    }
    (
        GbModel {
            init_score,
            learning_rate: config.gb_learning_rate,
            trees,
        },
        history,
    )
}
