//! Bagged CART forests.
//!
//! Regression trees split on the summed squared error of the children,
//! classification trees on their size-weighted Gini impurity. Thresholds are
//! midpoints between consecutive distinct values; a sample goes left when
//! `x <= threshold`. Candidate splits are scanned by ascending feature index
//! and then ascending threshold, and only a strictly better split replaces
//! the current best, so ties resolve to the lowest (feature, threshold).

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub const SNAPSHOT_VERSION: &str = "tutorsim-forest/1";

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("ragged features: expected {expected}, found {found}")]
    RaggedFeatures { expected: usize, found: usize },
    #[error("feature length mismatch: forest expects {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("only one class present; cannot balance")]
    SingleClass,
    #[error("invalid forest config: {0}")]
    InvalidConfig(String),
    #[error("snapshot version {found:?}, expected {expected:?}")]
    VersionMismatch { found: String, expected: String },
    #[error("malformed snapshot: {0}")]
    MalformedSnapshot(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Features tried per split; `None` picks ⌈√d⌉ for classification and
    /// ⌈d/3⌉ for regression.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 2,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn features_for(&self, task: Task, n_features: usize) -> usize {
        let k = self.features_per_split.unwrap_or(match task {
            Task::Classification => (n_features as f64).sqrt().ceil() as usize,
            Task::Regression => n_features.div_ceil(3),
        });
        k.clamp(1, n_features.max(1))
    }
}

/// Row-major feature matrix with one target per row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    n_features: usize,
    rows: Vec<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(n_features: usize) -> Self {
        Dataset {
            n_features,
            rows: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn push(&mut self, features: &[f64], target: f64) -> Result<(), ForestError> {
        if features.len() != self.n_features {
            return Err(ForestError::RaggedFeatures {
                expected: self.n_features,
                found: features.len(),
            });
        }
        self.rows.extend_from_slice(features);
        self.targets.push(target);
        Ok(())
    }

    pub fn from_rows(rows: &[Vec<f64>], targets: &[f64]) -> Result<Self, ForestError> {
        let first = rows.first().ok_or(ForestError::EmptyDataset)?;
        let mut d = Dataset::new(first.len());
        for (r, t) in rows.iter().zip(targets) {
            d.push(r, *t)?;
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    fn value(&self, i: usize, f: usize) -> f64 {
        self.rows[i * self.n_features + f]
    }
}

/// Duplicate random minority-class samples until both classes (targets 0
/// and 1) are equally frequent. Original samples keep their order; the
/// duplicates are appended.
pub fn upsample_minority(data: &Dataset, seed: u64) -> Result<Dataset, ForestError> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| data.target(i) > 0.5);
    if pos.is_empty() || neg.is_empty() {
        return Err(ForestError::SingleClass);
    }
    let (minority, deficit) = if pos.len() < neg.len() {
        let d = neg.len() - pos.len();
        (pos, d)
    } else {
        let d = pos.len() - neg.len();
        (neg, d)
    };
    let mut out = data.clone();
    let mut rng = seed::rng(seed);
    for _ in 0..deficit {
        let i = minority[rng.random_range(0..minority.len())];
        out.rows.extend_from_within(i * data.n_features..(i + 1) * data.n_features);
        out.targets.push(data.target(i));
    }
    Ok(out)
}

/// One tree as flat node arrays. `feature[i] < 0` marks a leaf.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub feature: Vec<i64>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub value: Vec<f64>,
}

impl Tree {
    fn leaf(value: f64) -> Self {
        Tree {
            feature: vec![-1],
            threshold: vec![0.0],
            left: vec![0],
            right: vec![0],
            value: vec![value],
        }
    }

    pub fn node_count(&self) -> usize {
        self.feature.len()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = 0usize;
        loop {
            let f = self.feature[node];
            if f < 0 {
                return self.value[node];
            }
            node = if x[f as usize] <= self.threshold[node] {
                self.left[node] as usize
            } else {
                self.right[node] as usize
            };
        }
    }

    fn validate(&self, n_features: usize) -> Result<(), ForestError> {
        let n = self.feature.len();
        let bad = |m: &str| Err(ForestError::MalformedSnapshot(m.to_string()));
        if n == 0
            || self.threshold.len() != n
            || self.left.len() != n
            || self.right.len() != n
            || self.value.len() != n
        {
            return bad("node arrays have inconsistent lengths");
        }
        for i in 0..n {
            if self.feature[i] >= 0 {
                let (l, r) = (self.left[i] as usize, self.right[i] as usize);
                // children always come after their parent, so walks terminate
                if self.feature[i] as usize >= n_features || l <= i || r <= i || l >= n || r >= n {
                    return bad("invalid internal node");
                }
            }
        }
        Ok(())
    }
}

struct Split {
    feature: usize,
    threshold: f64,
    score: f64,
}

struct Builder<'a> {
    data: &'a Dataset,
    task: Task,
    config: &'a ForestConfig,
    k_features: usize,
    rng: ChaCha8Rng,
    tree: Tree,
}

impl<'a> Builder<'a> {
    fn impurity(&self, n: f64, sum: f64, sum_sq: f64) -> f64 {
        match self.task {
            // n * variance
            Task::Regression => (sum_sq - sum * sum / n).max(0.0),
            // n * gini = 2 * n1 * n0 / n
            Task::Classification => 2.0 * sum * (n - sum) / n,
        }
    }

    fn best_split(&mut self, idx: &[usize], parent: f64) -> Option<Split> {
        let d = self.data.n_features();
        let min_leaf = self.config.min_samples_leaf.max(1);
        let mut features = index::sample(&mut self.rng, d, self.k_features).into_vec();
        features.sort_unstable();

        let total_sum: f64 = idx.iter().map(|&i| self.data.target(i)).sum();
        let total_sq: f64 = idx.iter().map(|&i| self.data.target(i).powi(2)).sum();
        let n = idx.len();
        let mut best: Option<Split> = None;
        let mut best_score = parent - 1e-12 * (1.0 + parent.abs());
        let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);

        for f in features {
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (self.data.value(i, f), self.data.target(i))));
            pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            if pairs[0].0 == pairs[n - 1].0 {
                continue;
            }
            let (mut ls, mut lsq) = (0.0, 0.0);
            for pos in 0..n - 1 {
                let (x, y) = pairs[pos];
                ls += y;
                lsq += y * y;
                let n_left = pos + 1;
                let next = pairs[pos + 1].0;
                if n_left < min_leaf || n - n_left < min_leaf || x == next {
                    continue;
                }
                let threshold = x + (next - x) / 2.0;
                if !(x < threshold && threshold < next) {
                    continue;
                }
                let nl = n_left as f64;
                let nr = (n - n_left) as f64;
                let score = self.impurity(nl, ls, lsq) + self.impurity(nr, total_sum - ls, total_sq - lsq);
                if score < best_score {
                    best_score = score;
                    best = Some(Split { feature: f, threshold, score });
                }
            }
        }
        best
    }

    fn build(mut self, root: Vec<usize>) -> Tree {
        self.tree = Tree {
            feature: Vec::new(),
            threshold: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            value: Vec::new(),
        };
        // (node id, samples, depth)
        let mut stack = vec![(self.push_node(), root, 0usize)];
        while let Some((node, idx, depth)) = stack.pop() {
            let n = idx.len() as f64;
            let sum: f64 = idx.iter().map(|&i| self.data.target(i)).sum();
            let sum_sq: f64 = idx.iter().map(|&i| self.data.target(i).powi(2)).sum();
            self.tree.value[node] = sum / n;
            let parent = self.impurity(n, sum, sum_sq);
            let depth_ok = self.config.max_depth.is_none_or(|m| depth < m);
            if !depth_ok || idx.len() < 2 * self.config.min_samples_leaf.max(1) || parent <= 0.0 {
                continue;
            }
            let Some(split) = self.best_split(&idx, parent) else {
                continue;
            };
            debug_assert!(split.score < parent);
            let (li, ri): (Vec<usize>, Vec<usize>) = idx
                .iter()
                .partition(|&&i| self.data.value(i, split.feature) <= split.threshold);
            let (l, r) = (self.push_node(), self.push_node());
            self.tree.feature[node] = split.feature as i64;
            self.tree.threshold[node] = split.threshold;
            self.tree.left[node] = l as u32;
            self.tree.right[node] = r as u32;
            stack.push((r, ri, depth + 1));
            stack.push((l, li, depth + 1));
        }
        self.tree
    }

    fn push_node(&mut self) -> usize {
        self.tree.feature.push(-1);
        self.tree.threshold.push(0.0);
        self.tree.left.push(0);
        self.tree.right.push(0);
        self.tree.value.push(0.0);
        self.tree.feature.len() - 1
    }
}

/// A trained ensemble. Output is the mean of the tree outputs; for
/// classification that is the mean class-1 fraction, a probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub task: Task,
    pub config: ForestConfig,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

/// Fit `config.n_trees` trees; tree `i` draws from the substream
/// `mix(config.seed, i)` so the result does not depend on scheduling.
pub fn fit_forest(data: &Dataset, config: &ForestConfig, task: Task) -> Result<Forest, ForestError> {
    if data.is_empty() {
        return Err(ForestError::EmptyDataset);
    }
    if config.n_trees == 0 {
        return Err(ForestError::InvalidConfig("n_trees must be >= 1".into()));
    }
    if task == Task::Classification && data.targets().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(ForestError::InvalidConfig("classification targets must be 0 or 1".into()));
    }
    let k_features = config.features_for(task, data.n_features());
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::indexed_rng(config.seed, t as u64);
            let n = data.len();
            let sample: Vec<usize> = if config.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            if data.n_features() == 0 {
                let mean = sample.iter().map(|&i| data.target(i)).sum::<f64>() / n as f64;
                return Tree::leaf(mean);
            }
            Builder {
                data,
                task,
                config,
                k_features,
                rng,
                tree: Tree::leaf(0.0),
            }
            .build(sample)
        })
        .collect();
    Ok(Forest {
        task,
        config: config.clone(),
        n_features: data.n_features(),
        trees,
    })
}

impl Forest {
    /// A forest of single-leaf trees that always predicts `value`.
    pub fn constant(task: Task, n_features: usize, value: f64) -> Self {
        Forest {
            task,
            config: ForestConfig {
                n_trees: 1,
                ..ForestConfig::default()
            },
            n_features,
            trees: vec![Tree::leaf(value)],
        }
    }

    pub fn predict(&self, features: &[f64]) -> Result<f64, ForestError> {
        if features.len() != self.n_features {
            return Err(ForestError::LengthMismatch {
                expected: self.n_features,
                found: features.len(),
            });
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict(features)).sum();
        Ok(sum / self.trees.len() as f64)
    }

    pub fn to_json(&self) -> Result<String, ForestError> {
        let snap = ForestSnapshotRef {
            version: SNAPSHOT_VERSION,
            forest: self,
        };
        Ok(serde_json::to_string(&snap)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ForestError> {
        let snap: ForestSnapshot = serde_json::from_str(s)?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(ForestError::VersionMismatch {
                found: snap.version,
                expected: SNAPSHOT_VERSION.to_string(),
            });
        }
        if snap.forest.trees.is_empty() {
            return Err(ForestError::MalformedSnapshot("no trees".into()));
        }
        for t in &snap.forest.trees {
            t.validate(snap.forest.n_features)?;
        }
        Ok(snap.forest)
    }
}

#[derive(Serialize)]
struct ForestSnapshotRef<'a> {
    version: &'a str,
    #[serde(flatten)]
    forest: &'a Forest,
}

#[derive(Deserialize)]
struct ForestSnapshot {
    version: String,
    #[serde(flatten)]
    forest: Forest,
}
