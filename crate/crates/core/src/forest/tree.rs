//! Information-gain decision trees over sparse binary rows.
//!
//! Rows carry a non-negative weight: bootstrap multiplicity for forest trees,
//! boosting weight for weak learners. Each split tests one column; rows with
//! the column set go right.
//!
//! Every node draws its candidate columns from an RNG seeded by the tree seed
//! and the node's path from the root, so growing the same tree with a larger
//! depth limit only ever refines leaves of the shallower tree.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::num::{argmax, entropy_bits, Scalar};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaxFeatures {
    /// `floor(sqrt(d))`, at least 1.
    Sqrt,
    All,
    Fixed(usize),
}

impl MaxFeatures {
    pub fn resolve(self, d: usize) -> usize {
        match self {
            MaxFeatures::Sqrt => ((d as f64).sqrt() as usize).max(1),
            MaxFeatures::All => d.max(1),
            MaxFeatures::Fixed(n) => n.clamp(1, d.max(1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub max_features: MaxFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node<T> {
    Split { column: u32, left: u32, right: u32 },
    /// Per-class weight of the training rows that reached this leaf.
    Leaf { dist: Vec<T> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree<T> {
    nodes: Vec<Node<T>>,
    n_classes: usize,
    dimension: usize,
    max_depth: usize,
}

/// Borrowed training rows for one tree.
pub struct TrainRows<'a, T> {
    pub vectors: Vec<&'a FeatureVector>,
    pub labels: Vec<usize>,
    pub weights: Vec<T>,
}

struct Pending {
    slot: usize,
    rows: Vec<u32>,
    depth: usize,
    path: u64,
}

impl<T: Scalar> DecisionTree<T> {
    pub fn fit(
        train: &TrainRows<'_, T>,
        n_classes: usize,
        dimension: usize,
        params: TreeParams,
        seed_value: u64,
    ) -> DecisionTree<T> {
        let mut nodes: Vec<Node<T>> = vec![Node::Leaf { dist: Vec::new() }];
        let mut col_count = vec![0u32; dimension];
        let mut cand_slot = vec![u32::MAX; dimension];
        let mut stack = vec![Pending {
            slot: 0,
            rows: (0..train.vectors.len() as u32).collect(),
            depth: 0,
            path: seed::splitmix64(seed_value),
        }];
        while let Some(p) = stack.pop() {
            let dist = class_weights(train, &p.rows, n_classes);
            let live_classes = dist.iter().filter(|&&w| w > T::zero()).count();
            if p.depth >= params.max_depth || live_classes <= 1 || p.rows.len() < 2 {
                nodes[p.slot] = Node::Leaf { dist };
                continue;
            }
            let split = best_split(
                train,
                &p.rows,
                &dist,
                n_classes,
                params.max_features,
                &mut col_count,
                &mut cand_slot,
                p.path,
            );
            let Some(column) = split else {
                nodes[p.slot] = Node::Leaf { dist };
                continue;
            };
            let (right, left): (Vec<u32>, Vec<u32>) =
                p.rows.iter().partition(|&&r| train.vectors[r as usize].get(column));
            let l = nodes.len();
            nodes.push(Node::Leaf { dist: Vec::new() });
            nodes.push(Node::Leaf { dist: Vec::new() });
            nodes[p.slot] = Node::Split {
                column: column as u32,
                left: l as u32,
                right: l as u32 + 1,
            };
            // right pushed first so the left subtree is laid out first
            stack.push(Pending {
                slot: l + 1,
                rows: right,
                depth: p.depth + 1,
                path: seed::splitmix64(p.path ^ 0x5bd1_e995_0000_0002),
            });
            stack.push(Pending {
                slot: l,
                rows: left,
                depth: p.depth + 1,
                path: seed::splitmix64(p.path ^ 0x5bd1_e995_0000_0001),
            });
        }
        DecisionTree {
            nodes,
            n_classes,
            dimension,
            max_depth: params.max_depth,
        }
    }

    /// Rebuilds a tree from stored nodes, checking structural validity.
    pub fn from_nodes(nodes: Vec<Node<T>>, n_classes: usize, dimension: usize, max_depth: usize) -> Result<Self> {
        let bad = |reason: String| Error::Config(format!("invalid tree: {reason}"));
        if nodes.is_empty() {
            return Err(bad("no nodes".into()));
        }
        for (i, n) in nodes.iter().enumerate() {
            match n {
                Node::Split { column, left, right } => {
                    if *column as usize >= dimension {
                        return Err(bad(format!("node {i} splits on column {column} >= {dimension}")));
                    }
                    if *left as usize >= nodes.len() || *right as usize >= nodes.len() || *left as usize <= i || *right as usize <= i {
                        return Err(bad(format!("node {i} has out-of-order children")));
                    }
                }
                Node::Leaf { dist } => {
                    if dist.len() != n_classes {
                        return Err(bad(format!("leaf {i} has {} classes, expected {n_classes}", dist.len())));
                    }
                }
            }
        }
        Ok(DecisionTree {
            nodes,
            n_classes,
            dimension,
            max_depth,
        })
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Leaf class weights for `x`.
    pub fn leaf_dist(&self, x: &FeatureVector) -> &[T] {
        self.leaf_dist_with(x, None)
    }

    /// Same as [`Self::leaf_dist`] but with `column` forced to `value`.
    pub fn leaf_dist_with(&self, x: &FeatureVector, forced: Option<(usize, bool)>) -> &[T] {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                Node::Leaf { dist } => return dist,
                Node::Split { column, left, right } => {
                    let c = *column as usize;
                    let bit = match forced {
                        Some((fc, v)) if fc == c => v,
                        _ => x.get(c),
                    };
                    i = if bit { *right } else { *left } as usize;
                }
            }
        }
    }

    /// Majority class of the reached leaf; ties go to the lowest class.
    pub fn predict(&self, x: &FeatureVector) -> usize {
        argmax(self.leaf_dist(x)).unwrap_or(0)
    }

    pub fn predict_with(&self, x: &FeatureVector, forced: Option<(usize, bool)>) -> usize {
        argmax(self.leaf_dist_with(x, forced)).unwrap_or(0)
    }

    /// Leaf distribution scaled to sum to one (uniform for an empty leaf).
    pub fn predict_proba(&self, x: &FeatureVector) -> Vec<T> {
        let dist = self.leaf_dist(x);
        let total: T = dist.iter().copied().sum();
        if total > T::zero() {
            dist.iter().map(|&d| d / total).collect()
        } else {
            vec![T::one() / T::of_usize(self.n_classes); self.n_classes]
        }
    }

    /// Columns tested by at least one split, ascending.
    pub fn used_columns(&self) -> Vec<usize> {
        let mut cols: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { column, .. } => Some(*column as usize),
                Node::Leaf { .. } => None,
            })
            .collect();
        cols.sort_unstable();
        cols.dedup();
        cols
    }

    pub fn leaf_total(&self) -> T {
        self.nodes
            .iter()
            .map(|n| match n {
                Node::Leaf { dist } => dist.iter().copied().sum(),
                Node::Split { .. } => T::zero(),
            })
            .sum()
    }

    pub fn depth(&self) -> usize {
        fn go<T>(nodes: &[Node<T>], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left as usize).max(go(nodes, *right as usize)),
            }
        }
        go(&self.nodes, 0)
    }
}

fn class_weights<T: Scalar>(train: &TrainRows<'_, T>, rows: &[u32], n_classes: usize) -> Vec<T> {
    let mut dist = vec![T::zero(); n_classes];
    for &r in rows {
        let r = r as usize;
        dist[train.labels[r]] = dist[train.labels[r]] + train.weights[r];
    }
    dist
}

/// Best information-gain column among a random subset of the columns that
/// are non-constant within the node. Ties go to the lowest column.
#[allow(clippy::too_many_arguments)]
fn best_split<T: Scalar>(
    train: &TrainRows<'_, T>,
    rows: &[u32],
    parent: &[T],
    n_classes: usize,
    max_features: MaxFeatures,
    col_count: &mut [u32],
    cand_slot: &mut [u32],
    path: u64,
) -> Option<usize> {
    let mut touched: Vec<u32> = Vec::new();
    for &r in rows {
        for &c in train.vectors[r as usize].columns() {
            if col_count[c as usize] == 0 {
                touched.push(c);
            }
            col_count[c as usize] += 1;
        }
    }
    let n = rows.len() as u32;
    let mut splittable: Vec<u32> = touched
        .iter()
        .copied()
        .filter(|&c| col_count[c as usize] < n)
        .collect();
    for &c in &touched {
        col_count[c as usize] = 0;
    }
    if splittable.is_empty() {
        return None;
    }
    splittable.sort_unstable();
    let m = max_features.resolve(cand_slot.len());
    let candidates: Vec<u32> = if m >= splittable.len() {
        splittable
    } else {
        let mut rng = seed::rng(path);
        let mut picked: Vec<u32> = index::sample(&mut rng, splittable.len(), m)
            .into_iter()
            .map(|i| splittable[i])
            .collect();
        picked.sort_unstable();
        picked
    };
    for (s, &c) in candidates.iter().enumerate() {
        cand_slot[c as usize] = s as u32;
    }
    let mut ones = vec![T::zero(); candidates.len() * n_classes];
    for &r in rows {
        let r = r as usize;
        let (label, w) = (train.labels[r], train.weights[r]);
        for &c in train.vectors[r].columns() {
            let s = cand_slot[c as usize];
            if s != u32::MAX {
                let cell = &mut ones[s as usize * n_classes + label];
                *cell = *cell + w;
            }
        }
    }
    for &c in &candidates {
        cand_slot[c as usize] = u32::MAX;
    }
    let total: T = parent.iter().copied().sum();
    let h_parent = entropy_bits(parent);
    let mut best: Option<(usize, T)> = None;
    let mut zeros = vec![T::zero(); n_classes];
    for (s, &c) in candidates.iter().enumerate() {
        let one = &ones[s * n_classes..(s + 1) * n_classes];
        for k in 0..n_classes {
            zeros[k] = parent[k] - one[k];
        }
        let w1: T = one.iter().copied().sum();
        let w0 = total - w1;
        let gain = h_parent - (w1 / total) * entropy_bits(one) - (w0 / total) * entropy_bits(&zeros);
        match best {
            Some((_, g)) if gain <= g => {}
            _ => best = Some((c as usize, gain)),
        }
    }
    best.map(|(c, _)| c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(spec: &[(&[u32], usize)], dim: usize) -> (Vec<FeatureVector>, Vec<usize>) {
        (
            spec.iter().map(|(c, _)| FeatureVector::new(c.to_vec(), dim).unwrap()).collect(),
            spec.iter().map(|(_, l)| *l).collect(),
        )
    }

    fn fit(v: &[FeatureVector], labels: &[usize], depth: usize) -> DecisionTree<f64> {
        let train = TrainRows {
            vectors: v.iter().collect(),
            labels: labels.to_vec(),
            weights: vec![1.0; v.len()],
        };
        DecisionTree::fit(
            &train,
            2,
            v[0].dimension(),
            TreeParams {
                max_depth: depth,
                max_features: MaxFeatures::All,
            },
            7,
        )
    }

    #[test]
    fn picks_the_informative_column() {
        let (v, l) = rows(&[(&[0, 1], 0), (&[], 0), (&[2], 1), (&[0, 1, 2], 1)], 3);
        let t = fit(&v, &l, 4);
        assert_eq!(t.used_columns(), vec![2]);
        for (x, y) in v.iter().zip(&l) {
            assert_eq!(t.predict(x), *y);
        }
    }

    #[test]
    fn xor_needs_depth_two() {
        let (v, l) = rows(&[(&[], 0), (&[0, 1], 0), (&[0], 1), (&[1], 1)], 2);
        let shallow = fit(&v, &l, 1);
        let deep = fit(&v, &l, 2);
        let acc = |t: &DecisionTree<f64>| v.iter().zip(&l).filter(|(x, y)| t.predict(x) == **y).count();
        assert!(acc(&shallow) < 4);
        assert_eq!(acc(&deep), 4);
        assert_eq!(deep.depth(), 2);
    }

    #[test]
    fn depth_zero_is_a_single_leaf() {
        let (v, l) = rows(&[(&[0], 0), (&[], 1), (&[], 1)], 1);
        let t = fit(&v, &l, 0);
        assert_eq!(t.nodes().len(), 1);
        assert_eq!(t.predict(&v[0]), 1);
        assert_eq!(t.leaf_total(), 3.0);
    }

    #[test]
    fn forced_value_overrides_the_row() {
        let (v, l) = rows(&[(&[0], 0), (&[0], 0), (&[], 1), (&[], 1)], 1);
        let t = fit(&v, &l, 3);
        assert_eq!(t.predict_with(&v[0], Some((0, false))), 1);
        assert_eq!(t.predict_with(&v[2], Some((0, true))), 0);
    }

    #[test]
    fn from_nodes_rejects_bad_columns() {
        let nodes = vec![
            Node::Split { column: 5, left: 1, right: 2 },
            Node::Leaf { dist: vec![1.0, 0.0] },
            Node::Leaf { dist: vec![0.0, 1.0] },
        ];
        assert!(DecisionTree::from_nodes(nodes.clone(), 2, 3, 1).is_err());
        assert!(DecisionTree::from_nodes(nodes, 2, 6, 1).is_ok());
    }
}
