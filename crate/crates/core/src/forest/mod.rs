//! Random forest with out-of-bag permutation importance.
//!
//! Importance of a column is the mean, over trees, of the increase in that
//! tree's out-of-bag error when the column's values are scrambled among the
//! tree's OOB rows: `M(f) = Σ_t (e2_t − e1_t) / N_t`. A tree that never splits
//! on the column predicts identically after scrambling and contributes
//! exactly zero, so only (tree, column) pairs with a split are evaluated.

pub mod tree;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureDictionary, FeatureVector, LabeledDataset};
use crate::num::{argmax, Scalar};
use crate::seed;

pub use tree::{DecisionTree, MaxFeatures, Node, TrainRows, TreeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub max_features: MaxFeatures,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 16,
            max_features: MaxFeatures::Sqrt,
            seed: 0,
        }
    }
}

/// How a column is scrambled for permutation importance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// Shuffle the column's values among the tree's OOB rows.
    #[default]
    Permute,
    /// Redraw each value from Bernoulli(p), p = the column's OOB frequency.
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel<T> {
    trees: Vec<DecisionTree<T>>,
    /// Row indices (into the training dataset) left out of each bootstrap.
    oob: Vec<Vec<u32>>,
    /// Bootstrap multiplicity of each training row, per tree.
    in_bag: Vec<Vec<u32>>,
    families: Vec<String>,
    dimension: usize,
    seed: u64,
}

pub fn train_forest<T: Scalar>(dataset: &LabeledDataset, config: &ForestConfig) -> Result<ForestModel<T>> {
    let present = dataset.family_counts().iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::DegenerateLabels(present));
    }
    if config.n_trees == 0 {
        return Err(Error::Config("n_trees must be >= 1".into()));
    }
    let n = dataset.len();
    let params = TreeParams {
        max_depth: config.max_depth,
        max_features: config.max_features,
    };
    let built: Vec<(DecisionTree<T>, Vec<u32>, Vec<u32>)> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let tree_seed = seed::derive_index(config.seed, "forest/tree", t as u64);
            let mut rng = seed::rng(seed::derive(tree_seed, "bootstrap"));
            let mut mult = vec![0u32; n];
            for _ in 0..n {
                mult[rng.random_range(0..n)] += 1;
            }
            let bag: Vec<usize> = (0..n).filter(|&i| mult[i] > 0).collect();
            let train = TrainRows {
                vectors: bag.iter().map(|&i| &dataset.rows[i].vector).collect(),
                labels: bag.iter().map(|&i| dataset.rows[i].label).collect(),
                weights: bag.iter().map(|&i| T::from_u32(mult[i]).unwrap()).collect(),
            };
            let tree = DecisionTree::fit(&train, dataset.n_families(), dataset.dimension(), params, tree_seed);
            let oob = (0..n as u32).filter(|&i| mult[i as usize] == 0).collect();
            (tree, oob, mult)
        })
        .collect();
    let mut trees = Vec::with_capacity(built.len());
    let mut oob = Vec::with_capacity(built.len());
    let mut in_bag = Vec::with_capacity(built.len());
    for (t, o, m) in built {
        trees.push(t);
        oob.push(o);
        in_bag.push(m);
    }
    Ok(ForestModel {
        trees,
        oob,
        in_bag,
        families: dataset.families.clone(),
        dimension: dataset.dimension(),
        seed: config.seed,
    })
}

impl<T: Scalar> ForestModel<T> {
    pub fn trees(&self) -> &[DecisionTree<T>] {
        &self.trees
    }

    pub fn oob_rows(&self, tree: usize) -> &[u32] {
        &self.oob[tree]
    }

    pub fn bootstrap_multiplicity(&self, tree: usize) -> &[u32] {
        &self.in_bag[tree]
    }

    pub fn families(&self) -> &[String] {
        &self.families
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Mean of the trees' normalized leaf distributions, and its argmax.
    pub fn predict(&self, x: &FeatureVector) -> Result<(usize, Vec<T>)> {
        if x.dimension() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                got: x.dimension(),
            });
        }
        let probs = self.mean_proba(self.trees.iter(), x);
        Ok((argmax(&probs).unwrap_or(0), probs))
    }

    fn mean_proba<'a>(&'a self, trees: impl Iterator<Item = &'a DecisionTree<T>>, x: &FeatureVector) -> Vec<T> {
        let k = self.families.len();
        let mut acc = vec![T::zero(); k];
        let mut count = 0usize;
        for t in trees {
            for (a, p) in acc.iter_mut().zip(t.predict_proba(x)) {
                *a = *a + p;
            }
            count += 1;
        }
        if count > 0 {
            let c = T::of_usize(count);
            acc.iter_mut().for_each(|a| *a = *a / c);
        }
        acc
    }

    fn tree_oob_error(&self, t: usize, dataset: &LabeledDataset) -> Option<T> {
        let rows = &self.oob[t];
        if rows.is_empty() {
            return None;
        }
        let miss = rows
            .iter()
            .filter(|&&r| {
                let row = &dataset.rows[r as usize];
                self.trees[t].predict(&row.vector) != row.label
            })
            .count();
        Some(T::of_usize(miss) / T::of_usize(rows.len()))
    }
}

pub fn predict_forest<T: Scalar>(model: &ForestModel<T>, x: &FeatureVector) -> Result<(usize, Vec<T>)> {
    model.predict(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OobReport<T> {
    /// Per-tree OOB misclassification rate; `None` for a tree with no OOB rows.
    pub per_tree: Vec<Option<T>>,
    /// Error of the OOB-only forest vote over rows that were OOB for ≥1 tree.
    pub aggregate: T,
    pub evaluated: usize,
    /// Rows that were in every bootstrap and so have no OOB vote.
    pub excluded: usize,
}

/// `dataset` must be the dataset the model was trained on.
pub fn oob_error<T: Scalar>(model: &ForestModel<T>, dataset: &LabeledDataset) -> OobReport<T> {
    let per_tree: Vec<Option<T>> = (0..model.trees.len())
        .into_par_iter()
        .map(|t| model.tree_oob_error(t, dataset))
        .collect();
    let k = model.families.len();
    let mut votes = vec![vec![T::zero(); k]; dataset.len()];
    let mut seen = vec![false; dataset.len()];
    for (t, rows) in model.oob.iter().enumerate() {
        for &r in rows {
            let r = r as usize;
            for (v, p) in votes[r].iter_mut().zip(model.trees[t].predict_proba(&dataset.rows[r].vector)) {
                *v = *v + p;
            }
            seen[r] = true;
        }
    }
    let mut miss = 0usize;
    let mut evaluated = 0usize;
    for (r, row) in dataset.rows.iter().enumerate() {
        if !seen[r] {
            continue;
        }
        evaluated += 1;
        if argmax(&votes[r]) != Some(row.label) {
            miss += 1;
        }
    }
    let excluded = dataset.len() - evaluated;
    if excluded > 0 {
        warn!("{excluded} rows were in every bootstrap sample and have no OOB estimate");
    }
    OobReport {
        per_tree,
        aggregate: if evaluated > 0 {
            T::of_usize(miss) / T::of_usize(evaluated)
        } else {
            T::zero()
        },
        evaluated,
        excluded,
    }
}

/// Per-column importance in dictionary column order. May be negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> ImportanceVector<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Negative values set to zero.
    pub fn clipped(&self) -> ImportanceVector<T> {
        ImportanceVector {
            values: self.values.iter().map(|&v| v.max(T::zero())).collect(),
        }
    }

    pub fn select(&self, columns: &[usize]) -> ImportanceVector<T> {
        let mut cols = columns.to_vec();
        cols.sort_unstable();
        cols.dedup();
        ImportanceVector {
            values: cols.iter().map(|&c| self.values[c]).collect(),
        }
    }

    /// `token,kind,importance` rows.
    pub fn to_csv(&self, dict: &FeatureDictionary) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["token", "kind", "importance"])?;
        for (c, v) in self.values.iter().enumerate() {
            w.write_record([dict.token(c), dict.kind(c).as_str(), &format!("{v}")])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn scrambled_error<T: Scalar>(
    model: &ForestModel<T>,
    dataset: &LabeledDataset,
    t: usize,
    column: usize,
    mode: NoiseMode,
    seed_value: u64,
) -> T {
    let rows = &model.oob[t];
    let mut values: Vec<bool> = rows.iter().map(|&r| dataset.rows[r as usize].vector.get(column)).collect();
    let mut rng = seed::rng(seed_value);
    match mode {
        NoiseMode::Permute => values.shuffle(&mut rng),
        NoiseMode::Bernoulli => {
            let p = values.iter().filter(|&&v| v).count() as f64 / values.len() as f64;
            values.iter_mut().for_each(|v| *v = rng.random_bool(p));
        }
    }
    let tree = &model.trees[t];
    let miss = rows
        .iter()
        .zip(&values)
        .filter(|(&r, &v)| {
            let row = &dataset.rows[r as usize];
            tree.predict_with(&row.vector, Some((column, v))) != row.label
        })
        .count();
    T::of_usize(miss) / T::of_usize(rows.len())
}

fn importance_with<T: Scalar>(
    model: &ForestModel<T>,
    dataset: &LabeledDataset,
    column: usize,
    seed_value: u64,
    mode: NoiseMode,
    e1: &[Option<T>],
    users: &[usize],
) -> T {
    let n_t = T::of_usize(model.trees.len());
    let col_seed = seed::derive_index(seed_value, "importance/column", column as u64);
    let mut sum = T::zero();
    for &t in users {
        let Some(base) = e1[t] else { continue };
        let e2 = scrambled_error(model, dataset, t, column, mode, seed::derive_index(col_seed, "tree", t as u64));
        sum = sum + (e2 - base);
    }
    sum / n_t
}

/// Importance of one column: `Σ_t (e2_t − e1_t) / N_t`.
pub fn permutation_importance<T: Scalar>(
    model: &ForestModel<T>,
    dataset: &LabeledDataset,
    column: usize,
    seed_value: u64,
    mode: NoiseMode,
) -> T {
    let users: Vec<usize> = (0..model.trees.len())
        .filter(|&t| model.trees[t].used_columns().binary_search(&column).is_ok())
        .collect();
    if users.is_empty() {
        return T::zero();
    }
    let e1: Vec<Option<T>> = (0..model.trees.len()).map(|t| model.tree_oob_error(t, dataset)).collect();
    importance_with(model, dataset, column, seed_value, mode, &e1, &users)
}

/// Importances of every column, in parallel. Summation is in tree order, so
/// the result does not depend on scheduling.
pub fn importances<T: Scalar>(
    model: &ForestModel<T>,
    dataset: &LabeledDataset,
    seed_value: u64,
    mode: NoiseMode,
) -> ImportanceVector<T> {
    let e1: Vec<Option<T>> = (0..model.trees.len())
        .into_par_iter()
        .map(|t| model.tree_oob_error(t, dataset))
        .collect();
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); model.dimension];
    for (t, tree) in model.trees.iter().enumerate() {
        for c in tree.used_columns() {
            users[c].push(t);
        }
    }
    let values = (0..model.dimension)
        .into_par_iter()
        .map(|c| {
            if users[c].is_empty() {
                T::zero()
            } else {
                importance_with(model, dataset, c, seed_value, mode, &e1, &users[c])
            }
        })
        .collect();
    ImportanceVector { values }
}

/// The `top_k` columns by descending importance (ties: ascending token),
/// returned in ascending column order.
pub fn select_top_features<T: Scalar>(importances: &ImportanceVector<T>, dict: &FeatureDictionary, top_k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importances.len()).collect();
    order.sort_by(|&a, &b| {
        importances.values[b]
            .partial_cmp(&importances.values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| dict.token(a).cmp(dict.token(b)))
    });
    let mut keep: Vec<usize> = order.into_iter().take(top_k).collect();
    keep.sort_unstable();
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureVector;

    fn toy(n: usize) -> LabeledDataset {
        // column 0 = label, columns 1..4 = alternating noise
        let dict = FeatureDictionary::from_tokens((0..4).map(|i| format!("perm:c{i}")));
        let rows = (0..n)
            .map(|i| {
                let label = i % 2;
                let mut cols = vec![];
                if label == 1 {
                    cols.push(0);
                }
                if (i / 2) % 2 == 0 {
                    cols.push(1);
                }
                if (i / 3) % 2 == 0 {
                    cols.push(2);
                }
                (format!("r{i:03}"), FeatureVector::new(cols, 4).unwrap(), format!("f{label}"))
            })
            .collect();
        LabeledDataset::new(dict, rows).unwrap()
    }

    #[test]
    fn separable_training_accuracy_is_perfect() {
        let ds = toy(20);
        let m: ForestModel<f64> = train_forest(&ds, &ForestConfig { n_trees: 15, seed: 3, ..Default::default() }).unwrap();
        for r in &ds.rows {
            assert_eq!(m.predict(&r.vector).unwrap().0, r.label);
        }
    }

    #[test]
    fn same_seed_same_model() {
        let ds = toy(20);
        let cfg = ForestConfig { n_trees: 10, seed: 9, ..Default::default() };
        let a: ForestModel<f64> = train_forest(&ds, &cfg).unwrap();
        let b: ForestModel<f64> = train_forest(&ds, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_family_is_rejected() {
        let dict = FeatureDictionary::from_tokens(["perm:a"]);
        let ds = LabeledDataset::new(dict, vec![("x".into(), FeatureVector::empty(1), "f".into())]).unwrap();
        assert!(matches!(train_forest::<f64>(&ds, &ForestConfig::default()), Err(Error::DegenerateLabels(1))));
    }

    #[test]
    fn dimension_mismatch_on_predict() {
        let ds = toy(10);
        let m: ForestModel<f64> = train_forest(&ds, &ForestConfig { n_trees: 3, ..Default::default() }).unwrap();
        assert!(m.predict(&FeatureVector::empty(7)).is_err());
    }

    #[test]
    fn oob_and_bootstrap_partition_rows() {
        let ds = toy(20);
        let m: ForestModel<f64> = train_forest(&ds, &ForestConfig { n_trees: 5, ..Default::default() }).unwrap();
        for t in 0..5 {
            let mult = m.bootstrap_multiplicity(t);
            assert_eq!(mult.iter().sum::<u32>() as usize, ds.len());
            for i in 0..ds.len() {
                assert_eq!(mult[i] == 0, m.oob_rows(t).contains(&(i as u32)));
            }
            assert_eq!(m.trees()[t].leaf_total(), ds.len() as f64);
        }
    }

    #[test]
    fn unused_column_has_zero_importance() {
        let ds = toy(40);
        let m: ForestModel<f64> = train_forest(&ds, &ForestConfig { n_trees: 20, ..Default::default() }).unwrap();
        // column 3 is never set anywhere
        assert_eq!(permutation_importance(&m, &ds, 3, 1, NoiseMode::Permute), 0.0);
        let imp = importances(&m, &ds, 1, NoiseMode::Permute);
        assert_eq!(imp.values[3], 0.0);
        assert_eq!(imp.values[0], permutation_importance(&m, &ds, 0, 1, NoiseMode::Permute));
    }

    #[test]
    fn top_features_tie_break_on_token() {
        let dict = FeatureDictionary::from_tokens(["perm:a", "perm:b", "perm:c"]);
        let imp = ImportanceVector { values: vec![0.0, 0.5, 0.0] };
        assert_eq!(select_top_features(&imp, &dict, 2), vec![0, 1]);
        assert_eq!(select_top_features(&imp, &dict, 3), vec![0, 1, 2]);
    }

    #[test]
    fn importance_csv_has_header() {
        let dict = FeatureDictionary::from_tokens(["perm:a"]);
        let csv = ImportanceVector { values: vec![0.25f64] }.to_csv(&dict).unwrap();
        assert_eq!(csv, "token,kind,importance\nperm:a,perm,0.25\n");
    }
}
