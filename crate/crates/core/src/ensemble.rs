//! Per-cluster multiclass boosting and distance-weighted prediction.
//!
//! Every cluster gets its own SAMME-boosted classifier over shallow
//! information-gain trees. At prediction time a sample's distances to the
//! cluster centers are turned into weights `(1 + d_j)^-1 / Σ_q (1 + d_q)^-1`
//! and the per-cluster class probabilities are mixed with those weights.

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{wdist, ClusterModel, WeightVector};
use crate::error::{Error, Result};
use crate::features::{FeatureVector, LabeledDataset};
use crate::forest::{DecisionTree, MaxFeatures, TrainRows, TreeParams};
use crate::num::{argmax, compensated_sum, Scalar};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoostConfig {
    pub rounds: usize,
    pub weak_depth: usize,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            rounds: 50,
            weak_depth: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostRound<T> {
    pub tree: DecisionTree<T>,
    pub alpha: T,
    /// Weighted training error of this round's learner.
    pub error: T,
}

/// SAMME classifier trained on one cluster.
///
/// `families` holds the global family indices seen in the cluster, ascending;
/// the weak learners predict positions in that list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedClassifier<T> {
    pub families: Vec<usize>,
    pub n_global: usize,
    pub rounds: Vec<BoostRound<T>>,
    /// Class frequencies in the cluster, used when no round was admissible.
    pub prior: Vec<T>,
}

impl<T: Scalar> BoostedClassifier<T> {
    pub fn constant(family: usize, n_global: usize) -> Self {
        BoostedClassifier {
            families: vec![family],
            n_global,
            rounds: Vec::new(),
            prior: vec![T::one()],
        }
    }

    pub fn is_constant(&self) -> bool {
        self.families.len() == 1
    }

    /// Normalized vote share over the cluster-local families.
    pub fn local_proba(&self, x: &FeatureVector) -> Vec<T> {
        if self.rounds.is_empty() {
            return self.prior.clone();
        }
        let mut votes = vec![T::zero(); self.families.len()];
        for r in &self.rounds {
            let k = r.tree.predict(x);
            votes[k] = votes[k] + r.alpha;
        }
        let total = compensated_sum(votes.iter().copied());
        votes.iter().map(|&v| v / total).collect()
    }

    /// Class probabilities over the global family list; families absent from
    /// the cluster get 0.
    pub fn proba(&self, x: &FeatureVector) -> Vec<T> {
        let mut out = vec![T::zero(); self.n_global];
        for (p, &f) in self.local_proba(x).iter().zip(&self.families) {
            out[f] = *p;
        }
        out
    }

    pub fn predict(&self, x: &FeatureVector) -> usize {
        argmax(&self.proba(x)).unwrap_or(0)
    }
}

/// SAMME over the given rows. `labels` are global family indices.
pub fn train_adaboost<T: Scalar>(
    vectors: &[&FeatureVector],
    labels: &[usize],
    n_global: usize,
    dimension: usize,
    config: &BoostConfig,
) -> BoostedClassifier<T> {
    let mut families: Vec<usize> = labels.to_vec();
    families.sort_unstable();
    families.dedup();
    if families.len() <= 1 {
        return BoostedClassifier::constant(families.first().copied().unwrap_or(0), n_global);
    }
    let k = families.len();
    let local: Vec<usize> = labels
        .iter()
        .map(|l| families.binary_search(l).expect("label is in its own family list"))
        .collect();
    let n = vectors.len();
    let mut prior = vec![T::zero(); k];
    for &l in &local {
        prior[l] = prior[l] + T::one();
    }
    prior.iter_mut().for_each(|p| *p = *p / T::of_usize(n));

    let kf = T::of_usize(k);
    let threshold = T::one() - T::one() / kf;
    let params = TreeParams {
        max_depth: config.weak_depth,
        max_features: MaxFeatures::All,
    };
    let mut weights = vec![T::one() / T::of_usize(n); n];
    let mut rounds = Vec::new();
    for m in 0..config.rounds {
        let train = TrainRows {
            vectors: vectors.to_vec(),
            labels: local.clone(),
            weights: weights.clone(),
        };
        let tree = DecisionTree::fit(&train, k, dimension, params, seed::derive_index(config.seed, "boost/round", m as u64));
        let wrong: Vec<bool> = (0..n).map(|i| tree.predict(vectors[i]) != local[i]).collect();
        let total = compensated_sum(weights.iter().copied());
        let err = compensated_sum((0..n).filter(|&i| wrong[i]).map(|i| weights[i])) / total;
        if err >= threshold {
            debug!("boosting halted at round {m}: error {err} not below {threshold}");
            break;
        }
        if err <= T::zero() {
            rounds.push(BoostRound {
                tree,
                alpha: T::one(),
                error: err,
            });
            break;
        }
        let alpha = ((T::one() - err) / err).ln() + (kf - T::one()).ln();
        let boost = alpha.exp();
        for i in 0..n {
            if wrong[i] {
                weights[i] = weights[i] * boost;
            }
        }
        let s = compensated_sum(weights.iter().copied());
        weights.iter_mut().for_each(|w| *w = *w / s);
        rounds.push(BoostRound { tree, alpha, error: err });
    }
    BoostedClassifier {
        families,
        n_global,
        rounds,
        prior,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel<T> {
    pub centers: Vec<Vec<T>>,
    pub weights: WeightVector<T>,
    pub classifiers: Vec<BoostedClassifier<T>>,
    pub families: Vec<String>,
}

impl<T: Scalar> EnsembleModel<T> {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dimension(&self) -> usize {
        self.weights.len()
    }

    pub fn predict(&self, x: &FeatureVector) -> Result<(usize, Vec<T>)> {
        predict(x, self)
    }
}

/// Weighted distance from `x` to every cluster center.
pub fn distance_row<T: Scalar>(x: &FeatureVector, model: &EnsembleModel<T>) -> Result<Vec<T>> {
    if x.dimension() != model.dimension() {
        return Err(Error::DimensionMismatch {
            expected: model.dimension(),
            got: x.dimension(),
        });
    }
    let dense: Vec<T> = x.to_dense();
    Ok(model.centers.iter().map(|c| wdist(&dense, c, &model.weights.w)).collect())
}

/// `w_j = (1 + d_j)^-1 / Σ_q (1 + d_q)^-1`.
pub fn adaptive_weights<T: Scalar>(d: &[T]) -> Vec<T> {
    let inv: Vec<T> = d.iter().map(|&x| T::one() / (T::one() + x)).collect();
    let total = compensated_sum(inv.iter().copied());
    inv.iter().map(|&v| v / total).collect()
}

/// Family index (ties: earliest) and the per-family score vector.
pub fn predict<T: Scalar>(x: &FeatureVector, model: &EnsembleModel<T>) -> Result<(usize, Vec<T>)> {
    let w = adaptive_weights(&distance_row(x, model)?);
    let mut scores = vec![T::zero(); model.families.len()];
    for (clf, &wj) in model.classifiers.iter().zip(&w) {
        for (s, p) in scores.iter_mut().zip(clf.proba(x)) {
            *s = *s + p * wj;
        }
    }
    Ok((argmax(&scores).unwrap_or(0), scores))
}

/// One boosted classifier per cluster, each trained on that cluster's rows.
pub fn train_ensemble<T: Scalar>(
    dataset: &LabeledDataset,
    clusters: &ClusterModel<T>,
    config: &BoostConfig,
) -> Result<EnsembleModel<T>> {
    if clusters.assignments.len() != dataset.len() {
        return Err(Error::LengthMismatch(clusters.assignments.len(), dataset.len()));
    }
    if clusters.weights.len() != dataset.dimension() {
        return Err(Error::DimensionMismatch {
            expected: clusters.weights.len(),
            got: dataset.dimension(),
        });
    }
    let n_global = dataset.n_families();
    let classifiers: Vec<BoostedClassifier<T>> = (0..clusters.k)
        .into_par_iter()
        .map(|j| {
            let members = clusters.members(j);
            let vectors: Vec<&FeatureVector> = members.iter().map(|&i| &dataset.rows[i].vector).collect();
            let labels: Vec<usize> = members.iter().map(|&i| dataset.rows[i].label).collect();
            let cfg = BoostConfig {
                seed: seed::derive_index(config.seed, "ensemble/cluster", j as u64),
                ..*config
            };
            train_adaboost(&vectors, &labels, n_global, dataset.dimension(), &cfg)
        })
        .collect();
    Ok(EnsembleModel {
        centers: clusters.centers.clone(),
        weights: clusters.weights.clone(),
        classifiers,
        families: dataset.families.clone(),
    })
}

/// `sample_id,predicted_family,score_<family>...`
pub fn predictions_csv<T: Scalar>(families: &[String], rows: &[(String, usize, Vec<T>)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string(), "predicted_family".to_string()];
    header.extend(families.iter().map(|f| format!("score_{f}")));
    w.write_record(&header)?;
    for (id, label, scores) in rows {
        let mut rec = vec![id.clone(), families[*label].clone()];
        rec.extend(scores.iter().map(|s| format!("{s}")));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
