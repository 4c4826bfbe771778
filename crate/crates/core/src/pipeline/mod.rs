//! End-to-end training, prediction, cross-validation and feature-count
//! sweeps on top of the individual stages.

mod bundle;
mod dataset;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::callgraph::ApiVocabulary;
use crate::cluster::{kmeans, kmeans_auto, normalize_weights, ClusterModel, KMeansParams};
use crate::ensemble::{train_ensemble, BoostConfig, EnsembleModel};
use crate::error::{Error, Result};
use crate::eval::{average_reports, compute_metrics, cross_validate, make_folds, CvReport, EvalReport, FoldOutput, FoldPlan};
use crate::features::{
    build_dictionary, candidate_apis, prefilter_api_vocabulary, sample_tokens, vectorize_tokens, FeatureDictionary,
    FeatureVector, LabeledDataset, DEFAULT_API_PREFIXES,
};
use crate::forest::{importances, select_top_features, train_forest, ForestConfig, ImportanceVector, MaxFeatures, NoiseMode};
use crate::ingest::AppSample;
use crate::seed;

pub use bundle::{ModelBundle, BUNDLE_VERSION};
pub use dataset::{write_atomic, Dataset, DATASET_VERSION};

/// Number of clusters, or a silhouette search over 2..=10.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KClusters {
    Fixed(usize),
    Auto,
}

impl fmt::Display for KClusters {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KClusters::Fixed(k) => write!(f, "{k}"),
            KClusters::Auto => f.write_str("auto"),
        }
    }
}

impl FromStr for KClusters {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(KClusters::Auto);
        }
        s.parse::<usize>()
            .map(KClusters::Fixed)
            .map_err(|_| Error::Config(format!("k_clusters must be a count or \"auto\", got {s:?}")))
    }
}

impl Serialize for KClusters {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KClusters::Fixed(k) => s.serialize_u64(*k as u64),
            KClusters::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for KClusters {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|k| KClusters::Fixed(k as usize))
                .ok_or_else(|| serde::de::Error::custom("k_clusters must be a non-negative integer")),
            serde_json::Value::String(s) => s.parse().map_err(serde::de::Error::custom),
            other => Err(serde::de::Error::custom(format!("invalid k_clusters {other}"))),
        }
    }
}

pub const AUTO_K_RANGE: std::ops::RangeInclusive<usize> = 2..=10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub api_vocab_size: usize,
    pub top_k_features: usize,
    pub k_clusters: KClusters,
    pub n_trees: usize,
    pub tree_depth: usize,
    pub boost_rounds: usize,
    pub weak_depth: usize,
    pub n_folds: usize,
    pub seed: u64,
    pub api_prefixes: Vec<String>,
    pub min_family_support: usize,
    pub importance_noise: NoiseMode,
    /// Use API reachability instead of direct adjacency for pair features.
    pub transitive_pairs: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            api_vocab_size: 200,
            top_k_features: 600,
            k_clusters: KClusters::Fixed(5),
            n_trees: 100,
            tree_depth: 16,
            boost_rounds: 50,
            weak_depth: 3,
            n_folds: 5,
            seed: 0,
            api_prefixes: DEFAULT_API_PREFIXES.iter().map(|s| s.to_string()).collect(),
            min_family_support: 10,
            importance_noise: NoiseMode::Permute,
            transitive_pairs: false,
        }
    }
}

impl PipelineConfig {
    /// Full-scale settings for a corpus of real apps.
    pub fn full_scale() -> Self {
        PipelineConfig {
            api_vocab_size: 7000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("api_vocab_size", self.api_vocab_size),
            ("top_k_features", self.top_k_features),
            ("n_trees", self.n_trees),
            ("tree_depth", self.tree_depth),
            ("boost_rounds", self.boost_rounds),
            ("weak_depth", self.weak_depth),
            ("min_family_support", self.min_family_support),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_folds < 2 {
            return Err(Error::Config("n_folds must be at least 2".into()));
        }
        if self.k_clusters == KClusters::Fixed(0) {
            return Err(Error::Config("k_clusters must be at least 1".into()));
        }
        if self.api_prefixes.is_empty() {
            return Err(Error::Config("api_prefixes must not be empty".into()));
        }
        Ok(())
    }
}

/// API vocabulary for a set of (labeled) samples.
pub fn select_vocabulary(samples: &[AppSample], config: &PipelineConfig) -> ApiVocabulary {
    let candidates = candidate_apis(samples, &config.api_prefixes);
    prefilter_api_vocabulary(samples, &candidates, config.api_vocab_size)
}

/// Builds the dataset of a whole corpus: API prefilter on the labeled apps,
/// then tokens, dictionary and vectors for every app.
pub fn extract(samples: &[AppSample], config: &PipelineConfig) -> Result<Dataset> {
    config.validate()?;
    let labeled: Vec<AppSample> = samples.iter().filter(|s| s.family.is_some()).cloned().collect();
    let vocabulary = select_vocabulary(&labeled, config);
    let tokens: Vec<BTreeSet<String>> = samples
        .iter()
        .map(|s| sample_tokens(s, &vocabulary, config.transitive_pairs))
        .collect();
    let dictionary = build_dictionary(&tokens);
    let mut rows = Vec::new();
    let mut unlabeled = Vec::new();
    for (s, t) in samples.iter().zip(&tokens) {
        let v = vectorize_tokens(t, &dictionary);
        match &s.family {
            Some(f) => rows.push((s.id.clone(), v, f.clone())),
            None => unlabeled.push((s.id.clone(), v)),
        }
    }
    Ok(Dataset {
        vocabulary,
        labeled: LabeledDataset::new(dictionary, rows)?,
        unlabeled,
    })
}

/// `rows` of `dataset`, restricted to the columns those rows actually use.
pub fn training_view(dataset: &LabeledDataset, rows: &[usize]) -> LabeledDataset {
    let observed = dataset.observed_columns(rows);
    dataset.subset(rows).select_columns(&observed)
}

/// Permutation importances of every column of `dataset`.
pub fn rank_features(dataset: &LabeledDataset, config: &PipelineConfig) -> Result<ImportanceVector<f64>> {
    let forest_cfg = ForestConfig {
        n_trees: config.n_trees,
        max_depth: config.tree_depth,
        max_features: MaxFeatures::Sqrt,
        seed: seed::derive(config.seed, "forest"),
    };
    let forest = train_forest::<f64>(dataset, &forest_cfg)?;
    Ok(importances(
        &forest,
        dataset,
        seed::derive(config.seed, "importance"),
        config.importance_noise,
    ))
}

/// A trained classifier over a selected feature dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted {
    pub dictionary: FeatureDictionary,
    pub ensemble: EnsembleModel<f64>,
    pub clusters: ClusterModel<f64>,
    /// Importances of the selected columns.
    pub importances: ImportanceVector<f64>,
}

impl Fitted {
    /// Predicts a vector expressed in `dictionary` (possibly a different one).
    pub fn predict_foreign(&self, x: &FeatureVector, dictionary: &FeatureDictionary) -> Result<(usize, Vec<f64>)> {
        let v = remap_vector(x, dictionary, &self.dictionary);
        self.ensemble.predict(&v)
    }
}

/// Re-expresses `x` from one dictionary in another; unknown tokens are dropped.
pub fn remap_vector(x: &FeatureVector, from: &FeatureDictionary, to: &FeatureDictionary) -> FeatureVector {
    let cols: Vec<u32> = x
        .columns()
        .iter()
        .filter_map(|&c| to.column(from.token(c as usize)).map(|t| t as u32))
        .collect();
    FeatureVector::new(cols, to.len()).expect("columns come from the target dictionary")
}

/// Top-`top_k` selection, clustering and per-cluster boosting, given
/// importances of every column of `dataset`.
pub fn fit_ranked(
    dataset: &LabeledDataset,
    ranking: &ImportanceVector<f64>,
    top_k: usize,
    config: &PipelineConfig,
) -> Result<Fitted> {
    let columns = select_top_features(ranking, &dataset.dictionary, top_k);
    let selected = dataset.select_columns(&columns);
    let imp = ranking.select(&columns);
    let weights = normalize_weights(&imp);
    let dense: Vec<Vec<f64>> = selected.to_dense();
    let params = KMeansParams::default();
    let clusters = match config.k_clusters {
        KClusters::Fixed(k) => {
            let k = if k > dense.len() {
                warn!("k_clusters {k} exceeds {} training rows; using {}", dense.len(), dense.len());
                dense.len()
            } else {
                k
            };
            kmeans(&dense, k, &weights, params)?
        }
        KClusters::Auto => kmeans_auto(&dense, AUTO_K_RANGE, &weights, params)?,
    };
    let boost = BoostConfig {
        rounds: config.boost_rounds,
        weak_depth: config.weak_depth,
        seed: seed::derive(config.seed, "ensemble"),
    };
    let ensemble = train_ensemble(&selected, &clusters, &boost)?;
    Ok(Fitted {
        dictionary: selected.dictionary,
        ensemble,
        clusters,
        importances: imp,
    })
}

/// Full training on the given rows.
pub fn fit(dataset: &LabeledDataset, config: &PipelineConfig) -> Result<Fitted> {
    config.validate()?;
    let ranking = rank_features(dataset, config)?;
    fit_ranked(dataset, &ranking, config.top_k_features, config)
}

/// Trains on every row of a dataset file and wraps the result in a bundle.
pub fn train(data: &Dataset, config: &PipelineConfig) -> Result<ModelBundle> {
    config.validate()?;
    let ds = data.labeled.filter_min_support(config.min_family_support);
    let present = ds.family_counts().iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::DegenerateLabels(present));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let view = training_view(&ds, &all);
    info!(
        "training on {} rows, {} families, {} observed features",
        view.len(),
        view.n_families(),
        view.dimension()
    );
    let fitted = fit(&view, config)?;
    Ok(ModelBundle::new(config.clone(), data.vocabulary.clone(), fitted.dictionary, fitted.ensemble))
}

/// Training rows and test vectors of one fold, in a shared dictionary.
pub struct FoldData {
    pub train: LabeledDataset,
    pub test: Vec<FeatureVector>,
}

/// Something that can be split into fold-local train/test data.
pub trait FoldSource: Sync {
    fn labels(&self) -> Vec<usize>;
    fn families(&self) -> &[String];
    fn prepare(&self, fold: usize, train: &[usize], test: &[usize]) -> Result<FoldData>;
}

/// Folds over an already extracted dataset. The dictionary of each fold is
/// the set of tokens observed in its training rows.
pub struct DatasetFolds {
    pub dataset: LabeledDataset,
}

impl DatasetFolds {
    pub fn new(dataset: &LabeledDataset, config: &PipelineConfig) -> Self {
        DatasetFolds {
            dataset: dataset.filter_min_support(config.min_family_support),
        }
    }
}

impl FoldSource for DatasetFolds {
    fn labels(&self) -> Vec<usize> {
        self.dataset.labels()
    }

    fn families(&self) -> &[String] {
        &self.dataset.families
    }

    fn prepare(&self, _fold: usize, train: &[usize], test: &[usize]) -> Result<FoldData> {
        let view = training_view(&self.dataset, train);
        let test = test
            .iter()
            .map(|&i| remap_vector(&self.dataset.rows[i].vector, &self.dataset.dictionary, &view.dictionary))
            .collect();
        Ok(FoldData { train: view, test })
    }
}

/// Folds over parsed apps. Every fold redoes the API prefilter, dictionary
/// construction and vectorization from its training apps alone.
pub struct CorpusFolds {
    samples: Vec<AppSample>,
    families: Vec<String>,
    labels: Vec<usize>,
    config: PipelineConfig,
}

impl CorpusFolds {
    /// Keeps labeled apps of families with at least `min_family_support` apps.
    pub fn new(samples: &[AppSample], config: &PipelineConfig) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in samples {
            if let Some(f) = &s.family {
                *counts.entry(f.as_str()).or_default() += 1;
            }
        }
        for (f, &n) in &counts {
            if n < config.min_family_support {
                warn!("dropping family {f} ({n} apps < min support {})", config.min_family_support);
            }
        }
        let families: Vec<String> = counts
            .iter()
            .filter(|(_, &n)| n >= config.min_family_support)
            .map(|(f, _)| f.to_string())
            .collect();
        let kept: Vec<AppSample> = samples
            .iter()
            .filter(|s| s.family.as_ref().is_some_and(|f| families.binary_search(f).is_ok()))
            .cloned()
            .collect();
        let labels = kept
            .iter()
            .map(|s| families.binary_search(s.family.as_ref().expect("filtered to labeled")).expect("kept family"))
            .collect();
        Ok(CorpusFolds {
            samples: kept,
            families,
            labels,
            config: config.clone(),
        })
    }

    pub fn samples(&self) -> &[AppSample] {
        &self.samples
    }
}

impl FoldSource for CorpusFolds {
    fn labels(&self) -> Vec<usize> {
        self.labels.clone()
    }

    fn families(&self) -> &[String] {
        &self.families
    }

    fn prepare(&self, _fold: usize, train: &[usize], test: &[usize]) -> Result<FoldData> {
        let train_apps: Vec<AppSample> = train.iter().map(|&i| self.samples[i].clone()).collect();
        let vocab = select_vocabulary(&train_apps, &self.config);
        let t = self.config.transitive_pairs;
        let train_tokens: Vec<BTreeSet<String>> = train_apps.iter().map(|s| sample_tokens(s, &vocab, t)).collect();
        let dictionary = build_dictionary(&train_tokens);
        let rows = train_tokens
            .iter()
            .zip(train)
            .map(|(tok, &i)| {
                (
                    self.samples[i].id.clone(),
                    vectorize_tokens(tok, &dictionary),
                    self.families[self.labels[i]].clone(),
                )
            })
            .collect();
        let mut ds = LabeledDataset::new(dictionary, rows)?;
        // keep the global family indexing even if a family is absent here
        if ds.families != self.families {
            let map: Vec<usize> = ds
                .families
                .iter()
                .map(|f| self.families.binary_search(f).expect("subset of families"))
                .collect();
            ds.rows.iter_mut().for_each(|r| r.label = map[r.label]);
            ds.families = self.families.clone();
        }
        let test = test
            .iter()
            .map(|&i| vectorize_tokens(&sample_tokens(&self.samples[i], &vocab, t), &ds.dictionary))
            .collect();
        Ok(FoldData { train: ds, test })
    }
}

fn fold_config(config: &PipelineConfig, fold: usize) -> PipelineConfig {
    PipelineConfig {
        seed: seed::derive_index(config.seed, "fold", fold as u64),
        ..config.clone()
    }
}

pub fn fold_plan<S: FoldSource + ?Sized>(source: &S, config: &PipelineConfig) -> Result<FoldPlan> {
    make_folds(
        &source.labels(),
        source.families(),
        config.n_folds,
        seed::derive(config.seed, "folds"),
    )
}

/// Stratified cross-validation of the whole pipeline.
pub fn evaluate<S: FoldSource + ?Sized>(source: &S, config: &PipelineConfig) -> Result<CvReport> {
    config.validate()?;
    let plan = fold_plan(source, config)?;
    let run = |fold: usize, train: &[usize], test: &[usize]| -> Result<FoldOutput> {
        let data = source.prepare(fold, train, test)?;
        let fitted = fit(&data.train, &fold_config(config, fold))?;
        let predictions = data
            .test
            .iter()
            .map(|x| fitted.predict_foreign(x, &data.train.dictionary).map(|p| p.0))
            .collect::<Result<Vec<_>>>()?;
        info!("fold {fold}: {} train rows, {} test rows", train.len(), test.len());
        Ok(FoldOutput {
            predictions,
            selected_tokens: fitted.dictionary.tokens().map(str::to_string).collect(),
        })
    };
    cross_validate(&source.labels(), source.families(), &plan, &run)
}

/// One point of a feature-count sweep; `top_k == None` means every feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub top_k: Option<usize>,
    pub report: EvalReport,
    pub pooled: EvalReport,
}

pub const DEFAULT_SWEEP: [usize; 12] = [5, 10, 25, 50, 100, 200, 300, 400, 600, 800, 1000, 1500];

/// Cross-validated accuracy as a function of the number of kept features.
/// Forest importances are computed once per fold and reused for every count.
pub fn sweep<S: FoldSource + ?Sized>(source: &S, config: &PipelineConfig, top_ks: &[usize]) -> Result<Vec<SweepPoint>> {
    config.validate()?;
    let plan = fold_plan(source, config)?;
    let labels = source.labels();
    let families = source.families();
    let mut folds = Vec::with_capacity(plan.n_folds);
    for fold in 0..plan.n_folds {
        let (train, test) = (plan.train_rows(fold), plan.test_rows(fold));
        let data = source.prepare(fold, &train, &test)?;
        let cfg = fold_config(config, fold);
        let ranking = rank_features(&data.train, &cfg)?;
        folds.push((test, data, ranking, cfg));
    }
    let min_dim = folds.iter().map(|f| f.1.train.dimension()).min().unwrap_or(0);
    let mut ks: Vec<Option<usize>> = top_ks
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|&k| {
            let keep = k >= 1 && k < min_dim;
            if !keep {
                warn!("skipping top_k {k}: not below the smallest fold dimension {min_dim}");
            }
            keep
        })
        .map(Some)
        .collect();
    ks.push(None);
    let mut out = Vec::with_capacity(ks.len());
    for k in ks {
        let mut reports = Vec::with_capacity(folds.len());
        let mut all_pred = vec![0usize; labels.len()];
        for (test, data, ranking, cfg) in &folds {
            let top = k.unwrap_or(data.train.dimension());
            let fitted = fit_ranked(&data.train, ranking, top, cfg)?;
            let pred = data
                .test
                .iter()
                .map(|x| fitted.predict_foreign(x, &data.train.dictionary).map(|p| p.0))
                .collect::<Result<Vec<_>>>()?;
            let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
            reports.push(compute_metrics(&truth, &pred, families)?);
            for (&i, &p) in test.iter().zip(&pred) {
                all_pred[i] = p;
            }
        }
        let report = average_reports(&reports);
        info!(
            "top_k {}: accuracy {:.4}, macro F1 {:.4}",
            k.map_or("all".to_string(), |k| k.to_string()),
            report.accuracy,
            report.macro_f1
        );
        out.push(SweepPoint {
            top_k: k,
            report,
            pooled: compute_metrics(&labels, &all_pred, families)?,
        });
    }
    Ok(out)
}

/// `top_k,accuracy,macro_precision,macro_recall,macro_f1,mean_family_f1`
pub fn sweep_csv(points: &[SweepPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["top_k", "accuracy", "macro_precision", "macro_recall", "macro_f1", "mean_family_f1"])?;
    for p in points {
        let r = &p.report;
        w.write_record([
            p.top_k.map_or("all".to_string(), |k| k.to_string()),
            format!("{:.6}", r.accuracy),
            format!("{:.6}", r.macro_precision),
            format!("{:.6}", r.macro_recall),
            format!("{:.6}", r.macro_f1),
            format!("{:.6}", r.mean_family_f1),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
