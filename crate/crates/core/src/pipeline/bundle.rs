use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::dataset::{read_header, seal, unseal, write_atomic, write_preamble};
use super::PipelineConfig;
use crate::callgraph::ApiVocabulary;
use crate::cluster::WeightVector;
use crate::ensemble::{BoostRound, BoostedClassifier, EnsembleModel};
use crate::error::{Error, Result};
use crate::features::{sample_tokens, vectorize_tokens, FeatureDictionary, FeatureVector};
use crate::forest::{DecisionTree, Node};
use crate::ingest::AppSample;

pub const BUNDLE_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MFMODEL\0";

/// A trained model plus everything needed to featurize new apps.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: PipelineConfig,
    pub vocabulary: ApiVocabulary,
    /// Dictionary of the selected features.
    pub dictionary: FeatureDictionary,
    pub ensemble: EnsembleModel<f64>,
}

#[derive(Serialize, Deserialize)]
struct RoundMeta {
    alpha: f64,
    error: f64,
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    families: Vec<usize>,
    prior: Vec<f64>,
    rounds: Vec<RoundMeta>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: PipelineConfig,
    vocabulary: ApiVocabulary,
    dictionary: FeatureDictionary,
    families: Vec<String>,
    weights: Vec<f64>,
    centers: Vec<Vec<f64>>,
    classifiers: Vec<ClassifierMeta>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn write_tree(out: &mut Vec<u8>, tree: &DecisionTree<f64>) {
    let w = |out: &mut Vec<u8>, v: usize| out.write_u32::<LE>(v as u32).expect("vec write");
    w(out, tree.n_classes());
    w(out, tree.dimension());
    w(out, tree.max_depth());
    w(out, tree.nodes().len());
    for node in tree.nodes() {
        match node {
            Node::Split { column, left, right } => {
                out.push(0);
                for v in [*column, *left, *right] {
                    out.write_u32::<LE>(v).expect("vec write");
                }
            }
            Node::Leaf { dist } => {
                out.push(1);
                w(out, dist.len());
                for &d in dist {
                    out.write_u64::<LE>(d.to_bits()).expect("vec write");
                }
            }
        }
    }
}

fn read_tree(c: &mut Cursor<&[u8]>, path: &Path) -> Result<DecisionTree<f64>> {
    let trunc = |_| corrupt(path, "truncated tree section");
    let mut r = || c.read_u32::<LE>().map(|v| v as usize).map_err(trunc);
    let (n_classes, dimension, max_depth, n_nodes) = (r()?, r()?, r()?, r()?);
    let mut nodes = Vec::with_capacity(n_nodes.min(1 << 20));
    for _ in 0..n_nodes {
        let tag = c.read_u8().map_err(trunc)?;
        match tag {
            0 => {
                let column = c.read_u32::<LE>().map_err(trunc)?;
                let left = c.read_u32::<LE>().map_err(trunc)?;
                let right = c.read_u32::<LE>().map_err(trunc)?;
                nodes.push(Node::Split { column, left, right });
            }
            1 => {
                let len = c.read_u32::<LE>().map_err(trunc)? as usize;
                let mut dist = Vec::with_capacity(len.min(1 << 16));
                for _ in 0..len {
                    dist.push(f64::from_bits(c.read_u64::<LE>().map_err(trunc)?));
                }
                nodes.push(Node::Leaf { dist });
            }
            t => return Err(corrupt(path, format!("unknown node tag {t}"))),
        }
    }
    DecisionTree::from_nodes(nodes, n_classes, dimension, max_depth).map_err(|e| corrupt(path, e.to_string()))
}

impl ModelBundle {
    pub fn new(
        config: PipelineConfig,
        vocabulary: ApiVocabulary,
        dictionary: FeatureDictionary,
        ensemble: EnsembleModel<f64>,
    ) -> Self {
        ModelBundle {
            config,
            vocabulary,
            dictionary,
            ensemble,
        }
    }

    pub fn families(&self) -> &[String] {
        &self.ensemble.families
    }

    /// Featurizes an app against the bundle's vocabulary and dictionary;
    /// tokens the model never saw are dropped.
    pub fn vectorize(&self, sample: &AppSample) -> FeatureVector {
        let tokens = sample_tokens(sample, &self.vocabulary, self.config.transitive_pairs);
        vectorize_tokens(&tokens, &self.dictionary)
    }

    pub fn predict_sample(&self, sample: &AppSample) -> Result<(usize, Vec<f64>)> {
        self.ensemble.predict(&self.vectorize(sample))
    }

    /// Predicts a vector expressed in some other dictionary.
    pub fn predict_foreign(&self, x: &FeatureVector, dictionary: &FeatureDictionary) -> Result<(usize, Vec<f64>)> {
        self.ensemble.predict(&super::remap_vector(x, dictionary, &self.dictionary))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let e = &self.ensemble;
        let header = Header {
            version: BUNDLE_VERSION,
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
            dictionary: self.dictionary.clone(),
            families: e.families.clone(),
            weights: e.weights.w.clone(),
            centers: e.centers.clone(),
            classifiers: e
                .classifiers
                .iter()
                .map(|c| ClassifierMeta {
                    families: c.families.clone(),
                    prior: c.prior.clone(),
                    rounds: c
                        .rounds
                        .iter()
                        .map(|r| RoundMeta {
                            alpha: r.alpha,
                            error: r.error,
                        })
                        .collect(),
                })
                .collect(),
        };
        let mut out = Vec::new();
        write_preamble(&mut out, MAGIC, BUNDLE_VERSION, &serde_json::to_vec_pretty(&header)?);
        let mut trees = Vec::new();
        for c in &e.classifiers {
            for r in &c.rounds {
                write_tree(&mut trees, &r.tree);
            }
        }
        out.write_u64::<LE>(trees.len() as u64).expect("vec write");
        out.extend_from_slice(&trees);
        Ok(seal(out))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let body = unseal(bytes, path)?;
        let (_, header, rest) = read_header(body, MAGIC, BUNDLE_VERSION, path)?;
        let header: Header = serde_json::from_slice(header)?;
        let mut c = Cursor::new(rest);
        let len = c.read_u64::<LE>().map_err(|_| corrupt(path, "truncated tree length"))? as usize;
        let start = c.position() as usize;
        if rest.len() != start + len {
            return Err(corrupt(path, "tree section length mismatch"));
        }
        let mut tc = Cursor::new(&rest[start..]);
        let n_global = header.families.len();
        let dim = header.dictionary.len();
        if header.weights.len() != dim || header.centers.iter().any(|c| c.len() != dim) {
            return Err(corrupt(path, "weights or centers do not match the dictionary"));
        }
        if header.centers.len() != header.classifiers.len() {
            return Err(corrupt(path, "one classifier per center expected"));
        }
        let mut classifiers = Vec::with_capacity(header.classifiers.len());
        for meta in header.classifiers {
            if meta.families.iter().any(|&f| f >= n_global) || meta.prior.len() != meta.families.len() {
                return Err(corrupt(path, "classifier family list out of range"));
            }
            let mut rounds = Vec::with_capacity(meta.rounds.len());
            for r in meta.rounds {
                let tree = read_tree(&mut tc, path)?;
                if tree.n_classes() != meta.families.len() || tree.dimension() != dim {
                    return Err(corrupt(path, "weak learner shape mismatch"));
                }
                rounds.push(BoostRound {
                    tree,
                    alpha: r.alpha,
                    error: r.error,
                });
            }
            classifiers.push(BoostedClassifier {
                families: meta.families,
                n_global,
                rounds,
                prior: meta.prior,
            });
        }
        let mut probe = [0u8; 1];
        if tc.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
            return Err(corrupt(path, "trailing bytes in tree section"));
        }
        Ok(ModelBundle {
            config: header.config,
            vocabulary: header.vocabulary,
            dictionary: header.dictionary,
            ensemble: EnsembleModel {
                centers: header.centers,
                weights: WeightVector { w: header.weights },
                classifiers,
                families: header.families,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
