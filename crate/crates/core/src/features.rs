//! Feature tokens, the global feature dictionary, binary vectorization and
//! information-gain ranking.
//!
//! A feature is a string token whose prefix names its kind:
//!
//! | kind     | token                                   |
//! |----------|-----------------------------------------|
//! | perm     | `perm:android.permission.SEND_SMS`      |
//! | hw       | `hw:android.hardware.camera`            |
//! | comp     | `service:com.x.Y` (also `activity:`, `receiver:`, `provider:`) |
//! | intent   | `intent:android.intent.action.BOOT_COMPLETED` |
//! | apirel   | `apirel:<from ApiId>-><to ApiId>`       |

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::callgraph::{
    build_call_graph, flatten_to_matrix, flatten_transitive, pair_feature_tokens, ApiVocabulary,
    RelationshipMatrix, APIREL_PREFIX,
};
use crate::error::{Error, Result};
use crate::ingest::{ApiId, AppSample, ComponentKind};
use crate::num::{entropy_bits, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Perm,
    Hw,
    Comp,
    Intent,
    Apirel,
}

impl FeatureKind {
    pub fn of_token(token: &str) -> Option<Self> {
        let (prefix, _) = token.split_once(':')?;
        match prefix {
            "perm" => Some(FeatureKind::Perm),
            "hw" => Some(FeatureKind::Hw),
            "intent" => Some(FeatureKind::Intent),
            "apirel" => Some(FeatureKind::Apirel),
            p if ComponentKind::from_tag(p).is_some() => Some(FeatureKind::Comp),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Perm => "perm",
            FeatureKind::Hw => "hw",
            FeatureKind::Comp => "comp",
            FeatureKind::Intent => "intent",
            FeatureKind::Apirel => "apirel",
        }
    }
}

/// Explicit (manifest-derived) tokens of one app.
pub fn manifest_tokens(sample: &AppSample) -> BTreeSet<String> {
    let m = &sample.manifest;
    let mut out = BTreeSet::new();
    out.extend(m.permissions.iter().map(|p| format!("perm:{p}")));
    out.extend(m.hardware.iter().map(|h| format!("hw:{h}")));
    out.extend(m.components.iter().map(|(k, n)| format!("{}:{n}", k.as_str())));
    out.extend(m.intent_filters.iter().map(|i| format!("intent:{i}")));
    out
}

/// Every token an app exhibits under the given vocabulary.
pub fn sample_tokens(sample: &AppSample, vocab: &ApiVocabulary, transitive: bool) -> BTreeSet<String> {
    let graph = build_call_graph(sample, vocab);
    let matrix = if transitive {
        flatten_transitive(&graph)
    } else {
        flatten_to_matrix(&graph)
    };
    tokens_with_matrix(sample, &matrix)
}

fn tokens_with_matrix(sample: &AppSample, matrix: &RelationshipMatrix<'_>) -> BTreeSet<String> {
    let mut tokens = manifest_tokens(sample);
    tokens.extend(pair_feature_tokens(matrix));
    tokens
}

/// Ordered token → column mapping. Columns follow `(kind, token)` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "DictionaryDoc", into = "DictionaryDoc")]
pub struct FeatureDictionary {
    entries: Vec<(String, FeatureKind)>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct DictionaryDoc {
    tokens: Vec<String>,
    kinds: Vec<FeatureKind>,
}

impl From<DictionaryDoc> for FeatureDictionary {
    fn from(d: DictionaryDoc) -> Self {
        FeatureDictionary::from_entries(d.tokens.into_iter().zip(d.kinds).collect())
    }
}

impl From<FeatureDictionary> for DictionaryDoc {
    fn from(d: FeatureDictionary) -> Self {
        let (tokens, kinds) = d.entries.into_iter().unzip();
        DictionaryDoc { tokens, kinds }
    }
}

impl FeatureDictionary {
    /// Sorts by `(kind, token)` and drops duplicates and unrecognized tokens.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut entries: BTreeSet<(FeatureKind, String)> = BTreeSet::new();
        for t in tokens {
            let t = t.into();
            match FeatureKind::of_token(&t) {
                Some(k) => {
                    entries.insert((k, t));
                }
                None => warn!("ignoring token with unknown kind: {t}"),
            }
        }
        Self::from_entries(entries.into_iter().map(|(k, t)| (t, k)).collect())
    }

    /// Keeps the given order verbatim.
    fn from_entries(entries: Vec<(String, FeatureKind)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i))
            .collect();
        FeatureDictionary { entries, index }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn column(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, column: usize) -> &str {
        &self.entries[column].0
    }

    pub fn kind(&self, column: usize) -> FeatureKind {
        self.entries[column].1
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(t, _)| t.as_str())
    }

    pub fn count_by_kind(&self) -> BTreeMap<FeatureKind, usize> {
        let mut out = BTreeMap::new();
        for (_, k) in &self.entries {
            *out.entry(*k).or_insert(0) += 1;
        }
        out
    }

    /// Sub-dictionary over `columns`, kept in original column order.
    pub fn select(&self, columns: &[usize]) -> FeatureDictionary {
        let mut cols = columns.to_vec();
        cols.sort_unstable();
        cols.dedup();
        Self::from_entries(cols.into_iter().map(|c| self.entries[c].clone()).collect())
    }

    /// APIs referenced by the dictionary's `apirel` tokens.
    pub fn referenced_apis(&self) -> BTreeSet<ApiId> {
        let mut out = BTreeSet::new();
        for (t, k) in &self.entries {
            if *k != FeatureKind::Apirel {
                continue;
            }
            let body = &t[APIREL_PREFIX.len()..];
            // ApiIds contain "->" themselves, so split on the ";->L" joint.
            if let Some(pos) = body.find(")").and_then(|p| body[p..].find("->L").map(|q| p + q)) {
                if let Some(a) = ApiId::parse(&body[..pos]) {
                    out.insert(a);
                }
                if let Some(b) = ApiId::parse(&body[pos + 2..]) {
                    out.insert(b);
                }
            }
        }
        out
    }
}

/// Builds the dictionary of every token observed in at least one sample.
pub fn build_dictionary<'a>(token_sets: impl IntoIterator<Item = &'a BTreeSet<String>>) -> FeatureDictionary {
    let mut all = BTreeSet::new();
    for set in token_sets {
        all.extend(set.iter().cloned());
    }
    FeatureDictionary::from_tokens(all)
}

/// Sparse binary vector: the set columns, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureVector {
    columns: Vec<u32>,
    dimension: usize,
}

impl FeatureVector {
    pub fn new(mut columns: Vec<u32>, dimension: usize) -> Result<Self> {
        columns.sort_unstable();
        columns.dedup();
        if let Some(&last) = columns.last() {
            if last as usize >= dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    got: last as usize + 1,
                });
            }
        }
        Ok(FeatureVector { columns, dimension })
    }

    pub fn empty(dimension: usize) -> Self {
        FeatureVector {
            columns: Vec::new(),
            dimension,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn columns(&self) -> &[u32] {
        &self.columns
    }

    pub fn nnz(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, column: usize) -> bool {
        self.columns.binary_search(&(column as u32)).is_ok()
    }

    pub fn to_dense<T: Scalar>(&self) -> Vec<T> {
        let mut v = vec![T::zero(); self.dimension];
        for &c in &self.columns {
            v[c as usize] = T::one();
        }
        v
    }

    /// Re-indexes through `map` (old column → new column); unmapped columns drop.
    pub fn remap(&self, map: &[Option<u32>], dimension: usize) -> FeatureVector {
        let mut cols: Vec<u32> = self
            .columns
            .iter()
            .filter_map(|&c| map.get(c as usize).copied().flatten())
            .collect();
        cols.sort_unstable();
        FeatureVector {
            columns: cols,
            dimension,
        }
    }
}

/// Vectorizes a token set; tokens unknown to the dictionary are ignored.
pub fn vectorize_tokens<'a>(tokens: impl IntoIterator<Item = &'a String>, dict: &FeatureDictionary) -> FeatureVector {
    let mut cols: Vec<u32> = tokens
        .into_iter()
        .filter_map(|t| dict.column(t).map(|c| c as u32))
        .collect();
    cols.sort_unstable();
    cols.dedup();
    FeatureVector {
        columns: cols,
        dimension: dict.len(),
    }
}

pub fn vectorize(sample: &AppSample, matrix: &RelationshipMatrix<'_>, dict: &FeatureDictionary) -> FeatureVector {
    vectorize_tokens(&tokens_with_matrix(sample, matrix), dict)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub id: String,
    pub vector: FeatureVector,
    pub label: usize,
}

/// Vectorized rows with family labels (indices into `families`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dictionary: FeatureDictionary,
    pub rows: Vec<Row>,
    pub families: Vec<String>,
}

impl LabeledDataset {
    /// Families are sorted lexicographically; rows keep their input order.
    pub fn new(dictionary: FeatureDictionary, rows: Vec<(String, FeatureVector, String)>) -> Result<Self> {
        let families: Vec<String> = rows
            .iter()
            .map(|(_, _, f)| f.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let fam_index: HashMap<&str, usize> =
            families.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect();
        let mut out = Vec::with_capacity(rows.len());
        for (id, vector, fam) in &rows {
            if vector.dimension() != dictionary.len() {
                return Err(Error::DimensionMismatch {
                    expected: dictionary.len(),
                    got: vector.dimension(),
                });
            }
            out.push(Row {
                id: id.clone(),
                vector: vector.clone(),
                label: fam_index[fam.as_str()],
            });
        }
        Ok(LabeledDataset {
            dictionary,
            rows: out,
            families,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dictionary.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn n_families(&self) -> usize {
        self.families.len()
    }

    pub fn family_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.families.len()];
        for r in &self.rows {
            c[r.label] += 1;
        }
        c
    }

    /// Same dictionary and family list, only the given rows.
    pub fn subset(&self, rows: &[usize]) -> LabeledDataset {
        LabeledDataset {
            dictionary: self.dictionary.clone(),
            rows: rows.iter().map(|&i| self.rows[i].clone()).collect(),
            families: self.families.clone(),
        }
    }

    /// Keeps only `columns` (re-indexed in ascending original order).
    pub fn select_columns(&self, columns: &[usize]) -> LabeledDataset {
        let dictionary = self.dictionary.select(columns);
        let map = self.column_map(&dictionary);
        let dim = dictionary.len();
        LabeledDataset {
            rows: self
                .rows
                .iter()
                .map(|r| Row {
                    id: r.id.clone(),
                    vector: r.vector.remap(&map, dim),
                    label: r.label,
                })
                .collect(),
            dictionary,
            families: self.families.clone(),
        }
    }

    /// old column → column in `other`, by token.
    pub fn column_map(&self, other: &FeatureDictionary) -> Vec<Option<u32>> {
        (0..self.dictionary.len())
            .map(|c| other.column(self.dictionary.token(c)).map(|x| x as u32))
            .collect()
    }

    /// Columns set in at least one of `rows`.
    pub fn observed_columns(&self, rows: &[usize]) -> Vec<usize> {
        let mut seen = vec![false; self.dimension()];
        for &r in rows {
            for &c in self.rows[r].vector.columns() {
                seen[c as usize] = true;
            }
        }
        seen.iter().enumerate().filter(|(_, &s)| s).map(|(c, _)| c).collect()
    }

    /// Drops families with fewer than `min_support` rows and re-indexes the rest.
    pub fn filter_min_support(&self, min_support: usize) -> LabeledDataset {
        let counts = self.family_counts();
        let kept: Vec<usize> = (0..self.families.len()).filter(|&f| counts[f] >= min_support).collect();
        for f in 0..self.families.len() {
            if counts[f] < min_support {
                warn!(
                    "dropping family {} ({} rows < min support {min_support})",
                    self.families[f], counts[f]
                );
            }
        }
        let mut remap = vec![None; self.families.len()];
        for (new, &old) in kept.iter().enumerate() {
            remap[old] = Some(new);
        }
        LabeledDataset {
            dictionary: self.dictionary.clone(),
            rows: self
                .rows
                .iter()
                .filter_map(|r| {
                    remap[r.label].map(|l| Row {
                        id: r.id.clone(),
                        vector: r.vector.clone(),
                        label: l,
                    })
                })
                .collect(),
            families: kept.iter().map(|&f| self.families[f].clone()).collect(),
        }
    }

    /// Dense row-major copy.
    pub fn to_dense<T: Scalar>(&self) -> Vec<Vec<T>> {
        self.rows.iter().map(|r| r.vector.to_dense()).collect()
    }
}

/// Gain from per-family counts of rows having the feature (`ones`) and
/// all rows (`totals`).
pub fn information_gain_counts<T: Scalar>(ones: &[usize], totals: &[usize]) -> T {
    let n: usize = totals.iter().sum();
    if n == 0 || totals.iter().filter(|&&t| t > 0).count() < 2 {
        return T::zero();
    }
    let zeros: Vec<T> = totals.iter().zip(ones).map(|(&t, &o)| T::of_usize(t - o)).collect();
    let ones_t: Vec<T> = ones.iter().map(|&o| T::of_usize(o)).collect();
    let totals_t: Vec<T> = totals.iter().map(|&t| T::of_usize(t)).collect();
    let n1: usize = ones.iter().sum();
    let nt = T::of_usize(n);
    let h_c = entropy_bits(&totals_t);
    let h_cond = T::of_usize(n1) / nt * entropy_bits(&ones_t) + T::of_usize(n - n1) / nt * entropy_bits(&zeros);
    (h_c - h_cond).max(T::zero())
}

/// `H(C) − H(C | column)` in bits.
pub fn information_gain<T: Scalar>(dataset: &LabeledDataset, column: usize) -> T {
    let mut ones = vec![0usize; dataset.n_families()];
    let totals = dataset.family_counts();
    for r in &dataset.rows {
        if r.vector.get(column) {
            ones[r.label] += 1;
        }
    }
    information_gain_counts(&ones, &totals)
}

pub const DEFAULT_API_PREFIXES: [&str; 5] = [
    "Landroid/",
    "Ljava/",
    "Ljavax/",
    "Lorg/apache/",
    "Lcom/google/android/",
];

/// Distinct APIs under any of `prefixes`, ascending.
pub fn candidate_apis<'a>(samples: impl IntoIterator<Item = &'a AppSample>, prefixes: &[String]) -> Vec<ApiId> {
    let mut set = BTreeSet::new();
    for s in samples {
        for api in s.invoked_apis() {
            if prefixes.iter().any(|p| api.as_str().starts_with(p.as_str())) {
                set.insert(api.clone());
            }
        }
    }
    set.into_iter().collect()
}

/// Ranks each candidate API by the information gain of its presence
/// indicator and keeps the best `top_n` (ties: lexicographic).
///
/// Unlabeled samples are ignored.
pub fn prefilter_api_vocabulary(samples: &[AppSample], candidates: &[ApiId], top_n: usize) -> ApiVocabulary {
    let scored = rank_apis_by_gain::<f64>(samples, candidates);
    take_top(scored, top_n)
}

pub fn rank_apis_by_gain<T: Scalar>(samples: &[AppSample], candidates: &[ApiId]) -> Vec<(ApiId, T)> {
    let families: Vec<&str> = samples
        .iter()
        .filter_map(|s| s.family.as_deref())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let fam_index: HashMap<&str, usize> = families.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let cand_index: HashMap<&ApiId, usize> = candidates.iter().enumerate().map(|(i, a)| (a, i)).collect();
    let mut ones = vec![vec![0usize; families.len()]; candidates.len()];
    let mut totals = vec![0usize; families.len()];
    for s in samples {
        let Some(f) = s.family.as_deref().map(|f| fam_index[f]) else {
            continue;
        };
        totals[f] += 1;
        for api in s.invoked_apis() {
            if let Some(&c) = cand_index.get(api) {
                ones[c][f] += 1;
            }
        }
    }
    candidates
        .iter()
        .zip(&ones)
        .map(|(a, o)| (a.clone(), information_gain_counts::<T>(o, &totals)))
        .collect()
}

/// Sorts by descending score then ascending API and keeps `top_n`.
pub fn take_top<T: Scalar>(mut scored: Vec<(ApiId, T)>, top_n: usize) -> ApiVocabulary {
    if scored.len() < top_n {
        info!(
            "only {} candidate APIs for a vocabulary of {top_n}; keeping all",
            scored.len()
        );
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    ApiVocabulary::new(scored.into_iter().take(top_n).map(|(a, _)| a))
}
