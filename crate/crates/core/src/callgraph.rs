//! Per-app API call graphs over a selected API vocabulary and their flattening
//! into a sparse binary relationship matrix.
//!
//! Each method body is an independent opcode sequence. Invocations outside
//! the vocabulary are dropped first; every adjacent pair `(a, b)` of the
//! remaining sequence becomes a directed edge `a -> b`. No edges cross method
//! boundaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ingest::{ApiId, AppSample};

pub const APIREL_PREFIX: &str = "apirel:";

/// The ordered list of selected APIs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<ApiId>", into = "Vec<ApiId>")]
pub struct ApiVocabulary {
    apis: Vec<ApiId>,
    index: HashMap<ApiId, usize>,
}

impl ApiVocabulary {
    /// Keeps the first occurrence of each API.
    pub fn new(apis: impl IntoIterator<Item = ApiId>) -> Self {
        let mut out = Vec::new();
        let mut index = HashMap::new();
        for api in apis {
            if !index.contains_key(&api) {
                index.insert(api.clone(), out.len());
                out.push(api);
            }
        }
        ApiVocabulary { apis: out, index }
    }

    pub fn len(&self) -> usize {
        self.apis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.apis.is_empty()
    }

    pub fn index_of(&self, api: &ApiId) -> Option<usize> {
        self.index.get(api).copied()
    }

    pub fn api(&self, i: usize) -> &ApiId {
        &self.apis[i]
    }

    pub fn apis(&self) -> &[ApiId] {
        &self.apis
    }
}

impl From<Vec<ApiId>> for ApiVocabulary {
    fn from(v: Vec<ApiId>) -> Self {
        ApiVocabulary::new(v)
    }
}

impl From<ApiVocabulary> for Vec<ApiId> {
    fn from(v: ApiVocabulary) -> Self {
        v.apis
    }
}

/// Directed graph with edges stored as vocabulary index pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiCallGraph<'v> {
    vocabulary: &'v ApiVocabulary,
    edges: BTreeSet<(usize, usize)>,
}

impl<'v> ApiCallGraph<'v> {
    pub fn vocabulary(&self) -> &'v ApiVocabulary {
        self.vocabulary
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&'v ApiId, &'v ApiId)> + '_ {
        self.edges
            .iter()
            .map(|&(a, b)| (self.vocabulary.api(a), self.vocabulary.api(b)))
    }

    pub fn contains(&self, from: &ApiId, to: &ApiId) -> bool {
        match (self.vocabulary.index_of(from), self.vocabulary.index_of(to)) {
            (Some(a), Some(b)) => self.edges.contains(&(a, b)),
            _ => false,
        }
    }

    /// Edge list as `from<TAB>to` lines.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for (a, b) in self.edges() {
            let _ = writeln!(out, "{a}\t{b}");
        }
        out
    }
}

/// Builds the call graph of one app from its per-method invocation lists.
pub fn build_call_graph<'v>(sample: &AppSample, vocab: &'v ApiVocabulary) -> ApiCallGraph<'v> {
    let mut edges = BTreeSet::new();
    for method in &sample.methods {
        let mut prev: Option<usize> = None;
        for idx in method.invocations.iter().filter_map(|api| vocab.index_of(api)) {
            if let Some(p) = prev {
                edges.insert((p, idx));
            }
            prev = Some(idx);
        }
    }
    ApiCallGraph {
        vocabulary: vocab,
        edges,
    }
}

/// Sparse binary matrix: `(i, j)` is present iff `apis[i] -> apis[j]` is an edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationshipMatrix<'v> {
    vocabulary: &'v ApiVocabulary,
    present: BTreeSet<(usize, usize)>,
}

impl<'v> RelationshipMatrix<'v> {
    pub fn present_pairs(&self) -> &BTreeSet<(usize, usize)> {
        &self.present
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.present.contains(&(i, j))
    }

    pub fn vocabulary(&self) -> &'v ApiVocabulary {
        self.vocabulary
    }

    /// Rebuilds the graph this matrix was flattened from.
    pub fn to_graph(&self) -> ApiCallGraph<'v> {
        ApiCallGraph {
            vocabulary: self.vocabulary,
            edges: self.present.clone(),
        }
    }
}

pub fn flatten_to_matrix<'v>(graph: &ApiCallGraph<'v>) -> RelationshipMatrix<'v> {
    RelationshipMatrix {
        vocabulary: graph.vocabulary,
        present: graph.edges.clone(),
    }
}

/// Reachability variant: `(i, j)` present iff a directed path of length
/// ≥ 1 leads from `i` to `j`. Not used by the default pipeline.
pub fn flatten_transitive<'v>(graph: &ApiCallGraph<'v>) -> RelationshipMatrix<'v> {
    let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(a, b) in &graph.edges {
        adj.entry(a).or_default().push(b);
    }
    let mut present = BTreeSet::new();
    for &start in adj.keys() {
        let mut stack: Vec<usize> = adj[&start].clone();
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if seen.insert(n) {
                present.insert((start, n));
                if let Some(next) = adj.get(&n) {
                    stack.extend(next.iter().copied());
                }
            }
        }
    }
    RelationshipMatrix {
        vocabulary: graph.vocabulary,
        present,
    }
}

pub fn pair_token(from: &ApiId, to: &ApiId) -> String {
    format!("{APIREL_PREFIX}{from}->{to}")
}

pub fn pair_feature_tokens(matrix: &RelationshipMatrix<'_>) -> Vec<String> {
    matrix
        .present
        .iter()
        .map(|&(i, j)| pair_token(matrix.vocabulary.api(i), matrix.vocabulary.api(j)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{ManifestFacts, MethodInvocations};

    fn api(name: &str) -> ApiId {
        ApiId::parse(&format!("Landroid/t/{name};->m()V")).unwrap()
    }

    fn sample(methods: &[&[&str]]) -> AppSample {
        AppSample {
            id: "s".into(),
            family: None,
            manifest: ManifestFacts::default(),
            methods: methods
                .iter()
                .enumerate()
                .map(|(i, seq)| MethodInvocations {
                    method_id: format!("m{i}"),
                    invocations: seq.iter().map(|n| api(n)).collect(),
                })
                .collect(),
        }
    }

    fn vocab(names: &[&str]) -> ApiVocabulary {
        ApiVocabulary::new(names.iter().map(|n| api(n)))
    }

    #[test]
    fn chain() {
        let v = vocab(&["A", "B", "C"]);
        let g = build_call_graph(&sample(&[&["A", "B", "C"]]), &v);
        assert_eq!(g.edge_count(), 2);
        assert!(g.contains(&api("A"), &api("B")));
        assert!(g.contains(&api("B"), &api("C")));
    }

    #[test]
    fn out_of_vocabulary_calls_are_filtered_before_pairing() {
        let v = vocab(&["A", "B"]);
        let g = build_call_graph(&sample(&[&["A", "X", "B"]]), &v);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(&api("A"), &api("B"))]);
    }

    #[test]
    fn no_vocabulary_hits_means_empty_graph() {
        let v = vocab(&["A"]);
        let g = build_call_graph(&sample(&[&["X", "Y"]]), &v);
        assert_eq!(g.edge_count(), 0);
        assert!(pair_feature_tokens(&flatten_to_matrix(&g)).is_empty());
    }

    #[test]
    fn no_cross_method_edges_and_self_loops_allowed() {
        let v = vocab(&["A", "B"]);
        let g = build_call_graph(&sample(&[&["A"], &["B", "B"]]), &v);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(&api("B"), &api("B"))]);
    }

    #[test]
    fn matrix_is_asymmetric() {
        let v = vocab(&["A", "B"]);
        let m = flatten_to_matrix(&build_call_graph(&sample(&[&["A", "B"]]), &v));
        assert!(m.get(0, 1));
        assert!(!m.get(1, 0));
        assert_eq!(
            pair_feature_tokens(&m),
            vec![format!("apirel:{}->{}", api("A"), api("B"))]
        );
    }

    #[test]
    fn transitive_closure_flag() {
        let v = vocab(&["A", "B", "C"]);
        let g = build_call_graph(&sample(&[&["A", "B", "C"]]), &v);
        let t = flatten_transitive(&g);
        assert!(t.get(0, 2));
        assert_eq!(t.present_pairs().len(), 3);
    }

    #[test]
    fn edge_list_export() {
        let v = vocab(&["A", "B"]);
        let g = build_call_graph(&sample(&[&["A", "B"]]), &v);
        assert_eq!(g.to_edge_list(), format!("{}\t{}\n", api("A"), api("B")));
    }

    #[test]
    fn vocabulary_deduplicates() {
        let v = vocab(&["A", "B", "A"]);
        assert_eq!(v.len(), 2);
        assert_eq!(v.index_of(&api("B")), Some(1));
    }
}
