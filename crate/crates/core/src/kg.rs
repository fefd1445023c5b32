//! Organ-scoped clinical knowledge graph with tiered, hop-bounded retrieval.
//!
//! Edges are `(subject, relation, object)` facts tagged with an evidence
//! tier — A for anatomical/definitional, B for typical imaging findings,
//! C for associative or diagnostic links — and an organ scope. A query
//! restricts the graph to one organ plus the `general` scope, walks it as
//! an undirected graph from seed entities, and returns every edge whose
//! nearer endpoint lies within the hop budget, ordered by tier and then
//! lexicographically so retrieval output is stable.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{normalize_phrase, Organ};

/// Evidence tier, strongest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    A,
    B,
    C,
}

impl core::fmt::Display for Tier {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Tier::A => "A",
            Tier::B => "B",
            Tier::C => "C",
        })
    }
}

/// Which queries an edge participates in: one organ's subgraph, or every
/// subgraph via `general`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeScope {
    Liver,
    Pancreas,
    Stomach,
    Colon,
    Esophagus,
    General,
}

impl From<Organ> for EdgeScope {
    fn from(organ: Organ) -> EdgeScope {
        match organ {
            Organ::Liver => EdgeScope::Liver,
            Organ::Pancreas => EdgeScope::Pancreas,
            Organ::Stomach => EdgeScope::Stomach,
            Organ::Colon => EdgeScope::Colon,
            Organ::Esophagus => EdgeScope::Esophagus,
        }
    }
}

impl EdgeScope {
    fn in_query(self, organ: Organ) -> bool {
        self == EdgeScope::General || self == EdgeScope::from(organ)
    }
}

/// One knowledge-graph fact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgEdge {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub tier: Tier,
    pub organ: EdgeScope,
}

// Sorting puts strongest-evidence edges first, then goes lexicographic,
// which is the order queries return and prompts present.
impl Ord for KgEdge {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        (self.tier, &self.subject, &self.relation, &self.object, self.organ).cmp(&(
            other.tier,
            &other.subject,
            &other.relation,
            &other.object,
            other.organ,
        ))
    }
}

impl PartialOrd for KgEdge {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Errors from graph loading.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum KgError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("line {line}: field {field} is empty")]
    EmptyField { line: usize, field: &'static str },
}

/// Alias-to-canonical entity names, applied to query seeds and node
/// identity so `HCC` and `hepatocellular carcinoma` can meet at one node.
#[derive(Clone, Debug, Default)]
pub struct SynonymMap {
    map: BTreeMap<String, String>,
}

impl SynonymMap {
    /// Parses `{"alias": "canonical", ...}`.
    pub fn from_json(json: &str) -> Result<SynonymMap, KgError> {
        let raw: BTreeMap<String, String> =
            serde_json::from_str(json).map_err(|e| KgError::Parse {
                line: 0,
                detail: e.to_string(),
            })?;
        let mut map = BTreeMap::new();
        for (alias, canonical) in raw {
            map.insert(normalize_phrase(&alias), normalize_phrase(&canonical));
        }
        Ok(SynonymMap { map })
    }

    pub fn from_pairs<'a, I: IntoIterator<Item = (&'a str, &'a str)>>(pairs: I) -> SynonymMap {
        let mut map = BTreeMap::new();
        for (alias, canonical) in pairs {
            map.insert(normalize_phrase(alias), normalize_phrase(canonical));
        }
        SynonymMap { map }
    }

    /// Canonical node key for a phrase: normalized, then alias-resolved.
    /// One resolution step only; chains of aliases are not followed.
    pub fn resolve(&self, phrase: &str) -> String {
        let key = normalize_phrase(phrase);
        self.map.get(&key).cloned().unwrap_or(key)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Result of loading a graph: the graph plus how many exact duplicate
/// edges were dropped.
#[derive(Debug)]
pub struct KgLoad {
    pub graph: KnowledgeGraph,
    pub deduped: usize,
}

/// An edge list with query support.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    edges: Vec<KgEdge>,
}

impl KnowledgeGraph {
    /// Builds a graph from edges, dropping exact duplicates (all five
    /// fields equal) and reporting how many were dropped.
    pub fn new(edges: Vec<KgEdge>) -> KgLoad {
        let mut seen = alloc::collections::BTreeSet::new();
        let mut kept = Vec::with_capacity(edges.len());
        let mut deduped = 0usize;
        for edge in edges {
            if seen.insert(edge.clone()) {
                kept.push(edge);
            } else {
                deduped += 1;
            }
        }
        KgLoad {
            graph: KnowledgeGraph { edges: kept },
            deduped,
        }
    }

    /// Parses one edge object per line, skipping blank lines. Malformed
    /// JSON or empty fields fail with the 1-based line number.
    pub fn from_jsonl(text: &str) -> Result<KgLoad, KgError> {
        let mut edges = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let edge: KgEdge = serde_json::from_str(line).map_err(|e| KgError::Parse {
                line: idx + 1,
                detail: e.to_string(),
            })?;
            for (field, value) in [
                ("subject", &edge.subject),
                ("relation", &edge.relation),
                ("object", &edge.object),
            ] {
                if value.trim().is_empty() {
                    return Err(KgError::EmptyField {
                        line: idx + 1,
                        field,
                    });
                }
            }
            edges.push(edge);
        }
        Ok(KnowledgeGraph::new(edges))
    }

    /// The demonstration graph shipped with the crate: roughly fifty
    /// edges per organ across all three tiers, plus organ-independent
    /// facts under the `general` scope.
    pub fn builtin_demo() -> KnowledgeGraph {
        KnowledgeGraph::from_jsonl(include_str!("../data/demo_kg.jsonl"))
            .expect("embedded demo graph must parse")
            .graph
    }

    pub fn edges(&self) -> &[KgEdge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for edge in &self.edges {
            out.push_str(&serde_json::to_string(edge).expect("edge serializes"));
            out.push('\n');
        }
        out
    }

    /// Retrieves edges around seed entities inside one organ's subgraph.
    ///
    /// Scope: edges tagged with the organ or `general`. Distances come
    /// from an undirected breadth-first search starting at the resolved
    /// seeds (distance 0); an edge is returned when its *nearer* endpoint
    /// is within `hops`. `hops = 0` therefore returns exactly the edges
    /// incident to the seeds. Unknown seeds contribute nothing. Results
    /// order by tier, then lexicographically by subject, relation, object.
    pub fn query(
        &self,
        entities: &[&str],
        organ: Organ,
        hops: usize,
        synonyms: &SynonymMap,
    ) -> Vec<KgEdge> {
        let scoped: Vec<&KgEdge> = self
            .edges
            .iter()
            .filter(|e| e.organ.in_query(organ))
            .collect();
        // Adjacency over canonical node keys.
        let mut adjacency: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut endpoints: Vec<(String, String)> = Vec::with_capacity(scoped.len());
        for (i, edge) in scoped.iter().enumerate() {
            let s = synonyms.resolve(&edge.subject);
            let o = synonyms.resolve(&edge.object);
            adjacency.entry(s.clone()).or_default().push(i);
            adjacency.entry(o.clone()).or_default().push(i);
            endpoints.push((s, o));
        }
        let mut dist: BTreeMap<String, usize> = BTreeMap::new();
        let mut frontier = VecDeque::new();
        for seed in entities {
            let key = synonyms.resolve(seed);
            if adjacency.contains_key(&key) && !dist.contains_key(&key) {
                dist.insert(key.clone(), 0);
                frontier.push_back(key);
            }
        }
        while let Some(node) = frontier.pop_front() {
            let d = dist[&node];
            for &i in &adjacency[&node] {
                let (s, o) = &endpoints[i];
                for next in [s, o] {
                    if !dist.contains_key(next) {
                        dist.insert(next.clone(), d + 1);
                        frontier.push_back(next.clone());
                    }
                }
            }
        }
        let mut hits: Vec<KgEdge> = scoped
            .iter()
            .zip(&endpoints)
            .filter(|(_, (s, o))| {
                let ds = dist.get(s).copied();
                let do_ = dist.get(o).copied();
                match (ds, do_) {
                    (None, None) => false,
                    (a, b) => a.into_iter().chain(b).min().is_some_and(|d| d <= hops),
                }
            })
            .map(|(e, _)| (*e).clone())
            .collect();
        hits.sort();
        hits
    }

    /// Renders retrieved edges as prompt-ready context lines of the form
    /// `subject —relation→ object [tier]`.
    pub fn render_context(edges: &[KgEdge]) -> String {
        let mut out = String::new();
        for edge in edges {
            out.push_str(&format!(
                "{} —{}→ {} [{}]\n",
                edge.subject, edge.relation, edge.object, edge.tier
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::borrow::ToOwned;
    use alloc::vec;

    fn edge(s: &str, r: &str, o: &str, tier: Tier, scope: EdgeScope) -> KgEdge {
        KgEdge {
            subject: s.to_owned(),
            relation: r.to_owned(),
            object: o.to_owned(),
            tier,
            organ: scope,
        }
    }

    fn toy_graph() -> KnowledgeGraph {
        KnowledgeGraph::new(vec![
            edge("a", "r1", "b", Tier::A, EdgeScope::Liver),
            edge("b", "r2", "c", Tier::B, EdgeScope::Liver),
            edge("c", "r3", "d", Tier::C, EdgeScope::Liver),
            edge("a", "r4", "x", Tier::A, EdgeScope::Pancreas),
            edge("q", "r5", "z", Tier::B, EdgeScope::General),
            edge("b", "r6", "g", Tier::A, EdgeScope::General),
        ])
        .graph
    }

    #[test]
    fn hop_budget_bounds_the_nearer_endpoint() {
        let g = toy_graph();
        let syn = SynonymMap::default();
        let k0: Vec<String> = g
            .query(&["a"], Organ::Liver, 0, &syn)
            .iter()
            .map(|e| e.relation.clone())
            .collect();
        assert_eq!(k0, vec!["r1"]);
        let k1: Vec<String> = g
            .query(&["a"], Organ::Liver, 1, &syn)
            .iter()
            .map(|e| e.relation.clone())
            .collect();
        // r6 sorts before r2 because its tier is A.
        assert_eq!(k1, vec!["r1", "r6", "r2"]);
        let k2: Vec<String> = g
            .query(&["a"], Organ::Liver, 2, &syn)
            .iter()
            .map(|e| e.relation.clone())
            .collect();
        assert_eq!(k2, vec!["r1", "r6", "r2", "r3"]);
    }

    #[test]
    fn organ_scope_excludes_other_organs_but_keeps_general() {
        let g = toy_graph();
        let syn = SynonymMap::default();
        let got = g.query(&["a"], Organ::Pancreas, 3, &syn);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].relation, "r4");
        // Disconnected general edge never appears.
        assert!(g
            .query(&["a"], Organ::Liver, 9, &syn)
            .iter()
            .all(|e| e.relation != "r5"));
    }

    #[test]
    fn unknown_seeds_yield_nothing() {
        let g = toy_graph();
        let syn = SynonymMap::default();
        assert!(g.query(&["nope"], Organ::Liver, 3, &syn).is_empty());
        assert!(g.query(&[], Organ::Liver, 3, &syn).is_empty());
    }

    #[test]
    fn synonyms_resolve_seeds_and_unify_nodes() {
        let g = KnowledgeGraph::new(vec![
            edge("HCC", "metastasized to", "lung", Tier::C, EdgeScope::Liver),
            edge(
                "hepatocellular carcinoma",
                "arising from",
                "cirrhosis",
                Tier::C,
                EdgeScope::Liver,
            ),
        ])
        .graph;
        let syn = SynonymMap::from_pairs([("hcc", "hepatocellular carcinoma")]);
        // Seed by alias; both edges connect through the unified node.
        let got = g.query(&["HCC"], Organ::Liver, 0, &syn);
        assert_eq!(got.len(), 2);
        // Without the synonym map, only the alias-spelled edge is adjacent.
        let got = g.query(&["HCC"], Organ::Liver, 0, &SynonymMap::default());
        assert_eq!(got.len(), 1);
    }

    #[test]
    fn bfs_matches_naive_distance_oracle_on_demo_graph() {
        let g = KnowledgeGraph::builtin_demo();
        let syn = SynonymMap::default();
        for organ in [Organ::Liver, Organ::Colon] {
            for hops in 0..3usize {
                let got = g.query(&[organ.name()], organ, hops, &syn);
                // Oracle: iterative relaxation over the scoped edge list.
                let scoped: Vec<&KgEdge> = g
                    .edges()
                    .iter()
                    .filter(|e| e.organ.in_query(organ))
                    .collect();
                let mut dist: BTreeMap<String, usize> = BTreeMap::new();
                dist.insert(normalize_phrase(organ.name()), 0);
                loop {
                    let mut changed = false;
                    for e in &scoped {
                        let s = normalize_phrase(&e.subject);
                        let o = normalize_phrase(&e.object);
                        for (from, to) in [(&s, &o), (&o, &s)] {
                            if let Some(d) = dist.get(from).copied() {
                                if dist.get(to).map_or(true, |cur| d + 1 < *cur) {
                                    dist.insert(to.clone(), d + 1);
                                    changed = true;
                                }
                            }
                        }
                    }
                    if !changed {
                        break;
                    }
                }
                let mut expected: Vec<KgEdge> = scoped
                    .iter()
                    .filter(|e| {
                        let ds = dist.get(&normalize_phrase(&e.subject));
                        let do_ = dist.get(&normalize_phrase(&e.object));
                        ds.into_iter().chain(do_).min().is_some_and(|d| *d <= hops)
                    })
                    .map(|e| (*e).clone())
                    .collect();
                expected.sort();
                assert_eq!(got, expected, "organ {organ} hops {hops}");
                assert!(!got.is_empty(), "organ seed should hit edges");
            }
        }
    }

    #[test]
    fn demo_graph_covers_every_organ_and_tier() {
        let g = KnowledgeGraph::builtin_demo();
        assert!(g.len() >= 240, "demo graph has {} edges", g.len());
        for organ in Organ::ALL {
            let scope = EdgeScope::from(organ);
            let count = g.edges().iter().filter(|e| e.organ == scope).count();
            assert!(count >= 40, "{organ} has only {count} edges");
            for tier in [Tier::A, Tier::B, Tier::C] {
                assert!(
                    g.edges()
                        .iter()
                        .any(|e| e.organ == scope && e.tier == tier),
                    "{organ} missing tier {tier}"
                );
            }
        }
        let general = g
            .edges()
            .iter()
            .filter(|e| e.organ == EdgeScope::General)
            .count();
        assert!(general >= 10);
        // No exact duplicates survive loading.
        let reload = KnowledgeGraph::new(g.edges().to_vec());
        assert_eq!(reload.deduped, 0);
    }

    #[test]
    fn ordering_is_tier_then_lexicographic() {
        let g = KnowledgeGraph::new(vec![
            edge("n", "sees", "b", Tier::B, EdgeScope::Liver),
            edge("n", "sees", "a", Tier::B, EdgeScope::Liver),
            edge("n", "zz", "x", Tier::A, EdgeScope::Liver),
        ])
        .graph;
        let got = g.query(&["n"], Organ::Liver, 0, &SynonymMap::default());
        assert_eq!(got[0].tier, Tier::A);
        assert_eq!(got[1].object, "a");
        assert_eq!(got[2].object, "b");
    }

    #[test]
    fn loading_dedupes_and_reports_line_errors() {
        let text = r#"{"subject": "a", "relation": "r", "object": "b", "tier": "A", "organ": "liver"}

{"subject": "a", "relation": "r", "object": "b", "tier": "A", "organ": "liver"}
{"subject": "c", "relation": "r", "object": "d", "tier": "B", "organ": "general"}"#;
        let load = KnowledgeGraph::from_jsonl(text).unwrap();
        assert_eq!(load.graph.len(), 2);
        assert_eq!(load.deduped, 1);

        let bad = "{\"subject\": \"a\"}";
        assert!(matches!(
            KnowledgeGraph::from_jsonl(bad),
            Err(KgError::Parse { line: 1, .. })
        ));
        let empty_field =
            r#"{"subject": " ", "relation": "r", "object": "b", "tier": "A", "organ": "liver"}"#;
        assert_eq!(
            KnowledgeGraph::from_jsonl(empty_field).unwrap_err(),
            KgError::EmptyField { line: 1, field: "subject" }
        );
    }

    #[test]
    fn context_lines_use_arrow_and_tier_format() {
        let edges = vec![edge("liver", "shows", "hepatic mass", Tier::B, EdgeScope::Liver)];
        assert_eq!(
            KnowledgeGraph::render_context(&edges),
            "liver —shows→ hepatic mass [B]\n"
        );
    }

    #[test]
    fn jsonl_round_trip() {
        let g = toy_graph();
        let reparsed = KnowledgeGraph::from_jsonl(&g.to_jsonl()).unwrap();
        assert_eq!(reparsed.graph, g);
        assert_eq!(reparsed.deduped, 0);
    }
}
