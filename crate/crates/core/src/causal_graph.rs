//! The assessment DAG over original features (O), fused features (F),
//! stage features (S) and score (Y), for both query and exemplar videos.
//!
//! Genuine edges form the per-video chain `O → F → S → Y`. Spurious edges
//! record the shortcuts the model has to be protected from: the exemplar's
//! environment leaking into the query (`O_e ⇢ O_q`, `F_e ⇢ F_q`) and raw
//! background bypassing fusion (`O ⇢ S`, per video).
//!
//! The graph is declarative. Interventions are carried out by the network
//! architecture, not by inference on this structure.

use std::collections::HashMap;
use std::fmt;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariableId {
    #[serde(rename = "O_query")]
    OQuery,
    #[serde(rename = "O_exemplar")]
    OExemplar,
    #[serde(rename = "F_query")]
    FQuery,
    #[serde(rename = "F_exemplar")]
    FExemplar,
    #[serde(rename = "S_query")]
    SQuery,
    #[serde(rename = "S_exemplar")]
    SExemplar,
    #[serde(rename = "Y_query")]
    YQuery,
    #[serde(rename = "Y_exemplar")]
    YExemplar,
}

impl VariableId {
    pub const ALL: [VariableId; 8] = [
        Self::OQuery,
        Self::OExemplar,
        Self::FQuery,
        Self::FExemplar,
        Self::SQuery,
        Self::SExemplar,
        Self::YQuery,
        Self::YExemplar,
    ];

    /// Position in the O < F < S < Y order.
    pub fn rank(self) -> u8 {
        match self {
            Self::OQuery | Self::OExemplar => 0,
            Self::FQuery | Self::FExemplar => 1,
            Self::SQuery | Self::SExemplar => 2,
            Self::YQuery | Self::YExemplar => 3,
        }
    }

    pub fn letter(self) -> char {
        ['O', 'F', 'S', 'Y'][self.rank() as usize]
    }

    pub fn is_query(self) -> bool {
        matches!(
            self,
            Self::OQuery | Self::FQuery | Self::SQuery | Self::YQuery
        )
    }

    fn default_description(self) -> &'static str {
        match self.rank() {
            0 => "original video features",
            1 => "fused video and mask features",
            2 => "stage features (forward, twist, entry)",
            _ => "action score",
        }
    }
}

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let video = if self.is_query() { "query" } else { "exemplar" };
        write!(f, "{}_{video}", self.letter())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableNode {
    pub id: VariableId,
    pub description: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Genuine,
    Spurious,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalEdge {
    pub source: VariableId,
    pub target: VariableId,
    pub kind: EdgeKind,
}

impl CausalEdge {
    pub fn genuine(source: VariableId, target: VariableId) -> Self {
        Self {
            source,
            target,
            kind: EdgeKind::Genuine,
        }
    }

    pub fn spurious(source: VariableId, target: VariableId) -> Self {
        Self {
            source,
            target,
            kind: EdgeKind::Spurious,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub nodes: Vec<VariableNode>,
    pub edges: Vec<CausalEdge>,
}

impl CausalGraph {
    /// Graph over `ids` with default descriptions.
    pub fn with_nodes(ids: &[VariableId], edges: Vec<CausalEdge>) -> Self {
        let nodes = ids
            .iter()
            .map(|&id| VariableNode {
                id,
                description: id.default_description().to_string(),
            })
            .collect();
        Self { nodes, edges }
    }

    pub fn genuine_edges(&self) -> impl Iterator<Item = &CausalEdge> {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Genuine)
    }

    pub fn spurious_edges(&self) -> impl Iterator<Item = &CausalEdge> {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Spurious)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

/// The assessment graph: a genuine chain per video plus four spurious edges.
pub fn default_graph() -> CausalGraph {
    use VariableId::*;
    let edges = vec![
        CausalEdge::genuine(OQuery, FQuery),
        CausalEdge::genuine(FQuery, SQuery),
        CausalEdge::genuine(SQuery, YQuery),
        CausalEdge::genuine(OExemplar, FExemplar),
        CausalEdge::genuine(FExemplar, SExemplar),
        CausalEdge::genuine(SExemplar, YExemplar),
        CausalEdge::spurious(OExemplar, OQuery),
        CausalEdge::spurious(FExemplar, FQuery),
        CausalEdge::spurious(OQuery, SQuery),
        CausalEdge::spurious(OExemplar, SExemplar),
    ];
    CausalGraph::with_nodes(&VariableId::ALL, edges)
}

/// Returns one message per problem in the genuine subgraph: each cyclic
/// strongly connected component is reported once, and every remaining edge
/// that runs against the O < F < S < Y order is reported individually.
pub fn validate(g: &CausalGraph) -> Vec<String> {
    let mut violations = Vec::new();

    let mut seen = HashMap::new();
    for n in &g.nodes {
        if seen.insert(n.id, ()).is_some() {
            violations.push(format!("duplicate node {}", n.id));
        }
    }
    for e in &g.edges {
        for end in [e.source, e.target] {
            if !seen.contains_key(&end) {
                violations.push(format!(
                    "edge {} -> {} references missing node {end}",
                    e.source, e.target
                ));
            }
        }
    }

    let mut dg = DiGraph::<VariableId, ()>::new();
    let mut index = HashMap::new();
    for n in &g.nodes {
        index
            .entry(n.id)
            .or_insert_with(|| dg.add_node(n.id));
    }
    for e in g.genuine_edges() {
        if let (Some(&a), Some(&b)) = (index.get(&e.source), index.get(&e.target)) {
            dg.add_edge(a, b, ());
        }
    }

    let mut component = HashMap::new();
    let mut cyclic = Vec::new();
    for (ci, scc) in tarjan_scc(&dg).into_iter().enumerate() {
        let self_loop = scc.len() == 1 && dg.contains_edge(scc[0], scc[0]);
        if scc.len() > 1 || self_loop {
            let mut members: Vec<VariableId> = scc.iter().map(|&n| dg[n]).collect();
            members.sort();
            let names: Vec<String> = members.iter().map(ToString::to_string).collect();
            cyclic.push(format!("genuine cycle through {}", names.join(", ")));
        }
        for n in scc {
            component.insert(dg[n], (ci, self_loop));
        }
    }
    cyclic.sort();
    violations.extend(cyclic);

    for e in g.genuine_edges() {
        let same_cycle = match (component.get(&e.source), component.get(&e.target)) {
            (Some(a), Some(b)) => a.0 == b.0 && (e.source != e.target || a.1),
            _ => false,
        };
        if !same_cycle && e.source.rank() >= e.target.rank() {
            violations.push(format!(
                "genuine edge {} -> {} violates order O < F < S < Y",
                e.source, e.target
            ));
        }
    }
    violations
}

/// Chain-rule factorisation of the genuine subgraph, deduplicated across
/// the two videos (factors are written in terms of O/F/S/Y).
///
/// Factors appear from the score backwards. A root's marginal is written
/// out unless a variable of the same kind is the target of a spurious edge:
/// such inputs are confounded, so the factorisation is stated conditional
/// on them.
pub fn factorization_string(g: &CausalGraph) -> String {
    let mut factors: Vec<(u8, String)> = Vec::new();
    let mut push = |rank: u8, f: String| {
        if !factors.iter().any(|(_, x)| *x == f) {
            factors.push((rank, f));
        }
    };

    for n in &g.nodes {
        let mut parents: Vec<VariableId> = g
            .genuine_edges()
            .filter(|e| e.target == n.id)
            .map(|e| e.source)
            .collect();
        parents.sort_by_key(|p| std::cmp::Reverse(p.rank()));
        let mut letters: Vec<char> = parents.iter().map(|p| p.letter()).collect();
        letters.dedup();

        if letters.is_empty() {
            let letter = n.id.letter();
            let confounded = g.spurious_edges().any(|e| e.target.letter() == letter);
            if !confounded {
                push(n.id.rank(), format!("P({})", n.id.letter()));
            }
        } else {
            let given: Vec<String> = letters.iter().map(char::to_string).collect();
            push(
                n.id.rank(),
                format!("P({}|{})", n.id.letter(), given.join(",")),
            );
        }
    }
    factors.sort_by_key(|(rank, _)| std::cmp::Reverse(*rank));
    factors
        .into_iter()
        .map(|(_, f)| f)
        .collect::<Vec<_>>()
        .join("·")
}

#[cfg(test)]
mod tests {
    use super::*;
    use VariableId::*;

    #[test]
    fn default_graph_shape() {
        let g = default_graph();
        assert_eq!(g.genuine_edges().count(), 6);
        assert_eq!(g.spurious_edges().count(), 4);
        assert!(validate(&g).is_empty());
    }

    #[test]
    fn cycle_is_reported_once() {
        let mut g = default_graph();
        g.edges.push(CausalEdge::genuine(YQuery, OQuery));
        let v = validate(&g);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("cycle"));
    }

    #[test]
    fn ordering_violation_without_cycle() {
        let mut g = default_graph();
        g.edges.push(CausalEdge::genuine(SQuery, FExemplar));
        let v = validate(&g);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("order"));

        let two = CausalGraph::with_nodes(&[SQuery, FQuery], vec![CausalEdge::genuine(SQuery, FQuery)]);
        assert_eq!(validate(&two).len(), 1);
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let g = CausalGraph::with_nodes(&[FQuery], vec![CausalEdge::genuine(FQuery, FQuery)]);
        let v = validate(&g);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("cycle"));
    }

    #[test]
    fn spurious_cycles_are_ignored() {
        let mut g = default_graph();
        g.edges.push(CausalEdge::spurious(SQuery, OQuery));
        assert!(validate(&g).is_empty());
    }

    #[test]
    fn factorizations() {
        assert_eq!(factorization_string(&default_graph()), "P(Y|S)·P(S|F)·P(F|O)");
        let single = CausalGraph::with_nodes(&[YQuery], vec![]);
        assert_eq!(factorization_string(&single), "P(Y)");
        let two = CausalGraph::with_nodes(&[OQuery, YQuery], vec![CausalEdge::genuine(OQuery, YQuery)]);
        assert_eq!(factorization_string(&two), "P(Y|O)·P(O)");
    }

    #[test]
    fn json_roundtrip_keeps_edge_kinds() {
        let g = default_graph();
        let json = g.to_json().unwrap();
        assert!(json.contains("\"kind\": \"spurious\""));
        assert!(json.contains("\"O_exemplar\""));
        let back: CausalGraph = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
    }
}
