use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_text, write_atomic};

/// Gradient-node type names that label architecture graph nodes.
pub const ATOMS: [&str; 37] = [
    "AdaptiveAvgPool2DBackward0",
    "AdaptiveMaxPool2DBackward0",
    "AddBackward0",
    "AddmmBackward0",
    "AvgPool2DBackward0",
    "AvgPool3DBackward0",
    "CatBackward0",
    "CloneBackward0",
    "ConstantPadNdBackward0",
    "ConvolutionBackward0",
    "DivBackward0",
    "ExpandBackward0",
    "HardtanhBackward0",
    "IndexSelectBackward0",
    "MaxBackward0",
    "MaxPool2DWithIndicesBackward0",
    "MeanBackward1",
    "MulBackward0",
    "NativeBatchNormBackward0",
    "Variable",
    "PowBackward0",
    "PreluBackward0",
    "ReluBackward0",
    "RepeatBackward0",
    "ReshapeAliasBackward0",
    "SigmoidBackward0",
    "SliceBackward0",
    "SoftmaxBackward0",
    "SplitWithSizesBackward0",
    "SqueezeBackward1",
    "SumBackward1",
    "TBackward0",
    "TransposeBackward0",
    "UnsqueezeBackward0",
    "UpsampleBilinear2DBackward1",
    "UpsampleNearest2DBackward1",
    "ViewBackward0",
];

pub const UNKNOWN_ATOM: &str = "UNKNOWN";

pub fn is_atom(name: &str) -> bool {
    ATOMS.contains(&name)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchNode {
    pub id: u64,
    pub atom: String,
}

/// Directed acyclic attributed graph of one model's runtime structure.
/// An edge `(src, dst)` means data flows from `src` into `dst`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchGraph {
    pub graph_id: String,
    pub nodes: Vec<ArchNode>,
    pub edges: Vec<(u64, u64)>,
}

impl ArchGraph {
    /// Validates structure and maps out-of-vocabulary atoms to
    /// [`UNKNOWN_ATOM`]. Returns the graph plus one warning per remapped node.
    pub fn new(
        graph_id: impl Into<String>,
        nodes: Vec<ArchNode>,
        edges: Vec<(u64, u64)>,
    ) -> Result<(Self, Vec<String>)> {
        let graph_id = graph_id.into();
        let field = format!("graph {graph_id}");
        if nodes.is_empty() {
            return Err(Error::invalid(field, "graph has no nodes"));
        }
        let mut warnings = Vec::new();
        let mut ids = BTreeSet::new();
        let mut nodes = nodes;
        for n in &mut nodes {
            if !ids.insert(n.id) {
                return Err(Error::invalid(field, format!("duplicate node id {}", n.id)));
            }
            if !is_atom(&n.atom) && n.atom != UNKNOWN_ATOM {
                warnings.push(format!(
                    "graph {graph_id}: node {} has unknown atom `{}`, mapped to {UNKNOWN_ATOM}",
                    n.id, n.atom
                ));
                n.atom = UNKNOWN_ATOM.to_string();
            }
        }
        let mut seen = BTreeSet::new();
        for &(s, d) in &edges {
            if !ids.contains(&s) || !ids.contains(&d) {
                return Err(Error::invalid(field, format!("edge ({s}, {d}) references a missing node")));
            }
            if s == d {
                return Err(Error::invalid(field, format!("self-loop on node {s}")));
            }
            if !seen.insert((s, d)) {
                return Err(Error::invalid(field, format!("duplicate edge ({s}, {d})")));
            }
        }
        let g = ArchGraph {
            graph_id,
            nodes,
            edges,
        };
        if g.topological_order().is_none() {
            return Err(Error::invalid(field, "graph contains a cycle"));
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok((g, warnings))
    }

    pub fn from_json(text: &str, origin: &str) -> Result<(Self, Vec<String>)> {
        let raw: ArchGraph =
            serde_json::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        ArchGraph::new(raw.graph_id, raw.nodes, raw.edges)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = read_text(path)?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json())
    }

    /// Node positions in a topological order (Kahn, smallest id first), or
    /// `None` when the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let index: BTreeMap<u64, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for &(s, d) in &self.edges {
            let (s, d) = (index[&s], index[&d]);
            out[s].push(d);
            indegree[d] += 1;
        }
        let mut ready: BTreeSet<(u64, usize)> = (0..self.nodes.len())
            .filter(|&i| indegree[i] == 0)
            .map(|i| (self.nodes[i].id, i))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(first) = ready.pop_first() {
            let i = first.1;
            order.push(i);
            for &j in &out[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.insert((self.nodes[j].id, j));
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }

    /// Data-flow predecessors of each node, by node position.
    pub fn in_neighbors(&self) -> Vec<Vec<usize>> {
        let index: BTreeMap<u64, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let mut preds = vec![Vec::new(); self.nodes.len()];
        for &(s, d) in &self.edges {
            preds[index[&d]].push(index[&s]);
        }
        preds
    }

    pub fn count_atom(&self, atom: &str) -> usize {
        self.nodes.iter().filter(|n| n.atom == atom).count()
    }

    pub fn in_degree(&self, id: u64) -> usize {
        self.edges.iter().filter(|&&(_, d)| d == id).count()
    }
}

/// Loads every `*.json` graph in a directory, sorted by graph id.
pub fn load_graph_dir(dir: &Path) -> Result<Vec<ArchGraph>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut graphs = Vec::with_capacity(paths.len());
    for p in paths {
        graphs.push(ArchGraph::load(&p)?.0);
    }
    graphs.sort_by(|a, b| a.graph_id.cmp(&b.graph_id));
    Ok(graphs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: u64, atom: &str) -> ArchNode {
        ArchNode { id, atom: atom.into() }
    }

    #[test]
    fn vocabulary_has_37_distinct_atoms() {
        let set: BTreeSet<_> = ATOMS.iter().collect();
        assert_eq!(set.len(), 37);
    }

    #[test]
    fn cycle_rejected() {
        let nodes = vec![node(0, "ReluBackward0"), node(1, "AddBackward0")];
        let err = ArchGraph::new("g", nodes, vec![(0, 1), (1, 0)]).unwrap_err();
        assert!(err.to_string().contains("cycle"));
    }

    #[test]
    fn self_loop_and_duplicates_rejected() {
        let nodes = || vec![node(0, "ReluBackward0"), node(1, "AddBackward0")];
        assert!(ArchGraph::new("g", nodes(), vec![(0, 0)]).is_err());
        assert!(ArchGraph::new("g", nodes(), vec![(0, 1), (0, 1)]).is_err());
        assert!(ArchGraph::new("g", nodes(), vec![(0, 7)]).is_err());
        assert!(ArchGraph::new("g", vec![node(0, "Variable"), node(0, "Variable")], vec![]).is_err());
    }

    #[test]
    fn unknown_atom_mapped_with_warning() {
        let (g, w) = ArchGraph::new("g", vec![node(0, "GeluBackward0")], vec![]).unwrap();
        assert_eq!(g.nodes[0].atom, UNKNOWN_ATOM);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn json_contract() {
        let text = r#"{"graph_id": "m", "nodes": [{"id": 3, "atom": "Variable"}, {"id": 9, "atom": "ConvolutionBackward0"}], "edges": [[3, 9]]}"#;
        let (g, w) = ArchGraph::from_json(text, "inline").unwrap();
        assert!(w.is_empty());
        assert_eq!(g.edges, vec![(3, 9)]);
        let (back, _) = ArchGraph::from_json(&g.to_json(), "again").unwrap();
        assert_eq!(back, g);
    }
}
