use serde::Serialize;

use crate::chem::{featurize, Element, FeatureVocab, MolGraph};
use crate::{Error, Result};

/// Segment id of a node or arc. Rows of the segment embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Segment {
    First = 0,
    Second = 1,
    Collect = 2,
}

impl Segment {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ArcKind {
    /// One direction of a real bond, with its bond feature indices.
    Bond { features: Vec<usize>, segment: Segment },
    /// Ordinary node to collection node.
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Arc {
    pub source: usize,
    pub target: usize,
    pub kind: ArcKind,
}

/// One or more graphs laid out as a single node set with directed arcs.
///
/// Each real bond contributes two arcs. A graph may carry one collection node
/// that receives a virtual arc from every other node of its graph and sends
/// none back.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchedGraph {
    pub node_features: Vec<Vec<usize>>,
    pub node_segment: Vec<Segment>,
    pub node_graph: Vec<usize>,
    pub arcs: Vec<Arc>,
    pub collection: Vec<Option<usize>>,
}

impl BatchedGraph {
    /// Lays out `parts` as one graph, each part tagged with its segment, and
    /// appends a collection node when `with_collection` is set.
    pub fn from_parts(parts: &[(&MolGraph, Segment)], vocab: &FeatureVocab, with_collection: bool) -> Result<Self> {
        let mut g = BatchedGraph {
            node_features: Vec::new(),
            node_segment: Vec::new(),
            node_graph: Vec::new(),
            arcs: Vec::new(),
            collection: vec![None],
        };
        for &(mol, segment) in parts {
            if segment == Segment::Collect {
                return Err(Error::Structure("molecule parts cannot use the collect segment".into()));
            }
            let feats = featurize(mol, vocab)?;
            let base = g.node_features.len();
            for atom in feats.atoms {
                g.node_features.push(atom);
                g.node_segment.push(segment);
                g.node_graph.push(0);
            }
            for (bond, bf) in mol.bonds.iter().zip(feats.bonds) {
                for (s, t) in [(bond.a, bond.b), (bond.b, bond.a)] {
                    g.arcs.push(Arc {
                        source: base + s,
                        target: base + t,
                        kind: ArcKind::Bond {
                            features: bf.clone(),
                            segment,
                        },
                    });
                }
            }
        }
        if g.node_features.is_empty() {
            return Err(Error::Structure("graph has no atoms".into()));
        }
        if with_collection {
            let c = g.node_features.len();
            for source in 0..c {
                g.arcs.push(Arc {
                    source,
                    target: c,
                    kind: ArcKind::Virtual,
                });
            }
            g.node_features.push(vocab.reserved_atom_indices(Element::Collect)?);
            g.node_segment.push(Segment::Collect);
            g.node_graph.push(0);
            g.collection[0] = Some(c);
        }
        Ok(g)
    }

    /// Concatenates graphs, offsetting node and graph ids.
    pub fn concat(graphs: &[BatchedGraph]) -> BatchedGraph {
        let mut out = BatchedGraph {
            node_features: Vec::new(),
            node_segment: Vec::new(),
            node_graph: Vec::new(),
            arcs: Vec::new(),
            collection: Vec::new(),
        };
        for g in graphs {
            let (nb, gb) = (out.n_nodes(), out.n_graphs());
            out.node_features.extend(g.node_features.iter().cloned());
            out.node_segment.extend_from_slice(&g.node_segment);
            out.node_graph.extend(g.node_graph.iter().map(|&x| x + gb));
            out.arcs.extend(g.arcs.iter().map(|a| Arc {
                source: a.source + nb,
                target: a.target + nb,
                kind: a.kind.clone(),
            }));
            out.collection.extend(g.collection.iter().map(|c| c.map(|c| c + nb)));
        }
        out
    }

    pub fn n_nodes(&self) -> usize {
        self.node_features.len()
    }

    pub fn n_graphs(&self) -> usize {
        self.collection.len()
    }

    pub fn is_collection(&self, node: usize) -> bool {
        self.node_segment[node] == Segment::Collect
    }

    /// Node ids of graph `g` in order, collection node included.
    pub fn graph_nodes(&self, g: usize) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&i| self.node_graph[i] == g).collect()
    }

    /// Incoming neighbor set of every node, in arc order.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_nodes()];
        for a in &self.arcs {
            out[a.target].push(a.source);
        }
        out
    }

    /// Dense `n x n` mask: `mask[i * n + j]` is true iff `j -> i` is an arc.
    pub fn neighbor_mask(&self) -> Vec<bool> {
        let n = self.n_nodes();
        let mut mask = vec![false; n * n];
        for a in &self.arcs {
            mask[a.target * n + a.source] = true;
        }
        mask
    }

    /// Copy with every collection node and its arcs removed.
    pub fn without_collection(&self) -> BatchedGraph {
        let keep: Vec<usize> = (0..self.n_nodes()).filter(|&i| !self.is_collection(i)).collect();
        let mut remap = vec![usize::MAX; self.n_nodes()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        BatchedGraph {
            node_features: keep.iter().map(|&i| self.node_features[i].clone()).collect(),
            node_segment: keep.iter().map(|&i| self.node_segment[i]).collect(),
            node_graph: keep.iter().map(|&i| self.node_graph[i]).collect(),
            arcs: self
                .arcs
                .iter()
                .filter(|a| !matches!(a.kind, ArcKind::Virtual))
                .map(|a| Arc {
                    source: remap[a.source],
                    target: remap[a.target],
                    kind: a.kind.clone(),
                })
                .collect(),
            collection: vec![None; self.n_graphs()],
        }
    }

    /// Checks the structural contract shared by single, pair, and
    /// pre-training inputs.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Structure(m));
        let n = self.n_nodes();
        if self.node_segment.len() != n || self.node_graph.len() != n {
            return bad("per-node vectors disagree in length".into());
        }
        if self.node_graph.iter().any(|&g| g >= self.n_graphs()) {
            return bad("node refers to a missing graph".into());
        }
        let width = self.node_features.first().map_or(0, Vec::len);
        if self.node_features.iter().any(|f| f.len() != width) {
            return bad("ragged node feature lists".into());
        }
        for (g, c) in self.collection.iter().enumerate() {
            let members = self.graph_nodes(g);
            let collects: Vec<usize> = members.iter().copied().filter(|&i| self.is_collection(i)).collect();
            match (c, collects.as_slice()) {
                (None, []) => {}
                (Some(c), [only]) if c == only => {
                    let mut sources: Vec<usize> =
                        self.arcs.iter().filter(|a| a.target == *c).map(|a| a.source).collect();
                    sources.sort_unstable();
                    let expected: Vec<usize> = members.iter().copied().filter(|&i| i != *c).collect();
                    if sources != expected {
                        return bad(format!(
                            "collection node {c} must receive exactly one arc from every node"
                        ));
                    }
                }
                _ => return bad(format!("graph {g} collection bookkeeping is inconsistent")),
            }
        }
        for a in &self.arcs {
            if a.source >= n || a.target >= n || a.source == a.target {
                return bad(format!("arc {} -> {} out of range or a loop", a.source, a.target));
            }
            if self.node_graph[a.source] != self.node_graph[a.target] {
                return bad("arc crosses graphs".into());
            }
            match &a.kind {
                ArcKind::Virtual => {
                    if !self.is_collection(a.target) {
                        return bad("virtual arc must end at a collection node".into());
                    }
                }
                ArcKind::Bond { segment, .. } => {
                    if self.is_collection(a.source) || self.is_collection(a.target) {
                        return bad("bond arcs cannot touch a collection node".into());
                    }
                    if self.node_segment[a.source] != *segment || self.node_segment[a.target] != *segment {
                        return bad("bond arc joins different segments".into());
                    }
                }
            }
        }
        Ok(())
    }
}
