use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::CodeSystemDescriptor;
use crate::{Error, Result};

pub const DEFAULT_SIBLING_CAP: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    ParentChild,
    Sibling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphOptions {
    pub siblings: bool,
    /// Most sibling edges per node; each node links to its nearest lexical
    /// neighbours among the children of its parent.
    pub sibling_cap: usize,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            siblings: true,
            sibling_cap: DEFAULT_SIBLING_CAP,
        }
    }
}

/// Taxonomy graph over vocabulary codes and their induced ancestors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierGraph {
    /// Node names in lexical order; the index is the node id.
    pub nodes: Vec<String>,
    pub is_code: Vec<bool>,
    pub parent: Vec<Option<usize>>,
    /// Undirected edges keyed `(u, v)` with `u < v`.
    pub edges: BTreeMap<(usize, usize), EdgeKind>,
    index: BTreeMap<String, usize>,
}

impl HierGraph {
    pub fn build<'a>(
        codes: impl IntoIterator<Item = &'a str>,
        descriptor: &CodeSystemDescriptor,
        opts: GraphOptions,
    ) -> Result<Self> {
        let codes: BTreeSet<&str> = codes.into_iter().collect();
        let bad: Vec<String> = codes
            .iter()
            .filter(|c| !descriptor.matches_syntax(c))
            .map(|c| c.to_string())
            .collect();
        if !bad.is_empty() {
            return Err(Error::DescriptorSyntax(bad));
        }

        let mut parent_of: BTreeMap<String, Option<String>> = BTreeMap::new();
        let mut set_parent = |node: &str, parent: Option<&str>| -> Result<()> {
            let p = parent.map(str::to_string);
            match parent_of.get(node) {
                Some(existing) if *existing != p => Err(Error::Descriptor(format!(
                    "`{node}` has two parents: {existing:?} and {p:?}"
                ))),
                _ => {
                    parent_of.insert(node.to_string(), p);
                    Ok(())
                }
            }
        };
        for code in &codes {
            let chain = descriptor.ancestors(code)?;
            let mut up: Option<&str> = None;
            for anc in &chain {
                set_parent(anc, up)?;
                up = Some(anc);
            }
            set_parent(code, up)?;
        }

        let nodes: Vec<String> = parent_of.keys().cloned().collect();
        let index: BTreeMap<String, usize> = nodes.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let parent: Vec<Option<usize>> = nodes.iter().map(|n| parent_of[n].as_ref().map(|p| index[p])).collect();
        let is_code = nodes.iter().map(|n| codes.contains(n.as_str())).collect();

        let mut edges = BTreeMap::new();
        let mut children: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (c, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                edges.insert((c.min(p), c.max(p)), EdgeKind::ParentChild);
                children.entry(p).or_default().push(c);
            }
        }
        if opts.siblings {
            let reach = opts.sibling_cap / 2;
            for kids in children.values() {
                // `kids` is ascending, hence lexical
                for (a, &u) in kids.iter().enumerate() {
                    for &v in kids.iter().skip(a + 1).take(reach) {
                        edges.entry((u, v)).or_insert(EdgeKind::Sibling);
                    }
                }
            }
        }
        Ok(Self {
            nodes,
            is_code,
            parent,
            edges,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.contains_key(&(u.min(v), u.max(v)))
    }

    /// Dense symmetric 0/1 adjacency with zero diagonal, row-major.
    pub fn adjacency(&self) -> Vec<f64> {
        let n = self.len();
        let mut a = vec![0.0; n * n];
        for &(u, v) in self.edges.keys() {
            a[u * n + v] = 1.0;
            a[v * n + u] = 1.0;
        }
        a
    }

    /// `D^-1/2 (A + I) D^-1/2`, the propagation matrix of the GNN.
    pub fn normalized_adjacency(&self) -> Vec<f64> {
        let n = self.len();
        let mut a = self.adjacency();
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        let d: Vec<f64> = (0..n)
            .map(|i| 1.0 / a[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
            .collect();
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] *= d[i] * d[j];
            }
        }
        a
    }
}
