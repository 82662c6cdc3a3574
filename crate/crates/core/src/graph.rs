//! Index-based DAG storage shared by specification, concrete and tagged tasks.
//!
//! Nodes are kept sorted by id and addressed by their position ("index").
//! Adjacency lists hold indices and are sorted, so every traversal below is
//! deterministic.

use std::collections::{BTreeSet, HashMap};

use fixedbitset::FixedBitSet;
use thiserror::Error;

use crate::model::{Node, NodeId, NodeKind, Ticks};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("edge ({0}, {1}) references an unknown node")]
    DanglingEdge(NodeId, NodeId),
    #[error("self loop on node {0}")]
    SelfLoop(NodeId),
    #[error("graph contains a cycle")]
    Cycle,
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    nodes: Vec<Node>,
    index: HashMap<NodeId, usize>,
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
}

impl Dag {
    /// Builds the adjacency structure. Duplicate edges are merged; cycles are
    /// not rejected here (see [`Dag::topo_order`]).
    pub fn new(mut nodes: Vec<Node>, edges: &[(NodeId, NodeId)]) -> Result<Self, GraphError> {
        nodes.sort_by_key(|n| n.id);
        let mut index = HashMap::with_capacity(nodes.len());
        for (ix, n) in nodes.iter().enumerate() {
            if index.insert(n.id, ix).is_some() {
                return Err(GraphError::DuplicateNode(n.id));
            }
        }
        let mut succ: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nodes.len()];
        let mut pred: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nodes.len()];
        for &(a, b) in edges {
            let (Some(&ia), Some(&ib)) = (index.get(&a), index.get(&b)) else {
                return Err(GraphError::DanglingEdge(a, b));
            };
            if ia == ib {
                return Err(GraphError::SelfLoop(a));
            }
            succ[ia].insert(ib);
            pred[ib].insert(ia);
        }
        Ok(Self {
            nodes,
            index,
            succ: succ.into_iter().map(|s| s.into_iter().collect()).collect(),
            pred: pred.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, ix: usize) -> &Node {
        &self.nodes[ix]
    }

    pub fn index_of(&self, id: NodeId) -> Result<usize, GraphError> {
        self.index.get(&id).copied().ok_or(GraphError::UnknownNode(id))
    }

    pub fn succ(&self, ix: usize) -> &[usize] {
        &self.succ[ix]
    }

    pub fn pred(&self, ix: usize) -> &[usize] {
        &self.pred[ix]
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.succ
            .iter()
            .enumerate()
            .flat_map(move |(a, ss)| ss.iter().map(move |&b| (self.nodes[a].id, self.nodes[b].id)))
    }

    pub fn edge_count(&self) -> usize {
        self.succ.iter().map(Vec::len).sum()
    }

    pub fn is_subtask(&self, ix: usize) -> bool {
        matches!(self.nodes[ix].kind, NodeKind::SubTask { .. })
    }

    pub fn wcet(&self, ix: usize) -> Ticks {
        self.nodes[ix].wcet()
    }

    pub fn sources(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.pred[i].is_empty()).collect()
    }

    pub fn sinks(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.succ[i].is_empty()).collect()
    }

    pub fn subtask_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.is_subtask(i))
    }

    /// Kahn's algorithm, smallest index first among ready nodes.
    pub fn topo_order(&self) -> Result<Vec<usize>, GraphError> {
        let mut indeg: Vec<usize> = self.pred.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..self.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for &s in &self.succ[v] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() == self.len() {
            Ok(order)
        } else {
            Err(GraphError::Cycle)
        }
    }

    pub fn is_weakly_connected(&self) -> bool {
        if self.is_empty() {
            return true;
        }
        let mut seen = FixedBitSet::with_capacity(self.len());
        let mut stack = vec![0usize];
        seen.insert(0);
        while let Some(v) = stack.pop() {
            for &w in self.succ[v].iter().chain(self.pred[v].iter()) {
                if !seen.put(w) {
                    stack.push(w);
                }
            }
        }
        seen.count_ones(..) == self.len()
    }

    /// Nearest sub-task ancestors of `ix`, looking through control nodes.
    pub fn subtask_preds(&self, ix: usize) -> Vec<usize> {
        self.nearest_subtasks(ix, &self.pred)
    }

    /// Nearest sub-task descendants of `ix`, looking through control nodes.
    pub fn subtask_succs(&self, ix: usize) -> Vec<usize> {
        self.nearest_subtasks(ix, &self.succ)
    }

    fn nearest_subtasks(&self, ix: usize, adj: &[Vec<usize>]) -> Vec<usize> {
        let mut out = BTreeSet::new();
        let mut seen = FixedBitSet::with_capacity(self.len());
        let mut stack: Vec<usize> = adj[ix].clone();
        while let Some(v) = stack.pop() {
            if seen.put(v) {
                continue;
            }
            if self.is_subtask(v) {
                out.insert(v);
            } else {
                stack.extend(adj[v].iter().copied());
            }
        }
        out.into_iter().collect()
    }

    /// Sub-task graph with control nodes contracted away.
    pub fn subtask_graph(&self) -> SubtaskGraph {
        let members: Vec<usize> = self.subtask_indices().collect();
        let mut local = vec![usize::MAX; self.len()];
        for (k, &ix) in members.iter().enumerate() {
            local[ix] = k;
        }
        let preds = members.iter().map(|&ix| self.subtask_preds(ix).into_iter().map(|p| local[p]).collect()).collect();
        let succs = members.iter().map(|&ix| self.subtask_succs(ix).into_iter().map(|s| local[s]).collect()).collect();
        SubtaskGraph { members, local, preds, succs }
    }
}

/// Sub-tasks only, edges `p -> v` whenever `v` is reachable from `p` through
/// control nodes alone. Positions are "local" indices; `members[k]` maps back
/// to the owning [`Dag`] index.
#[derive(Debug, Clone)]
pub struct SubtaskGraph {
    pub members: Vec<usize>,
    pub local: Vec<usize>,
    pub preds: Vec<Vec<usize>>,
    pub succs: Vec<Vec<usize>>,
}

impl SubtaskGraph {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Local indices in topological order. The contracted graph of a DAG is a
    /// DAG, so this cannot fail.
    pub fn topo_order(&self) -> Vec<usize> {
        let mut indeg: Vec<usize> = self.preds.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..self.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for &s in &self.succs[v] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        debug_assert_eq!(order.len(), self.len());
        order
    }
}
