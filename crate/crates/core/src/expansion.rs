//! Expansion of control nodes: concrete tasks (Ω) from alternatives,
//! run-time scenarios from conditionals, and the two orderings used to scan Ω.
//!
//! Both expansions use the same visit-and-select rule: starting from the
//! sources, every node reached is kept; a resolved control node forwards
//! only along its chosen edge. Control nodes are then removed and their
//! kept predecessors connected to the chosen successor.

use std::cmp::Ordering;

use fixedbitset::FixedBitSet;
use thiserror::Error;

use crate::graph::{Dag, GraphError};
use crate::model::{Architecture, ConcreteId, ConcreteTask, NodeId, NodeKind, Scenarios, SpecTask, Ticks};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExpansionError {
    #[error("specification {0} has no sub-tasks")]
    NoSubtasks(u32),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlKind {
    Alternative,
    Conditional,
}

impl ControlKind {
    fn matches(self, kind: &NodeKind) -> bool {
        matches!(
            (self, kind),
            (ControlKind::Alternative, NodeKind::Alternative) | (ControlKind::Conditional, NodeKind::Conditional)
        )
    }
}

/// One combination of branch choices for every reachable control node of a
/// given kind.
#[derive(Debug, Clone)]
pub struct Selection {
    /// `chosen[ix]` is the chosen successor index for resolved control nodes.
    pub chosen: Vec<Option<usize>>,
    /// Nodes reached from the sources under these choices (resolved control
    /// nodes included).
    pub kept: FixedBitSet,
}

impl Selection {
    pub fn total_wcet(&self, dag: &Dag) -> Ticks {
        self.kept.ones().map(|ix| dag.wcet(ix)).sum()
    }

    pub fn tag_loads(&self, dag: &Dag, arch: &Architecture) -> Vec<Ticks> {
        let mut loads = vec![0; arch.tags().len()];
        for ix in self.kept.ones() {
            if let Some(t) = dag.node(ix).tag().and_then(|t| arch.tag_index(t)) {
                loads[t] += dag.wcet(ix);
            }
        }
        loads
    }

    /// Retained sub-tasks only.
    pub fn subtasks(&self, dag: &Dag) -> FixedBitSet {
        let mut s = self.kept.clone();
        for ix in self.kept.ones() {
            if !dag.is_subtask(ix) {
                s.set(ix, false);
            }
        }
        s
    }

    /// (control node id, chosen successor id) pairs, by control id.
    pub fn choice_ids(&self, dag: &Dag) -> Vec<(NodeId, NodeId)> {
        self.chosen.iter().enumerate().filter_map(|(ix, c)| c.map(|s| (dag.node(ix).id, dag.node(s).id))).collect()
    }
}

fn reach(dag: &Dag, kind: ControlKind, chosen: &[Option<usize>]) -> FixedBitSet {
    let mut kept = FixedBitSet::with_capacity(dag.len());
    let mut stack = dag.sources();
    for &s in &stack {
        kept.insert(s);
    }
    while let Some(v) = stack.pop() {
        let forward: &[usize] = if kind.matches(&dag.node(v).kind) {
            match &chosen[v] {
                Some(c) => std::slice::from_ref(c),
                None => &[],
            }
        } else {
            dag.succ(v)
        };
        for &w in forward {
            if !kept.put(w) {
                stack.push(w);
            }
        }
    }
    kept
}

/// Lazy depth-first enumeration of all selections for control nodes of
/// `kind`. Only control nodes that are reachable under earlier choices are
/// branched on, so nested controls multiply the count only when their branch
/// is taken.
pub struct Selections<'a> {
    dag: &'a Dag,
    kind: ControlKind,
    topo: Vec<usize>,
    stack: Vec<Vec<Option<usize>>>,
}

impl<'a> Selections<'a> {
    pub fn new(dag: &'a Dag, kind: ControlKind) -> Result<Self, GraphError> {
        let topo = dag.topo_order()?;
        Ok(Self { dag, kind, topo, stack: vec![vec![None; dag.len()]] })
    }
}

impl Iterator for Selections<'_> {
    type Item = Selection;

    fn next(&mut self) -> Option<Selection> {
        while let Some(chosen) = self.stack.pop() {
            let kept = reach(self.dag, self.kind, &chosen);
            let open = self
                .topo
                .iter()
                .copied()
                .find(|&v| kept.contains(v) && chosen[v].is_none() && self.kind.matches(&self.dag.node(v).kind));
            match open {
                None => return Some(Selection { chosen, kept }),
                Some(v) => {
                    for &s in self.dag.succ(v).iter().rev() {
                        let mut next = chosen.clone();
                        next[v] = Some(s);
                        self.stack.push(next);
                    }
                }
            }
        }
        None
    }
}

/// Builds the graph that results from a selection: resolved control nodes
/// disappear and every kept edge into one is redirected to its chosen
/// successor.
pub fn materialize(dag: &Dag, kind: ControlKind, sel: &Selection) -> Dag {
    let is_resolved = |ix: usize| kind.matches(&dag.node(ix).kind);
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for ix in sel.kept.ones() {
        if is_resolved(ix) {
            continue;
        }
        nodes.push(dag.node(ix).clone());
        for &s in dag.succ(ix) {
            let mut target = s;
            while is_resolved(target) {
                match sel.chosen[target] {
                    Some(c) => target = c,
                    None => break,
                }
            }
            if sel.kept.contains(target) && !is_resolved(target) {
                edges.push((dag.node(ix).id, dag.node(target).id));
            }
        }
    }
    Dag::new(nodes, &edges).expect("sub-graph of a valid DAG")
}

/// Lazily yields every concrete task of `spec`, numbered in enumeration
/// order.
pub fn concrete_tasks<'a>(
    spec: &'a SpecTask,
    dag: &'a Dag,
) -> Result<impl Iterator<Item = ConcreteTask> + 'a, ExpansionError> {
    if dag.subtask_indices().next().is_none() {
        return Err(ExpansionError::NoSubtasks(spec.id));
    }
    let sels = Selections::new(dag, ControlKind::Alternative)?;
    Ok(sels.enumerate().map(move |(i, sel)| concrete_from_selection(spec, dag, &sel, i as u32)))
}

pub fn concrete_from_selection(spec: &SpecTask, dag: &Dag, sel: &Selection, index: u32) -> ConcreteTask {
    let g = materialize(dag, ControlKind::Alternative, sel);
    ConcreteTask::new(ConcreteId { spec: spec.id, index }, spec.period, spec.deadline, g, sel.choice_ids(dag))
}

/// Ω: all concrete tasks of a specification.
pub fn generate_concrete_tasks(spec: &SpecTask) -> Result<Vec<ConcreteTask>, ExpansionError> {
    let dag = spec.dag()?;
    let out = concrete_tasks(spec, &dag)?.collect();
    Ok(out)
}

/// A concrete task with every conditional resolved.
#[derive(Debug, Clone)]
pub struct ConditionalScenario {
    pub parent: ConcreteId,
    /// Retained node ids (sub-tasks only), ascending.
    pub nodes: Vec<NodeId>,
    pub dag: Dag,
}

pub fn enumerate_conditional_scenarios(t: &ConcreteTask) -> Vec<ConditionalScenario> {
    let sels = Selections::new(&t.dag, ControlKind::Conditional).expect("concrete tasks are acyclic");
    sels.map(|sel| {
        let dag = materialize(&t.dag, ControlKind::Conditional, &sel);
        let nodes = dag.nodes().iter().map(|n| n.id).collect();
        ConditionalScenario { parent: t.id, nodes, dag }
    })
    .collect()
}

/// Scenario sub-task sets over `dag` indices, in [`Selections`] order. Past
/// `cap` scenarios the union of all sub-tasks replaces them; it dominates
/// every scenario's demand.
pub fn scenario_sets(dag: &Dag, cap: usize) -> Scenarios {
    let topo = dag.topo_order().expect("concrete tasks are acyclic");
    let mut kept = FixedBitSet::with_capacity(dag.len());
    for s in dag.sources() {
        kept.insert(s);
    }
    let mut sets = Vec::new();
    if walk_scenarios(dag, &topo, 0, kept, cap, &mut sets) {
        return Scenarios { sets, exhaustive: true };
    }
    let mut all = FixedBitSet::with_capacity(dag.len());
    for ix in dag.subtask_indices() {
        all.insert(ix);
    }
    Scenarios { sets: vec![all], exhaustive: false }
}

/// Depth-first over conditionals in topological order; `kept` is final for
/// every node before `topo[pos]`. False once `cap` is exceeded.
fn walk_scenarios(
    dag: &Dag,
    topo: &[usize],
    mut pos: usize,
    mut kept: FixedBitSet,
    cap: usize,
    out: &mut Vec<FixedBitSet>,
) -> bool {
    while pos < topo.len() {
        let v = topo[pos];
        pos += 1;
        if !kept.contains(v) {
            continue;
        }
        if ControlKind::Conditional.matches(&dag.node(v).kind) {
            for &s in dag.succ(v) {
                let mut branch = kept.clone();
                branch.insert(s);
                if !walk_scenarios(dag, topo, pos, branch, cap, out) {
                    return false;
                }
            }
            return true;
        }
        for &s in dag.succ(v) {
            kept.insert(s);
        }
    }
    if out.len() == cap {
        return false;
    }
    for ix in kept.clone().ones() {
        if !dag.is_subtask(ix) {
            kept.set(ix, false);
        }
    }
    out.push(kept);
    true
}

/// Load summary used to order concrete tasks without materializing them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadSummary {
    pub id: ConcreteId,
    pub total: Ticks,
    /// Per-tag load in architecture tag index order.
    pub tag_loads: Vec<Ticks>,
}

impl LoadSummary {
    pub fn of(c: &ConcreteTask, arch: &Architecture) -> Self {
        Self { id: c.id, total: c.total_wcet(), tag_loads: c.tag_loads(arch) }
    }

    /// ≻ ordering: smaller total WCET first, then id.
    pub fn cmp_total(&self, other: &Self) -> Ordering {
        self.total.cmp(&other.total).then(self.id.cmp(&other.id))
    }

    /// ≫ ordering: lexicographic per-tag load along the scarcity order.
    pub fn cmp_scarce(&self, other: &Self, arch: &Architecture) -> Ordering {
        for &t in arch.tag_order() {
            match self.tag_loads[t].cmp(&other.tag_loads[t]) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        self.id.cmp(&other.id)
    }
}

pub fn compare_total(a: &ConcreteTask, b: &ConcreteTask) -> Ordering {
    a.total_wcet().cmp(&b.total_wcet()).then(a.id.cmp(&b.id))
}

pub fn compare_scarce(a: &ConcreteTask, b: &ConcreteTask, arch: &Architecture) -> Ordering {
    LoadSummary::of(a, arch).cmp_scarce(&LoadSummary::of(b, arch), arch)
}
