//! Domain types: architectures, specification/concrete/tagged tasks, and
//! structural validation.

use std::fmt;
use std::sync::{Arc, OnceLock};

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

use crate::graph::{Dag, GraphError, SubtaskGraph};

/// Integer time unit used everywhere.
pub type Ticks = u64;
pub type NodeId = u32;
pub type TaskId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    SubTask { tag: String, wcet: Ticks },
    Alternative,
    Conditional,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "NodeRecord", into = "NodeRecord")]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
}

impl Node {
    pub fn subtask(id: NodeId, tag: impl Into<String>, wcet: Ticks) -> Self {
        Self { id, kind: NodeKind::SubTask { tag: tag.into(), wcet } }
    }

    pub fn alternative(id: NodeId) -> Self {
        Self { id, kind: NodeKind::Alternative }
    }

    pub fn conditional(id: NodeId) -> Self {
        Self { id, kind: NodeKind::Conditional }
    }

    /// WCET of a sub-task; control nodes cost nothing.
    pub fn wcet(&self) -> Ticks {
        match &self.kind {
            NodeKind::SubTask { wcet, .. } => *wcet,
            _ => 0,
        }
    }

    pub fn tag(&self) -> Option<&str> {
        match &self.kind {
            NodeKind::SubTask { tag, .. } => Some(tag),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            NodeKind::SubTask { .. } => "subtask",
            NodeKind::Alternative => "alternative",
            NodeKind::Conditional => "conditional",
        }
    }
}

/// Wire form of a node in the task-set JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeRecord {
    id: NodeId,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wcet: Option<Ticks>,
}

impl TryFrom<NodeRecord> for Node {
    type Error = String;

    fn try_from(r: NodeRecord) -> Result<Self, Self::Error> {
        let kind = match r.kind.to_ascii_lowercase().as_str() {
            "subtask" | "sub-task" | "sub_task" => NodeKind::SubTask {
                tag: r.tag.ok_or_else(|| format!("sub-task {} has no tag", r.id))?,
                wcet: r.wcet.ok_or_else(|| format!("sub-task {} has no wcet", r.id))?,
            },
            "alternative" => NodeKind::Alternative,
            "conditional" => NodeKind::Conditional,
            other => return Err(format!("node {}: unknown kind {other:?}", r.id)),
        };
        Ok(Node { id: r.id, kind })
    }
}

impl From<Node> for NodeRecord {
    fn from(n: Node) -> Self {
        let kind = n.kind_name().to_string();
        match n.kind {
            NodeKind::SubTask { tag, wcet } => NodeRecord { id: n.id, kind, tag: Some(tag), wcet: Some(wcet) },
            _ => NodeRecord { id: n.id, kind, tag: None, wcet: None },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagInfo {
    pub name: String,
    pub count: usize,
    #[serde(default)]
    pub preemption_factor: f64,
}

impl TagInfo {
    pub fn new(name: impl Into<String>, count: usize, preemption_factor: f64) -> Self {
        Self { name: name.into(), count, preemption_factor }
    }

    /// Preemption factor in parts per million.
    pub fn preemption_ppm(&self) -> u64 {
        (self.preemption_factor * 1e6).round().max(0.0) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Engine {
    pub id: usize,
    /// Index into [`Architecture::tags`].
    pub tag: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    tags: Vec<TagInfo>,
    engines: Vec<Engine>,
    tag_order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ArchError {
    #[error("duplicate tag {0}")]
    DuplicateTag(String),
    #[error("negative or non-finite preemption factor for tag {0}")]
    BadPreemptionFactor(String),
}

impl Architecture {
    /// Engines are numbered consecutively in tag declaration order.
    pub fn new(tags: Vec<TagInfo>) -> Result<Self, ArchError> {
        for (i, t) in tags.iter().enumerate() {
            if tags[..i].iter().any(|o| o.name == t.name) {
                return Err(ArchError::DuplicateTag(t.name.clone()));
            }
            if !t.preemption_factor.is_finite() || t.preemption_factor < 0.0 {
                return Err(ArchError::BadPreemptionFactor(t.name.clone()));
            }
        }
        let mut engines = Vec::new();
        for (ti, t) in tags.iter().enumerate() {
            for _ in 0..t.count {
                engines.push(Engine { id: engines.len(), tag: ti });
            }
        }
        let mut tag_order: Vec<usize> = (0..tags.len()).collect();
        tag_order.sort_by(|&a, &b| tags[a].count.cmp(&tags[b].count).then_with(|| tags[a].name.cmp(&tags[b].name)));
        Ok(Self { tags, engines, tag_order })
    }

    /// Jetson AGX Xavier: 8 CPU cores plus one iGPU, dGPU, DLA and PVA.
    pub fn xavier() -> Self {
        Self::new(vec![
            TagInfo::new("CPU", 8, 0.0002),
            TagInfo::new("iGPU", 1, 0.30),
            TagInfo::new("dGPU", 1, 0.30),
            TagInfo::new("DLA", 1, 0.10),
            TagInfo::new("PVA", 1, 0.10),
        ])
        .expect("fixture is valid")
    }

    /// Pegasus-style board: 16 engines over five tags.
    pub fn pegasus() -> Self {
        Self::new(vec![
            TagInfo::new("CPU", 8, 0.0002),
            TagInfo::new("dGPU", 2, 0.30),
            TagInfo::new("iGPU", 2, 0.30),
            TagInfo::new("DLA", 2, 0.10),
            TagInfo::new("PVA", 2, 0.10),
        ])
        .expect("fixture is valid")
    }

    pub fn fixture(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "xavier" => Some(Self::xavier()),
            "pegasus" => Some(Self::pegasus()),
            _ => None,
        }
    }

    pub fn tags(&self) -> &[TagInfo] {
        &self.tags
    }

    pub fn engines(&self) -> &[Engine] {
        &self.engines
    }

    /// Tag indices by ascending engine count, ties by name.
    pub fn tag_order(&self) -> &[usize] {
        &self.tag_order
    }

    pub fn tag_index(&self, name: &str) -> Option<usize> {
        self.tags.iter().position(|t| t.name == name)
    }

    pub fn engines_with_tag(&self, tag: usize) -> impl Iterator<Item = &Engine> + '_ {
        self.engines.iter().filter(move |e| e.tag == tag)
    }

    /// Tags with fewer engines than the most populated tag.
    pub fn scarce_tags(&self) -> Vec<usize> {
        let max = self.tags.iter().map(|t| t.count).max().unwrap_or(0);
        (0..self.tags.len()).filter(|&i| self.tags[i].count < max).collect()
    }
}

/// Specification task as read from input: may contain any node kind and is
/// not guaranteed to be well formed until [`validate_spec`] passes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecTask {
    pub id: TaskId,
    #[serde(rename = "T")]
    pub period: Ticks,
    #[serde(rename = "D")]
    pub deadline: Ticks,
    pub nodes: Vec<Node>,
    pub edges: Vec<(NodeId, NodeId)>,
}

impl SpecTask {
    pub fn dag(&self) -> Result<Dag, GraphError> {
        Dag::new(self.nodes.clone(), &self.edges)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConcreteId {
    pub spec: TaskId,
    pub index: u32,
}

impl fmt::Display for ConcreteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.spec, self.index)
    }
}

/// Offsets and intermediate deadlines, indexed like the owning [`Dag`].
/// Control nodes carry the offset they forward and a zero deadline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub offset: Vec<Ticks>,
    pub deadline: Vec<Ticks>,
}

impl Timing {
    pub fn local_deadline(&self, ix: usize) -> Ticks {
        self.offset[ix] + self.deadline[ix]
    }
}

/// An alternative-free task. Conditional nodes remain and are resolved at run
/// time.
#[derive(Debug, Clone)]
pub struct ConcreteTask {
    pub id: ConcreteId,
    pub period: Ticks,
    pub deadline: Ticks,
    pub dag: Dag,
    /// (alternative node, chosen successor) pairs that produced this task.
    pub choices: Vec<(NodeId, NodeId)>,
    pub timing: Option<Timing>,
    subtasks: OnceLock<SubtaskGraph>,
    scenarios: OnceLock<Arc<Scenarios>>,
}

/// Conditional scenarios of a concrete task as sub-task membership sets over
/// the concrete [`Dag`] indices. `exhaustive` is false when the count cap was
/// hit and the union of all sub-tasks stands in for the scenarios.
#[derive(Debug, Clone)]
pub struct Scenarios {
    pub sets: Vec<FixedBitSet>,
    pub exhaustive: bool,
}

/// Scenario enumeration cap used for analysis.
pub const SCENARIO_CAP: usize = 4096;

impl ConcreteTask {
    pub fn new(id: ConcreteId, period: Ticks, deadline: Ticks, dag: Dag, choices: Vec<(NodeId, NodeId)>) -> Self {
        Self { id, period, deadline, dag, choices, timing: None, subtasks: OnceLock::new(), scenarios: OnceLock::new() }
    }

    pub fn subtask_graph(&self) -> &SubtaskGraph {
        self.subtasks.get_or_init(|| self.dag.subtask_graph())
    }

    pub fn total_wcet(&self) -> Ticks {
        self.dag.nodes().iter().map(Node::wcet).sum()
    }

    /// Total WCET per tag, in `arch` tag index order.
    pub fn tag_loads(&self, arch: &Architecture) -> Vec<Ticks> {
        let mut loads = vec![0; arch.tags().len()];
        for n in self.dag.nodes() {
            if let Some(t) = n.tag().and_then(|t| arch.tag_index(t)) {
                loads[t] += n.wcet();
            }
        }
        loads
    }

    pub fn local_deadline(&self, id: NodeId) -> Result<Ticks, TimingAbsent> {
        let t = self.timing.as_ref().ok_or(TimingAbsent)?;
        let ix = self.dag.index_of(id).map_err(|_| TimingAbsent)?;
        Ok(t.local_deadline(ix))
    }

    /// Cached conditional scenarios (see [`crate::expansion::enumerate_conditional_scenarios`]).
    pub fn scenarios(&self) -> Arc<Scenarios> {
        self.scenarios.get_or_init(|| Arc::new(crate::expansion::scenario_sets(&self.dag, SCENARIO_CAP))).clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("offsets and deadlines have not been assigned")]
pub struct TimingAbsent;

/// Per-tag isomorphic copy of a concrete task. Sub-tasks outside `active`
/// are null (WCET 0) but keep their offsets and deadlines.
///
/// The same type also represents the fragments produced when a tagged task
/// is split over several engines: a fragment is a tagged task with a smaller
/// active set.
#[derive(Debug, Clone)]
pub struct TaggedTask {
    pub parent: Arc<ConcreteTask>,
    pub tag: String,
    pub active: FixedBitSet,
}

impl TaggedTask {
    pub fn period(&self) -> Ticks {
        self.parent.period
    }

    pub fn deadline(&self) -> Ticks {
        self.parent.deadline
    }

    pub fn dag(&self) -> &Dag {
        &self.parent.dag
    }

    pub fn timing(&self) -> Result<&Timing, TimingAbsent> {
        self.parent.timing.as_ref().ok_or(TimingAbsent)
    }

    pub fn wcet(&self, ix: usize) -> Ticks {
        if self.active.contains(ix) {
            self.parent.dag.wcet(ix)
        } else {
            0
        }
    }

    pub fn is_null(&self, ix: usize) -> bool {
        self.parent.dag.is_subtask(ix) && !self.active.contains(ix)
    }

    pub fn active_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.active.ones()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_clear()
    }

    pub fn total_wcet(&self) -> Ticks {
        self.active.ones().map(|ix| self.parent.dag.wcet(ix)).sum()
    }

    /// Re-filters on `tag`; a no-op for the tag the task was built with.
    pub fn filter(&self, tag: &str) -> TaggedTask {
        let mut active = self.active.clone();
        for ix in self.active.ones() {
            if self.parent.dag.node(ix).tag() != Some(tag) {
                active.set(ix, false);
            }
        }
        TaggedTask { parent: self.parent.clone(), tag: tag.to_string(), active }
    }

    /// Fragment restricted to `keep`.
    pub fn with_active(&self, keep: FixedBitSet) -> TaggedTask {
        TaggedTask { parent: self.parent.clone(), tag: self.tag.clone(), active: keep }
    }

    pub fn active_ids(&self) -> Vec<NodeId> {
        self.active.ones().map(|ix| self.parent.dag.node(ix).id).collect()
    }
}

/// Keeps the sub-tasks tagged `tag`, nulls the rest.
pub fn filter_tagged_task(c: &Arc<ConcreteTask>, tag: &str) -> TaggedTask {
    let mut active = FixedBitSet::with_capacity(c.dag.len());
    for ix in c.dag.subtask_indices() {
        if c.dag.node(ix).tag() == Some(tag) {
            active.insert(ix);
        }
    }
    TaggedTask { parent: c.clone(), tag: tag.to_string(), active }
}

/// One tagged task per architecture tag, in `arch` tag order.
pub fn tagged_tasks(c: &Arc<ConcreteTask>, arch: &Architecture) -> Vec<TaggedTask> {
    arch.tags().iter().map(|t| filter_tagged_task(c, &t.name)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Graph(GraphError),
    Cycle,
    NoSubtasks,
    UnknownTag { node: NodeId, tag: String },
    ZeroWcet(NodeId),
    ControlArity { node: NodeId, kind: &'static str, out_degree: usize },
    ControlWithoutPredecessor { node: NodeId, kind: &'static str },
    AlternativeNotAllowed(NodeId),
    Disconnected,
    DeadlineExceedsPeriod { deadline: Ticks, period: Ticks },
    ZeroPeriod,
    ZeroDeadline,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Graph(e) => write!(f, "{e}"),
            Violation::Cycle => write!(f, "cycle"),
            Violation::NoSubtasks => write!(f, "no sub-tasks"),
            Violation::UnknownTag { node, tag } => write!(f, "unknown tag {tag} on node {node}"),
            Violation::ZeroWcet(n) => write!(f, "zero wcet on node {n}"),
            Violation::ControlArity { node, kind, out_degree } => {
                write!(f, "{kind} arity < 2 (node {node} has {out_degree} outgoing edges)")
            }
            Violation::ControlWithoutPredecessor { node, kind } => write!(f, "{kind} node {node} has no predecessor"),
            Violation::AlternativeNotAllowed(n) => write!(f, "alternative node {n} in a concrete task"),
            Violation::Disconnected => write!(f, "graph is not weakly connected"),
            Violation::DeadlineExceedsPeriod { deadline, period } => write!(f, "deadline {deadline} > period {period}"),
            Violation::ZeroPeriod => write!(f, "zero period"),
            Violation::ZeroDeadline => write!(f, "zero deadline"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, pred: impl Fn(&Violation) -> bool) -> bool {
        self.violations.iter().any(pred)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        let msgs: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

pub fn validate_spec(task: &SpecTask, arch: &Architecture) -> ValidationReport {
    let mut report = ValidationReport::default();
    match task.dag() {
        Ok(dag) => validate_dag(&dag, task.period, task.deadline, Some(arch), true, &mut report),
        Err(e) => report.violations.push(Violation::Graph(e)),
    }
    report
}

/// Structural checks for an expanded task: alternatives are not allowed,
/// only Conditional arity is checked, and the graph may fall apart into
/// several components (a dropped branch can be the only link between them).
pub fn validate_concrete(task: &ConcreteTask, arch: &Architecture) -> ValidationReport {
    let mut report = ValidationReport::default();
    validate_dag(&task.dag, task.period, task.deadline, Some(arch), false, &mut report);
    report
}

fn validate_dag(
    dag: &Dag,
    period: Ticks,
    deadline: Ticks,
    arch: Option<&Architecture>,
    spec_level: bool,
    report: &mut ValidationReport,
) {
    let v = &mut report.violations;
    if period == 0 {
        v.push(Violation::ZeroPeriod);
    }
    if deadline == 0 {
        v.push(Violation::ZeroDeadline);
    }
    if deadline > period {
        v.push(Violation::DeadlineExceedsPeriod { deadline, period });
    }
    if dag.subtask_indices().next().is_none() {
        v.push(Violation::NoSubtasks);
    }
    if dag.topo_order().is_err() {
        v.push(Violation::Cycle);
    }
    for (ix, n) in dag.nodes().iter().enumerate() {
        match &n.kind {
            NodeKind::SubTask { tag, wcet } => {
                if *wcet == 0 {
                    v.push(Violation::ZeroWcet(n.id));
                }
                if let Some(a) = arch {
                    if a.tag_index(tag).is_none() {
                        v.push(Violation::UnknownTag { node: n.id, tag: tag.clone() });
                    }
                }
            }
            NodeKind::Alternative | NodeKind::Conditional => {
                let kind = n.kind_name();
                if n.kind == NodeKind::Alternative && !spec_level {
                    v.push(Violation::AlternativeNotAllowed(n.id));
                }
                if dag.succ(ix).len() < 2 {
                    v.push(Violation::ControlArity { node: n.id, kind, out_degree: dag.succ(ix).len() });
                }
                if dag.pred(ix).is_empty() {
                    v.push(Violation::ControlWithoutPredecessor { node: n.id, kind });
                }
            }
        }
    }
    if spec_level && !dag.is_weakly_connected() {
        v.push(Violation::Disconnected);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(d: Ticks, t: Ticks) -> SpecTask {
        SpecTask {
            id: 0,
            period: t,
            deadline: d,
            nodes: vec![Node::subtask(1, "CPU", 2), Node::subtask(2, "CPU", 3)],
            edges: vec![(1, 2)],
        }
    }

    #[test]
    fn minimal_chain_is_valid() {
        let r = validate_spec(&chain(10, 10), &Architecture::xavier());
        assert!(r.is_ok(), "{r}");
    }

    #[test]
    fn back_edge_is_a_cycle() {
        let mut t = chain(10, 10);
        t.edges.push((2, 1));
        let r = validate_spec(&t, &Architecture::xavier());
        assert!(r.contains(|v| *v == Violation::Cycle));
        assert!(r.to_string().contains("cycle"));
    }

    #[test]
    fn alternative_with_one_branch_rejected() {
        let t = SpecTask {
            id: 0,
            period: 10,
            deadline: 10,
            nodes: vec![Node::subtask(1, "CPU", 1), Node::alternative(2), Node::subtask(3, "CPU", 1)],
            edges: vec![(1, 2), (2, 3)],
        };
        let r = validate_spec(&t, &Architecture::xavier());
        assert!(r.to_string().contains("alternative arity < 2"), "{r}");
    }

    #[test]
    fn other_violations_reported() {
        let mut t = chain(12, 10);
        t.nodes.push(Node::subtask(3, "FPGA", 0));
        let r = validate_spec(&t, &Architecture::xavier());
        assert!(r.contains(|v| matches!(v, Violation::DeadlineExceedsPeriod { .. })));
        assert!(r.contains(|v| matches!(v, Violation::UnknownTag { .. })));
        assert!(r.contains(|v| matches!(v, Violation::ZeroWcet(3))));
        assert!(r.contains(|v| *v == Violation::Disconnected));
        t.edges.push((1, 9));
        let r = validate_spec(&t, &Architecture::xavier());
        assert!(r.contains(|v| matches!(v, Violation::Graph(GraphError::DanglingEdge(1, 9)))));
    }

    #[test]
    fn tag_order_is_by_count_then_name() {
        let a = Architecture::xavier();
        let names: Vec<&str> = a.tag_order().iter().map(|&i| a.tags()[i].name.as_str()).collect();
        assert_eq!(names, vec!["DLA", "PVA", "dGPU", "iGPU", "CPU"]);
        assert_eq!(a.engines().len(), 12);
        assert_eq!(Architecture::pegasus().engines().len(), 16);
    }

    #[test]
    fn preemption_ppm_is_exact() {
        assert_eq!(TagInfo::new("GPU", 1, 0.3).preemption_ppm(), 300_000);
        assert_eq!(TagInfo::new("CPU", 1, 0.0002).preemption_ppm(), 200);
    }

    #[test]
    fn node_json_round_trip() {
        let n = Node::subtask(4, "DLA", 7);
        let s = serde_json::to_string(&n).unwrap();
        assert_eq!(s, r#"{"id":4,"kind":"subtask","tag":"DLA","wcet":7}"#);
        let back: Node = serde_json::from_str(&s).unwrap();
        assert_eq!(back, n);
        let c: Node = serde_json::from_str(r#"{"id":9,"kind":"Conditional"}"#).unwrap();
        assert_eq!(c, Node::conditional(9));
        assert!(serde_json::from_str::<Node>(r#"{"id":9,"kind":"subtask"}"#).is_err());
    }
}
