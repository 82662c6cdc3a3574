//! JSON interchange: task-set files and allocation plans.
//!
//! A plan is self-contained: it carries the architecture, every allocated
//! concrete task with its offsets and deadlines, and the per-engine items, so
//! it can be replayed by the simulator without the original task set.

use std::collections::HashMap;
use std::sync::Arc;

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{Allocation, SpecFailure};
use crate::analysis::{self, PreemptionMode};
use crate::graph::{Dag, GraphError};
use crate::model::{
    ArchError, Architecture, ConcreteId, ConcreteTask, Node, NodeId, SpecTask, TagInfo, TaggedTask, TaskId, Ticks,
    Timing,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("plan: {0}")]
    Plan(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub tags: Vec<TagInfo>,
}

impl ArchSpec {
    pub fn of(arch: &Architecture) -> Self {
        Self { tags: arch.tags().to_vec() }
    }

    pub fn build(&self) -> Result<Architecture, ArchError> {
        Architecture::new(self.tags.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSetFile {
    pub arch: ArchSpec,
    pub tasks: Vec<SpecTask>,
}

impl TaskSetFile {
    pub fn new(arch: &Architecture, tasks: Vec<SpecTask>) -> Self {
        Self { arch: ArchSpec::of(arch), tasks }
    }

    pub fn from_json(s: &str) -> Result<Self, IoError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("task sets serialize")
    }

    pub fn architecture(&self) -> Result<Architecture, IoError> {
        Ok(self.arch.build()?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTiming {
    pub node: NodeId,
    pub offset: Ticks,
    pub deadline: Ticks,
}

/// A timed concrete task as stored in a plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanTask {
    pub id: ConcreteId,
    #[serde(rename = "T")]
    pub period: Ticks,
    #[serde(rename = "D")]
    pub deadline: Ticks,
    pub nodes: Vec<Node>,
    pub edges: Vec<(NodeId, NodeId)>,
    /// Alternative choices that produced the task.
    pub choices: Vec<(NodeId, NodeId)>,
    pub timing: Vec<NodeTiming>,
}

impl PlanTask {
    pub fn of(c: &ConcreteTask) -> Result<Self, IoError> {
        let t = c.timing.as_ref().ok_or_else(|| IoError::Plan(format!("task {} has no timing", c.id)))?;
        Ok(Self {
            id: c.id,
            period: c.period,
            deadline: c.deadline,
            nodes: c.dag.nodes().to_vec(),
            edges: c.dag.edges().collect(),
            choices: c.choices.clone(),
            timing: c
                .dag
                .nodes()
                .iter()
                .enumerate()
                .map(|(ix, n)| NodeTiming { node: n.id, offset: t.offset[ix], deadline: t.deadline[ix] })
                .collect(),
        })
    }

    pub fn build(&self) -> Result<ConcreteTask, IoError> {
        let dag = Dag::new(self.nodes.clone(), &self.edges)?;
        let mut timing = Timing { offset: vec![0; dag.len()], deadline: vec![0; dag.len()] };
        let mut seen = FixedBitSet::with_capacity(dag.len());
        for r in &self.timing {
            let ix = dag.index_of(r.node)?;
            timing.offset[ix] = r.offset;
            timing.deadline[ix] = r.deadline;
            seen.insert(ix);
        }
        if let Some(ix) = dag.subtask_indices().find(|&ix| !seen.contains(ix)) {
            return Err(IoError::Plan(format!("task {}: sub-task {} has no timing", self.id, dag.node(ix).id)));
        }
        let mut c = ConcreteTask::new(self.id, self.period, self.deadline, dag, self.choices.clone());
        c.timing = Some(timing);
        Ok(c)
    }
}

/// Tagged task (or fragment) placed on an engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanItem {
    pub task: ConcreteId,
    pub tag: String,
    pub subtasks: Vec<NodeId>,
    /// WCET plus preemption charge, aligned with `subtasks`.
    pub inflated_wcet: Vec<Ticks>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEngine {
    pub engine: usize,
    pub tag: String,
    pub utilization: f64,
    pub items: Vec<PlanItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Success,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub verdict: Verdict,
    pub combo: String,
    pub preemption: PreemptionMode,
    pub arch: ArchSpec,
    pub tasks: Vec<PlanTask>,
    pub engines: Vec<PlanEngine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<SpecFailure>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub omega_capped: Vec<TaskId>,
}

impl Plan {
    pub fn from_allocation(alloc: &Allocation, arch: &Architecture) -> Result<Self, IoError> {
        let mode = alloc.combo.preemption;
        let tasks = alloc.accepted.iter().map(|c| PlanTask::of(c)).collect::<Result<Vec<_>, _>>()?;
        let mut engines = Vec::with_capacity(alloc.engines.len());
        for (e, items) in alloc.engines.iter().enumerate() {
            let tag = &arch.tags()[arch.engines()[e].tag];
            let ctx =
                analysis::inflate(items, tag.preemption_ppm(), mode).map_err(|err| IoError::Plan(err.to_string()))?;
            let items = items
                .iter()
                .zip(&ctx.extra)
                .map(|(t, extra)| PlanItem {
                    task: t.parent.id,
                    tag: t.tag.clone(),
                    subtasks: t.active_ids(),
                    inflated_wcet: t.active_indices().map(|ix| t.wcet(ix) + extra[ix]).collect(),
                })
                .collect();
            engines.push(PlanEngine { engine: e, tag: tag.name.clone(), utilization: alloc.utilization[e], items });
        }
        Ok(Self {
            verdict: if alloc.is_success() { Verdict::Success } else { Verdict::Fail },
            combo: alloc.combo.to_string(),
            preemption: mode,
            arch: ArchSpec::of(arch),
            tasks,
            engines,
            failure: alloc.failure.clone(),
            omega_capped: alloc.capped.clone(),
        })
    }

    pub fn from_json(s: &str) -> Result<Self, IoError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plans serialize")
    }

    /// Architecture and per-engine workloads, ready for analysis or
    /// simulation.
    pub fn workloads(&self) -> Result<(Architecture, Vec<Vec<TaggedTask>>), IoError> {
        let arch = self.arch.build()?;
        let mut tasks: HashMap<ConcreteId, Arc<ConcreteTask>> = HashMap::new();
        for t in &self.tasks {
            if tasks.insert(t.id, Arc::new(t.build()?)).is_some() {
                return Err(IoError::Plan(format!("task {} listed twice", t.id)));
            }
        }
        let mut out = vec![Vec::new(); arch.engines().len()];
        for pe in &self.engines {
            let slot = out.get_mut(pe.engine).ok_or_else(|| IoError::Plan(format!("unknown engine {}", pe.engine)))?;
            for item in &pe.items {
                let parent =
                    tasks.get(&item.task).ok_or_else(|| IoError::Plan(format!("unknown task {}", item.task)))?;
                let mut active = FixedBitSet::with_capacity(parent.dag.len());
                for &id in &item.subtasks {
                    let ix = parent.dag.index_of(id)?;
                    if parent.dag.node(ix).tag() != Some(item.tag.as_str()) {
                        return Err(IoError::Plan(format!(
                            "task {}: node {id} is not a {} sub-task",
                            item.task, item.tag
                        )));
                    }
                    active.insert(ix);
                }
                slot.push(TaggedTask { parent: parent.clone(), tag: item.tag.clone(), active });
            }
        }
        Ok((arch, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::allocate_taskset;
    use crate::fixtures;

    #[test]
    fn task_set_round_trip() {
        let arch = Architecture::xavier();
        let file = TaskSetFile::new(&arch, vec![fixtures::example_spec()]);
        let json = file.to_json();
        assert!(json.contains("\"preemption_factor\""));
        assert!(json.contains("\"T\": 30"));
        let back = TaskSetFile::from_json(&json).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.architecture().unwrap(), arch);
    }

    #[test]
    fn unknown_fields_rejected() {
        let bad = r#"{"arch": {"tags": []}, "tasks": [], "extra": 1}"#;
        assert!(matches!(TaskSetFile::from_json(bad), Err(IoError::Json(_))));
    }

    #[test]
    fn plan_round_trip_restores_workloads() {
        let arch = Architecture::xavier();
        let alloc = allocate_taskset(&[fixtures::example_spec()], &arch, "BRF-P".parse().unwrap(), 0);
        assert!(alloc.is_success());
        let plan = Plan::from_allocation(&alloc, &arch).unwrap();
        let back = Plan::from_json(&plan.to_json()).unwrap();
        assert_eq!(back, plan);
        let (a2, loads) = back.workloads().unwrap();
        assert_eq!(a2, arch);
        for (orig, restored) in alloc.engines.iter().zip(&loads) {
            assert_eq!(orig.len(), restored.len());
            for (x, y) in orig.iter().zip(restored) {
                assert_eq!(x.active_ids(), y.active_ids());
                assert_eq!(x.timing().unwrap(), y.timing().unwrap());
            }
        }
        let total: usize = plan.engines.iter().map(|e| e.items.len()).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn plan_with_dangling_task_is_rejected() {
        let arch = Architecture::xavier();
        let alloc = allocate_taskset(&[fixtures::example_spec()], &arch, "BRF-P".parse().unwrap(), 0);
        let mut plan = Plan::from_allocation(&alloc, &arch).unwrap();
        plan.tasks.clear();
        assert!(matches!(plan.workloads(), Err(IoError::Plan(_))));
    }
}
