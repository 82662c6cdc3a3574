//! Path analysis and intermediate deadline / offset assignment.
//!
//! All path computations run on the sub-task graph, where conditional nodes
//! are transparent and cost nothing.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::SubtaskGraph;
use crate::model::{ConcreteTask, NodeId, Ticks, Timing};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlackMode {
    /// Equal split of the path slack.
    Fair,
    /// Split proportional to each sub-task's WCET.
    Proportional,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TimingError {
    #[error("critical path exceeds the deadline (slack {slack})")]
    Infeasible { slack: i64 },
    #[error("task has no sub-tasks")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathRecord {
    /// Sub-task ids from source to sink.
    pub nodes: Vec<NodeId>,
    pub wcet: Ticks,
}

/// Every source-to-sink path, by non-increasing WCET then lexicographic id
/// sequence. The first element is the critical path.
///
/// Exponential in the worst case; deadline assignment does not depend on it.
pub fn enumerate_paths(c: &ConcreteTask) -> Vec<PathRecord> {
    let sg = c.subtask_graph();
    let wcet: Vec<Ticks> = sg.members.iter().map(|&ix| c.dag.wcet(ix)).collect();
    let mut out = Vec::new();
    let mut stack: Vec<(usize, usize)> = Vec::new();
    let mut path: Vec<usize> = Vec::new();
    for src in (0..sg.len()).filter(|&k| sg.preds[k].is_empty()) {
        stack.push((src, 0));
        while let Some((v, depth)) = stack.pop() {
            path.truncate(depth);
            path.push(v);
            if sg.succs[v].is_empty() {
                out.push(PathRecord {
                    nodes: path.iter().map(|&k| c.dag.node(sg.members[k]).id).collect(),
                    wcet: path.iter().map(|&k| wcet[k]).sum(),
                });
            } else {
                for &s in sg.succs[v].iter().rev() {
                    stack.push((s, depth + 1));
                }
            }
        }
    }
    out.sort_by(|a, b| b.wcet.cmp(&a.wcet).then_with(|| a.nodes.cmp(&b.nodes)));
    out
}

/// Longest path ending at / starting from each node, inclusive of the node.
fn longest(sg: &SubtaskGraph, order: &[usize], w: &[Ticks]) -> (Vec<Ticks>, Vec<Ticks>) {
    let mut fwd = vec![0; sg.len()];
    for &v in order {
        fwd[v] = w[v] + sg.preds[v].iter().map(|&p| fwd[p]).max().unwrap_or(0);
    }
    let mut bwd = vec![0; sg.len()];
    for &v in order.iter().rev() {
        bwd[v] = w[v] + sg.succs[v].iter().map(|&s| bwd[s]).max().unwrap_or(0);
    }
    (fwd, bwd)
}

pub fn critical_path_wcet(c: &ConcreteTask) -> Ticks {
    let sg = c.subtask_graph();
    let w: Vec<Ticks> = sg.members.iter().map(|&ix| c.dag.wcet(ix)).collect();
    let (fwd, _) = longest(sg, &sg.topo_order(), &w);
    fwd.into_iter().max().unwrap_or(0)
}

/// Local indices of the critical path (largest WCET, smallest id sequence).
pub fn critical_path(c: &ConcreteTask) -> Vec<usize> {
    let sg = c.subtask_graph();
    let w: Vec<Ticks> = sg.members.iter().map(|&ix| c.dag.wcet(ix)).collect();
    let all_open = vec![true; sg.len()];
    heaviest_open_path(sg, &sg.topo_order(), &w, &all_open).unwrap_or_default()
}

#[derive(PartialEq, Eq)]
struct Prefix {
    bound: Ticks,
    cost: Ticks,
    has_open: bool,
    path: Vec<usize>,
}

impl Ord for Prefix {
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound.cmp(&other.bound).then_with(|| other.path.cmp(&self.path))
    }
}

impl PartialOrd for Prefix {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The heaviest source-to-sink path that visits at least one `open` node,
/// ties broken by smallest index sequence. Best-first search with an exact
/// completion bound, so it expands only prefixes of optimal paths.
fn heaviest_open_path(sg: &SubtaskGraph, order: &[usize], w: &[Ticks], open: &[bool]) -> Option<Vec<usize>> {
    let mut best = vec![0; sg.len()];
    let mut best_open: Vec<Option<Ticks>> = vec![None; sg.len()];
    for &v in order.iter().rev() {
        best[v] = w[v] + sg.succs[v].iter().map(|&s| best[s]).max().unwrap_or(0);
        best_open[v] = if open[v] {
            Some(best[v])
        } else {
            sg.succs[v].iter().filter_map(|&s| best_open[s]).max().map(|b| b + w[v])
        };
    }
    let mut heap = BinaryHeap::new();
    for v in (0..sg.len()).filter(|&v| sg.preds[v].is_empty()) {
        if let Some(b) = best_open[v] {
            heap.push(Prefix { bound: b, cost: w[v], has_open: open[v], path: vec![v] });
        }
    }
    while let Some(p) = heap.pop() {
        let last = *p.path.last().expect("non-empty prefix");
        if sg.succs[last].is_empty() {
            return Some(p.path);
        }
        for &s in &sg.succs[last] {
            let tail = if p.has_open { Some(best[s]) } else { best_open[s] };
            if let Some(t) = tail {
                let mut path = p.path.clone();
                path.push(s);
                heap.push(Prefix { bound: p.cost + t, cost: p.cost + w[s], has_open: p.has_open || open[s], path });
            }
        }
    }
    None
}

/// Integer shares of `residual` over nodes with WCETs `wcets`, floored, with
/// the remainder given to the last node.
fn shares(mode: SlackMode, residual: i64, wcets: &[Ticks]) -> Vec<Ticks> {
    let n = wcets.len();
    if residual <= 0 || n == 0 {
        return vec![0; n];
    }
    let residual = residual as u64;
    let mut out: Vec<Ticks> = match mode {
        SlackMode::Fair => vec![residual / n as u64; n],
        SlackMode::Proportional => {
            let total: u64 = wcets.iter().sum();
            if total == 0 {
                vec![residual / n as u64; n]
            } else {
                wcets.iter().map(|&c| ((residual as u128 * c as u128) / total as u128) as u64).collect()
            }
        }
    };
    let given: u64 = out.iter().sum();
    out[n - 1] += residual - given;
    out
}

/// Largest uniform slack (fair: equal ticks, proportional: equal fraction of
/// WCET) that every unassigned node can still receive with all paths within
/// `deadline`.
fn reserves(
    sg: &SubtaskGraph,
    order: &[usize],
    mode: SlackMode,
    deadline: Ticks,
    wcet: &[Ticks],
    assigned: &[Option<Ticks>],
) -> Vec<Ticks> {
    let extra = |k: usize, x: u64| -> Ticks {
        match mode {
            SlackMode::Fair => x,
            SlackMode::Proportional => ((wcet[k] as u128 * x as u128) / 1_000_000) as Ticks,
        }
    };
    let fits = |x: u64| {
        let w: Vec<Ticks> = (0..sg.len()).map(|k| assigned[k].unwrap_or(wcet[k] + extra(k, x))).collect();
        longest(sg, order, &w).0.into_iter().max().unwrap_or(0) <= deadline
    };
    // Fair: ticks; proportional: parts per million of the WCET.
    let (mut lo, mut hi) = (
        0u64,
        match mode {
            SlackMode::Fair => deadline,
            SlackMode::Proportional => deadline.saturating_mul(1_000_000),
        },
    );
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    (0..sg.len()).map(|k| if assigned[k].is_some() { 0 } else { extra(k, lo) }).collect()
}

/// Assigns intermediate deadlines and offsets.
///
/// Paths are taken by non-increasing WCET. On each path, sub-tasks that
/// already have a deadline keep it and the residual slack goes to the others
/// (fair or proportional split). A share never exceeds the slack left on the
/// tightest path through the sub-task, so every source-to-sink path keeps
/// `Σ D(v) ≤ D`; the critical path gets exactly `D`.
///
/// Offsets: 0 for sources, otherwise the latest local deadline among the
/// sub-task predecessors.
pub fn assign_deadlines_offsets(c: &ConcreteTask, mode: SlackMode) -> Result<ConcreteTask, TimingError> {
    let timing = compute_timing(c, mode)?;
    let mut out = c.clone();
    out.timing = Some(timing);
    Ok(out)
}

pub fn compute_timing(c: &ConcreteTask, mode: SlackMode) -> Result<Timing, TimingError> {
    let sg = c.subtask_graph();
    if sg.is_empty() {
        return Err(TimingError::Empty);
    }
    let order = sg.topo_order();
    let wcet: Vec<Ticks> = sg.members.iter().map(|&ix| c.dag.wcet(ix)).collect();
    let deadline = c.deadline;

    let (fwd, _) = longest(sg, &order, &wcet);
    let crit = fwd.iter().copied().max().unwrap_or(0);
    if crit > deadline {
        return Err(TimingError::Infeasible { slack: deadline as i64 - crit as i64 });
    }

    let mut assigned: Vec<Option<Ticks>> = vec![None; sg.len()];
    // Slack kept back for nodes not assigned yet; set once the critical
    // path is fixed.
    let mut reserve: Vec<Ticks> = vec![0; sg.len()];
    let mut first = true;
    loop {
        let open: Vec<bool> = assigned.iter().map(Option::is_none).collect();
        let Some(path) = heaviest_open_path(sg, &order, &wcet, &open) else {
            break;
        };
        let fixed: Ticks = path.iter().filter_map(|&v| assigned[v]).sum();
        let pending: Vec<usize> = path.iter().copied().filter(|&v| assigned[v].is_none()).collect();
        let pending_wcet: Vec<Ticks> = pending.iter().map(|&v| wcet[v]).collect();
        let residual = deadline as i64 - fixed as i64 - pending_wcet.iter().sum::<Ticks>() as i64;
        let wanted = shares(mode, residual, &pending_wcet);
        for (&v, want) in pending.iter().zip(wanted) {
            reserve[v] = 0;
            let w: Vec<Ticks> = (0..sg.len()).map(|k| assigned[k].unwrap_or(wcet[k] + reserve[k])).collect();
            let (f, b) = longest(sg, &order, &w);
            let room = deadline.saturating_sub(f[v] + b[v] - w[v]);
            assigned[v] = Some(wcet[v] + want.min(room));
        }
        if first {
            first = false;
            reserve = reserves(sg, &order, mode, deadline, &wcet, &assigned);
        }
    }

    let n = c.dag.len();
    let mut offset = vec![0; n];
    let mut rel = vec![0; n];
    for (k, &ix) in sg.members.iter().enumerate() {
        rel[ix] = assigned[k].expect("every sub-task lies on some path");
    }
    for ix in c.dag.topo_order().expect("concrete tasks are acyclic") {
        offset[ix] = c.dag.pred(ix).iter().map(|&p| offset[p] + rel[p]).max().unwrap_or(0);
    }
    Ok(Timing { offset, deadline: rel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Dag;
    use crate::model::{ConcreteId, Node};

    fn task(wcets: &[Ticks], edges: &[(NodeId, NodeId)], d: Ticks) -> ConcreteTask {
        let nodes = wcets.iter().enumerate().map(|(i, &c)| Node::subtask(i as NodeId + 1, "CPU", c)).collect();
        ConcreteTask::new(ConcreteId { spec: 0, index: 0 }, d, d, Dag::new(nodes, edges).unwrap(), vec![])
    }

    #[test]
    fn chain_fair_rounds_down_then_gives_remainder_to_last() {
        let c = assign_deadlines_offsets(&task(&[2, 3], &[(1, 2)], 10), SlackMode::Fair).unwrap();
        let t = c.timing.as_ref().unwrap();
        assert_eq!(t.deadline, vec![4, 6]);
        assert_eq!(t.offset, vec![0, 4]);
        assert_eq!(c.local_deadline(2).unwrap(), 10);
    }

    #[test]
    fn chain_proportional_is_exact() {
        let c = assign_deadlines_offsets(&task(&[2, 3], &[(1, 2)], 10), SlackMode::Proportional).unwrap();
        let t = c.timing.as_ref().unwrap();
        assert_eq!(t.deadline, vec![4, 6]);
        assert_eq!(t.offset, vec![0, 4]);
    }

    #[test]
    fn negative_slack_is_infeasible() {
        let err = assign_deadlines_offsets(&task(&[2, 3], &[(1, 2)], 4), SlackMode::Fair).unwrap_err();
        assert_eq!(err, TimingError::Infeasible { slack: -1 });
    }

    #[test]
    fn timing_absent_before_assignment() {
        assert!(task(&[1], &[], 5).local_deadline(1).is_err());
    }

    #[test]
    fn single_path() {
        let p = enumerate_paths(&task(&[2, 3], &[(1, 2)], 10));
        assert_eq!(p, vec![PathRecord { nodes: vec![1, 2], wcet: 5 }]);
    }

    #[test]
    fn diamond_critical_path() {
        let c = task(&[1, 5, 2, 1], &[(1, 2), (1, 3), (2, 4), (3, 4)], 20);
        let p = enumerate_paths(&c);
        assert_eq!(p[0], PathRecord { nodes: vec![1, 2, 4], wcet: 7 });
        assert_eq!(p.len(), 2);
        let local: Vec<NodeId> =
            critical_path(&c).iter().map(|&k| c.dag.node(c.subtask_graph().members[k]).id).collect();
        assert_eq!(local, vec![1, 2, 4]);
    }

    #[test]
    fn example_concrete_paths() {
        let p = enumerate_paths(&crate::fixtures::example_concrete());
        let mut sets: Vec<Vec<NodeId>> = p.iter().map(|r| r.nodes.clone()).collect();
        sets.sort();
        assert_eq!(sets, vec![vec![1, 6, 8], vec![1, 7, 8], vec![2, 6, 8], vec![2, 7, 8]]);
        assert_eq!(p[0].nodes, vec![2, 6, 8]);
    }

    #[test]
    fn crossing_paths_stay_within_deadline() {
        // a(1) -> b(30) is critical; d(2)-e(1)-f(1)-g(27) is next; a -> e
        // crosses. Unclamped fair shares would give the crossing path > D.
        let c = task(&[1, 30, 2, 1, 1, 27], &[(1, 2), (3, 4), (4, 5), (5, 6), (1, 4)], 100);
        for mode in [SlackMode::Fair, SlackMode::Proportional] {
            let t = compute_timing(&c, mode).unwrap();
            for p in enumerate_paths(&c) {
                let s: Ticks = p.nodes.iter().map(|&id| t.deadline[c.dag.index_of(id).unwrap()]).sum();
                assert!(s <= 100, "{mode:?} {p:?} sums to {s}");
            }
            let sink = c.dag.index_of(2).unwrap();
            assert_eq!(t.local_deadline(sink), 100);
        }
    }
}
