//! Synthetic task sets: layered random DAGs with alternative and conditional
//! patterns, per-tag utilizations split with UUniFast-Discard, and the
//! cp-DAG baseline obtained by fixing one concrete task at random.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expansion::{concrete_from_selection, ControlKind, Selection, Selections};
use crate::model::{Architecture, ConcreteTask, Node, NodeId, SpecTask, TaskId, Ticks};

pub const DEFAULT_PERIODS: [Ticks; 12] = [120, 240, 300, 600, 1200, 2400, 3000, 6000, 12000, 24000, 60000, 120000];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Target utilization per tag name; missing tags get 0.
    pub utilization: BTreeMap<String, f64>,
    pub task_count: [usize; 2],
    pub node_count: [usize; 2],
    pub edge_probability: f64,
    /// Layers: `ceil(|V| / depth_divisor)`.
    pub depth_divisor: usize,
    pub control_probability: f64,
    /// Share of inserted control nodes that are alternatives.
    pub alternative_share: f64,
    /// Length range of the fresh branch added with each control node.
    pub branch_len: [usize; 2],
    pub periods: Vec<Ticks>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            utilization: BTreeMap::new(),
            task_count: [20, 25],
            node_count: [10, 30],
            edge_probability: 0.3,
            depth_divisor: 3,
            control_probability: 0.7,
            alternative_share: 0.5,
            branch_len: [1, 3],
            periods: DEFAULT_PERIODS.to_vec(),
        }
    }
}

impl GenConfig {
    /// Every tag at `fraction` of its engine count.
    pub fn uniform(arch: &Architecture, fraction: f64) -> Self {
        let utilization = arch.tags().iter().map(|t| (t.name.clone(), fraction * t.count as f64)).collect();
        Self { utilization, ..Self::default() }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("utilization {u} exceeds capacity {cap}")]
    OverCapacity { u: f64, cap: f64 },
    #[error("all target utilizations are zero")]
    ZeroUtilization,
    #[error("unknown tag {0}")]
    UnknownTag(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("discard limit reached")]
    DiscardLimit,
}

const DISCARD_LIMIT: usize = 100_000;

/// `n` utilizations summing to `total`, each at most `cap`.
pub fn uunifast_discard(n: usize, total: f64, cap: f64, rng: &mut impl Rng) -> Result<Vec<f64>, GenError> {
    if n == 0 || !total.is_finite() || total < 0.0 {
        return Err(GenError::Config(format!("uunifast_discard(n={n}, U={total})")));
    }
    let max = n as f64 * cap;
    if total > max + 1e-12 {
        return Err(GenError::OverCapacity { u: total, cap: max });
    }
    if total >= max - 1e-12 {
        return Ok(vec![cap; n]);
    }
    for _ in 0..DISCARD_LIMIT {
        let mut out = Vec::with_capacity(n);
        let mut rest = total;
        for i in 1..n {
            let next = rest * rng.gen::<f64>().powf(1.0 / (n - i) as f64);
            out.push(rest - next);
            rest = next;
        }
        let given: f64 = out.iter().sum();
        out.push(total - given);
        if out.iter().all(|&u| u <= cap && u >= 0.0) {
            return Ok(out);
        }
    }
    Err(GenError::DiscardLimit)
}

/// Shape of one task before WCETs are assigned.
struct Skeleton {
    nodes: Vec<Node>,
    edges: Vec<(NodeId, NodeId)>,
    /// Tag index per sub-task id.
    tags: BTreeMap<NodeId, usize>,
}

fn layered_dag(cfg: &GenConfig, ntags: usize, rng: &mut impl Rng) -> Skeleton {
    let n = rng.gen_range(cfg.node_count[0]..=cfg.node_count[1]);
    let depth = n.div_ceil(cfg.depth_divisor.max(1)).max(1);
    let mut layer: Vec<usize> = (0..n).map(|i| if i < depth { i } else { rng.gen_range(0..depth) }).collect();
    layer.sort_unstable();

    let mut edges: Vec<(usize, usize)> = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if layer[a] < layer[b] && rng.gen_bool(cfg.edge_probability) {
                edges.push((a, b));
            }
        }
    }

    // Join components into the one holding node 0.
    loop {
        let comp = components(n, &edges);
        let Some(x) = (0..n).find(|&v| comp[v] != comp[0]) else { break };
        let others: Vec<usize> = (0..n).filter(|&v| comp[v] != comp[x]).collect();
        let mine: Vec<usize> = (0..n).filter(|&v| comp[v] == comp[x]).collect();
        let pairs: Vec<(usize, usize)> = mine
            .iter()
            .flat_map(|&a| others.iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| layer[a] != layer[b])
            .collect();
        if let Some(&(a, b)) = pairs.choose(rng) {
            edges.push(if layer[a] < layer[b] { (a, b) } else { (b, a) });
        } else {
            // Both sides sit in a single layer: move the isolated node.
            let y = others[0];
            layer[x] = if layer[y] + 1 < depth || layer[y] == 0 { layer[y] + 1 } else { layer[y] - 1 };
            edges.push(if layer[x] < layer[y] { (x, y) } else { (y, x) });
        }
    }

    let nodes = (0..n).map(|i| Node::subtask(i as NodeId + 1, "", 1)).collect();
    let tags = (0..n).map(|i| (i as NodeId + 1, rng.gen_range(0..ntags))).collect();
    let edges = edges.into_iter().map(|(a, b)| (a as NodeId + 1, b as NodeId + 1)).collect();
    Skeleton { nodes, edges, tags }
}

fn components(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    (0..n).map(|v| find(&mut parent, v)).collect()
}

/// Routes one successor of selected sub-tasks through a new alternative or
/// conditional node whose second branch is a fresh chain ending at the
/// bypassed node's successors.
fn insert_controls(sk: &mut Skeleton, cfg: &GenConfig, ntags: usize, rng: &mut impl Rng) {
    let base: Vec<NodeId> = sk.nodes.iter().map(|n| n.id).collect();
    let mut next_id = base.iter().max().copied().unwrap_or(0) + 1;
    for &u in &base {
        let succs: Vec<NodeId> =
            sk.edges.iter().filter(|e| e.0 == u && sk.tags.contains_key(&e.1)).map(|e| e.1).collect();
        if succs.is_empty() || !rng.gen_bool(cfg.control_probability) {
            continue;
        }
        let s = *succs.choose(rng).expect("non-empty");
        let s_succs: Vec<NodeId> = sk.edges.iter().filter(|e| e.0 == s).map(|e| e.1).collect();
        let ctrl = next_id;
        next_id += 1;
        sk.nodes.push(if rng.gen_bool(cfg.alternative_share) {
            Node::alternative(ctrl)
        } else {
            Node::conditional(ctrl)
        });
        sk.edges.retain(|&e| e != (u, s));
        sk.edges.push((u, ctrl));
        sk.edges.push((ctrl, s));
        let len = rng.gen_range(cfg.branch_len[0]..=cfg.branch_len[1]);
        let mut prev = ctrl;
        for _ in 0..len {
            let v = next_id;
            next_id += 1;
            sk.nodes.push(Node::subtask(v, "", 1));
            sk.tags.insert(v, rng.gen_range(0..ntags));
            sk.edges.push((prev, v));
            prev = v;
        }
        for &w in &s_succs {
            sk.edges.push((prev, w));
        }
    }
}

/// Re-tags random sub-tasks until every tag appears at least once.
fn cover_tags(sk: &mut Skeleton, ntags: usize, rng: &mut impl Rng) {
    for tag in 0..ntags {
        if sk.tags.values().any(|&t| t == tag) {
            continue;
        }
        let mut counts = vec![0usize; ntags];
        for &t in sk.tags.values() {
            counts[t] += 1;
        }
        let donors: Vec<NodeId> = sk.tags.iter().filter(|(_, &t)| counts[t] >= 2).map(|(&id, _)| id).collect();
        if let Some(&id) = donors.choose(rng) {
            sk.tags.insert(id, tag);
        }
    }
}

fn validate_config(cfg: &GenConfig, arch: &Architecture) -> Result<Vec<f64>, GenError> {
    for name in cfg.utilization.keys() {
        if arch.tag_index(name).is_none() {
            return Err(GenError::UnknownTag(name.clone()));
        }
    }
    let bad = |m: &str| Err(GenError::Config(m.to_string()));
    if cfg.task_count[0] == 0 || cfg.task_count[0] > cfg.task_count[1] {
        return bad("task_count");
    }
    if cfg.node_count[0] == 0 || cfg.node_count[0] > cfg.node_count[1] {
        return bad("node_count");
    }
    if cfg.branch_len[0] == 0 || cfg.branch_len[0] > cfg.branch_len[1] {
        return bad("branch_len");
    }
    for p in [cfg.edge_probability, cfg.control_probability, cfg.alternative_share] {
        if !(0.0..=1.0).contains(&p) {
            return bad("probabilities must lie in [0, 1]");
        }
    }
    if cfg.periods.is_empty() || cfg.periods.contains(&0) {
        return bad("periods");
    }
    let targets: Vec<f64> = arch.tags().iter().map(|t| cfg.utilization.get(&t.name).copied().unwrap_or(0.0)).collect();
    for (t, &u) in arch.tags().iter().zip(&targets) {
        if u.is_nan() || u < 0.0 || u > t.count as f64 + 1e-12 {
            return Err(GenError::OverCapacity { u, cap: t.count as f64 });
        }
    }
    if targets.iter().all(|&u| u == 0.0) {
        return Err(GenError::ZeroUtilization);
    }
    Ok(targets)
}

/// Generates a task set for `arch`; tasks are numbered from 0.
pub fn generate_taskset(cfg: &GenConfig, arch: &Architecture, rng: &mut impl Rng) -> Result<Vec<SpecTask>, GenError> {
    let targets = validate_config(cfg, arch)?;
    let ntags = arch.tags().len();
    let n = rng.gen_range(cfg.task_count[0]..=cfg.task_count[1]);
    let mut skeletons: Vec<Skeleton> = (0..n)
        .map(|_| {
            let mut sk = layered_dag(cfg, ntags, rng);
            insert_controls(&mut sk, cfg, ntags, rng);
            cover_tags(&mut sk, ntags, rng);
            sk
        })
        .collect();

    // Task-level shares; a task cannot carry more of a tag than it has
    // sub-tasks of that tag (sub-task utilization is capped at 1).
    let mut shares = vec![vec![0.0; ntags]; n];
    for (tag, &u) in targets.iter().enumerate() {
        if u == 0.0 {
            continue;
        }
        let cap = arch.tags()[tag].count as f64;
        let counts: Vec<f64> =
            skeletons.iter().map(|sk| sk.tags.values().filter(|&&t| t == tag).count() as f64).collect();
        let mut drawn = None;
        for _ in 0..DISCARD_LIMIT {
            let v = uunifast_discard(n, u, cap, rng)?;
            if v.iter().zip(&counts).all(|(x, c)| x <= c) {
                drawn = Some(v);
                break;
            }
        }
        let v = drawn.ok_or(GenError::DiscardLimit)?;
        for (i, x) in v.into_iter().enumerate() {
            shares[i][tag] = x;
        }
    }

    let mut out = Vec::with_capacity(n);
    for (i, sk) in skeletons.iter_mut().enumerate() {
        let period = *cfg.periods.choose(rng).expect("non-empty period list");
        let mut wcet: BTreeMap<NodeId, Ticks> = BTreeMap::new();
        for (tag, &share) in shares[i].iter().enumerate() {
            let ids: Vec<NodeId> = sk.tags.iter().filter(|(_, &t)| t == tag).map(|(&id, _)| id).collect();
            if ids.is_empty() {
                continue;
            }
            let us = uunifast_discard(ids.len(), share.min(ids.len() as f64), 1.0, rng)?;
            for (id, u) in ids.into_iter().zip(us) {
                wcet.insert(id, ((u * period as f64).floor() as Ticks).max(1));
            }
        }
        let nodes = sk
            .nodes
            .iter()
            .map(|nd| match sk.tags.get(&nd.id) {
                Some(&t) => Node::subtask(nd.id, arch.tags()[t].name.clone(), wcet[&nd.id]),
                None => nd.clone(),
            })
            .collect();
        out.push(SpecTask { id: i as TaskId, period, deadline: period, nodes, edges: std::mem::take(&mut sk.edges) });
    }
    Ok(out)
}

/// cp-DAG baseline: one concrete task drawn uniformly over the alternative
/// choice vectors. Conditional nodes stay.
pub fn derive_cpdag(spec: &SpecTask, rng: &mut impl Rng) -> ConcreteTask {
    let dag = spec.dag().expect("validated specification");
    let sels: Vec<Selection> = Selections::new(&dag, ControlKind::Alternative)
        .expect("validated specification")
        .take(crate::allocation::OMEGA_CAP)
        .collect();
    let pick = rng.gen_range(0..sels.len());
    let mut c = concrete_from_selection(spec, &dag, &sels[pick], pick as u32);
    c.id.index = 0;
    c
}
