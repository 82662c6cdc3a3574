//! Greedy partitioned allocation: per specification, scan its concrete
//! tasks in the chosen order and place every tagged task on one engine of
//! its tag; if no concrete task fits that way, split tagged tasks over
//! several engines of the same tag.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;
use std::sync::Arc;

use fixedbitset::FixedBitSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, DemandCurve, PreemptionMode};
use crate::expansion::{concrete_from_selection, ControlKind, Selection, Selections};
use crate::model::{tagged_tasks, Architecture, ConcreteId, ConcreteTask, SpecTask, TaggedTask, TaskId, Ticks};
use crate::timing::{self, SlackMode};

/// Concrete tasks considered per specification; enumeration stops there.
pub const OMEGA_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fit {
    Best,
    Worst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CandidateOrder {
    /// Smallest total WCET first.
    Total,
    /// Smallest load on the scarcest tags first.
    Scarce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Omit {
    /// Heaviest sub-task off the critical path.
    Parallel,
    /// Uniformly random sub-task.
    Random,
}

/// Heuristic combination, written `BRF-P`: fit (B/W), candidate order
/// (O = total, R = scarce), slack (F/P), then omit (P/R). A `:max` suffix
/// selects the pessimistic preemption inflation, `:none` ignores
/// preemption costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct HeuristicCombo {
    pub fit: Fit,
    pub order: CandidateOrder,
    pub slack: SlackMode,
    pub omit: Omit,
    pub preemption: PreemptionMode,
}

impl fmt::Display for HeuristicCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fit = if self.fit == Fit::Best { 'B' } else { 'W' };
        let order = if self.order == CandidateOrder::Total { 'O' } else { 'R' };
        let slack = if self.slack == SlackMode::Fair { 'F' } else { 'P' };
        let omit = if self.omit == Omit::Parallel { 'P' } else { 'R' };
        write!(f, "{fit}{order}{slack}-{omit}")?;
        match self.preemption {
            PreemptionMode::Reduced => Ok(()),
            PreemptionMode::Max => write!(f, ":max"),
            PreemptionMode::None => write!(f, ":none"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("bad heuristic combination {0:?} (expected e.g. BRF-P or WOP-R:max)")]
pub struct ComboParseError(pub String);

impl FromStr for HeuristicCombo {
    type Err = ComboParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ComboParseError(s.to_string());
        let (name, preemption) = match s.split_once(':') {
            None => (s, PreemptionMode::Reduced),
            Some((n, "max")) => (n, PreemptionMode::Max),
            Some((n, "reduced")) => (n, PreemptionMode::Reduced),
            Some((n, "none")) => (n, PreemptionMode::None),
            Some(_) => return Err(err()),
        };
        let b = name.as_bytes();
        if b.len() != 5 || b[3] != b'-' {
            return Err(err());
        }
        let fit = match b[0] {
            b'B' => Fit::Best,
            b'W' => Fit::Worst,
            _ => return Err(err()),
        };
        let order = match b[1] {
            b'O' => CandidateOrder::Total,
            b'R' => CandidateOrder::Scarce,
            _ => return Err(err()),
        };
        let slack = match b[2] {
            b'F' => SlackMode::Fair,
            b'P' => SlackMode::Proportional,
            _ => return Err(err()),
        };
        let omit = match b[4] {
            b'P' => Omit::Parallel,
            b'R' => Omit::Random,
            _ => return Err(err()),
        };
        Ok(Self { fit, order, slack, omit, preemption })
    }
}

impl TryFrom<String> for HeuristicCombo {
    type Error = ComboParseError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<HeuristicCombo> for String {
    fn from(c: HeuristicCombo) -> Self {
        c.to_string()
    }
}

/// Engine ids sorted for `fit`: best fit by non-increasing utilization,
/// worst fit by non-decreasing; ties by id.
pub fn order_engines(loads: &[(usize, f64)], fit: Fit) -> Vec<usize> {
    let mut v = loads.to_vec();
    v.sort_by(|a, b| {
        let by_load = a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal);
        let by_load = if fit == Fit::Best { by_load.reverse() } else { by_load };
        by_load.then(a.0.cmp(&b.0))
    });
    v.into_iter().map(|(e, _)| e).collect()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OmitError {
    #[error("nothing left to omit")]
    Empty,
    #[error("only critical-path sub-tasks remain")]
    CriticalPathOnly,
}

/// Sub-task (DAG index) to drop from `t`.
pub fn select_omit(t: &TaggedTask, omit: Omit, critical: &FixedBitSet, rng: &mut impl Rng) -> Result<usize, OmitError> {
    if t.is_empty() {
        return Err(OmitError::Empty);
    }
    match omit {
        Omit::Parallel => t
            .active_indices()
            .filter(|&ix| !critical.contains(ix))
            .max_by(|&a, &b| t.wcet(a).cmp(&t.wcet(b)).then(b.cmp(&a)))
            .ok_or(OmitError::CriticalPathOnly),
        Omit::Random => {
            let n = t.active.count_ones(..);
            Ok(t.active_indices().nth(rng.gen_range(0..n)).expect("index below count"))
        }
    }
}

/// DAG indices of the concrete task's critical path.
pub fn critical_set(c: &ConcreteTask) -> FixedBitSet {
    let sg = c.subtask_graph();
    let mut s = FixedBitSet::with_capacity(c.dag.len());
    for k in timing::critical_path(c) {
        s.insert(sg.members[k]);
    }
    s
}

/// Tentative placement of a tagged task (or fragment) on an engine.
pub type Placement = (usize, TaggedTask);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateFailure {
    pub concrete: ConcreteId,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecFailure {
    pub spec: TaskId,
    pub candidates: Vec<CandidateFailure>,
}

/// (concrete task address, active bits, inflation). Only valid while the
/// concrete task is alive, hence the per-specification reset.
type ScratchKey = (usize, Vec<usize>, Vec<Ticks>);
/// Committed curve and the inflation vector it was built with.
type CachedCurve = (Vec<Ticks>, Rc<DemandCurve>);
/// Timed concrete task with its tagged tasks; `None` once it failed timing.
type Prepared = Option<(Arc<ConcreteTask>, Vec<TaggedTask>)>;

/// Allocator state: committed workload per engine.
pub struct Allocator<'a> {
    arch: &'a Architecture,
    combo: HeuristicCombo,
    engines: Vec<Vec<TaggedTask>>,
    util: Vec<f64>,
    /// Demand curve of each committed item with the inflation it was built for.
    curves: RefCell<Vec<Vec<Option<CachedCurve>>>>,
    /// Curves of tentative items, cleared after every specification.
    scratch: RefCell<HashMap<ScratchKey, Rc<DemandCurve>>>,
    capped: Vec<TaskId>,
    rng: ChaCha8Rng,
}

enum Pass {
    Sequential,
    Parallel,
}

impl<'a> Allocator<'a> {
    pub fn new(arch: &'a Architecture, combo: HeuristicCombo, seed: u64) -> Self {
        let n = arch.engines().len();
        Self {
            arch,
            combo,
            engines: vec![Vec::new(); n],
            util: vec![0.0; n],
            curves: RefCell::new(vec![Vec::new(); n]),
            scratch: RefCell::default(),
            capped: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn workloads(&self) -> &[Vec<TaggedTask>] {
        &self.engines
    }

    pub fn into_workloads(self) -> Vec<Vec<TaggedTask>> {
        self.engines
    }

    /// Inflated utilization of each engine's committed workload.
    pub fn utilizations(&self) -> &[f64] {
        &self.util
    }

    fn ppm(&self, e: usize) -> u64 {
        self.arch.tags()[self.arch.engines()[e].tag].preemption_ppm()
    }

    fn load(&self, e: usize, pending: &[Placement]) -> Vec<TaggedTask> {
        let mut items = self.engines[e].clone();
        items.extend(pending.iter().filter(|p| p.0 == e).map(|p| p.1.clone()));
        items
    }

    fn fits(&self, e: usize, pending: &[Placement], cand: &TaggedTask) -> bool {
        let mut items = self.load(e, pending);
        items.push(cand.clone());
        let ctx = analysis::inflate(&items, self.ppm(e), self.combo.preemption).expect("allocated tasks are timed");
        let committed = self.engines[e].len();
        let mut cache = self.curves.borrow_mut();
        let slots = &mut cache[e];
        slots.resize(committed, None);
        let build = |t: &TaggedTask, extra: &[Ticks]| {
            Rc::new(DemandCurve::new(t, Some(extra)).expect("allocated tasks are timed"))
        };
        let mut curves = Vec::with_capacity(items.len());
        for (i, (t, extra)) in items.iter().zip(&ctx.extra).enumerate() {
            let c = match slots.get_mut(i) {
                Some(Some((key, c))) if key == extra => c.clone(),
                Some(slot) => {
                    let c = build(t, extra);
                    *slot = Some((extra.clone(), c.clone()));
                    c
                }
                None => {
                    let key = (Arc::as_ptr(&t.parent) as usize, t.active.as_slice().to_vec(), extra.clone());
                    self.scratch.borrow_mut().entry(key).or_insert_with(|| build(t, extra)).clone()
                }
            };
            if !c.is_zero() {
                curves.push(c);
            }
        }
        analysis::check_curves(&curves).feasible
    }

    fn engine_util(&self, e: usize, pending: &[Placement]) -> f64 {
        if pending.iter().all(|p| p.0 != e) {
            return self.util[e];
        }
        analysis::workload_utilization(&self.load(e, pending), self.ppm(e), self.combo.preemption)
            .expect("allocated tasks are timed")
    }

    /// Engines of `tag` in fit order, counting tentative placements.
    pub fn sort_engines(&self, tag: usize, pending: &[Placement]) -> Vec<usize> {
        let loads: Vec<(usize, f64)> =
            self.arch.engines_with_tag(tag).map(|e| (e.id, self.engine_util(e.id, pending))).collect();
        order_engines(&loads, self.combo.fit)
    }

    /// Every non-null tagged task on a single engine, scarcest tag first.
    /// `tagged` is indexed by architecture tag.
    pub fn feasible_sequential(&self, tagged: &[TaggedTask]) -> Result<Vec<Placement>, String> {
        let mut pending = Vec::new();
        for &tag in self.arch.tag_order() {
            let t = &tagged[tag];
            if t.is_empty() {
                continue;
            }
            let e = self
                .sort_engines(tag, &pending)
                .into_iter()
                .find(|&e| self.fits(e, &pending, t))
                .ok_or_else(|| format!("sequential: no {} engine fits", self.arch.tags()[tag].name))?;
            pending.push((e, t.clone()));
        }
        Ok(pending)
    }

    /// Splits tagged tasks over engines of their tag: on each engine,
    /// sub-tasks are omitted until the rest fits; the omitted ones spill to
    /// the next engine. Fails unless every sub-task is placed.
    pub fn parallelize(&mut self, c: &ConcreteTask, tagged: &[TaggedTask]) -> Result<Vec<Placement>, String> {
        let critical = match self.combo.omit {
            Omit::Parallel => critical_set(c),
            Omit::Random => FixedBitSet::with_capacity(c.dag.len()),
        };
        let mut pending: Vec<Placement> = Vec::new();
        for &tag in self.arch.tag_order() {
            let name = &self.arch.tags()[tag].name;
            let mut current = tagged[tag].clone();
            if current.is_empty() {
                continue;
            }
            for e in self.sort_engines(tag, &pending) {
                let mut cand = current.clone();
                let mut omitted = FixedBitSet::with_capacity(c.dag.len());
                while !cand.is_empty() && !self.fits(e, &pending, &cand) {
                    let v = select_omit(&cand, self.combo.omit, &critical, &mut self.rng)
                        .map_err(|err| format!("parallelize: {name}: {err}"))?;
                    cand.active.set(v, false);
                    omitted.insert(v);
                }
                if !cand.is_empty() {
                    pending.push((e, cand));
                    current = current.with_active(omitted);
                    if current.is_empty() {
                        break;
                    }
                }
            }
            if !current.is_empty() {
                return Err(format!(
                    "parallelize: {name} engines exhausted, {} sub-tasks left",
                    current.active.count_ones(..)
                ));
            }
        }
        Ok(pending)
    }

    fn commit(&mut self, placements: Vec<Placement>) {
        let mut touched: Vec<usize> = placements.iter().map(|p| p.0).collect();
        for (e, t) in placements {
            self.engines[e].push(t);
        }
        touched.sort_unstable();
        touched.dedup();
        for e in touched {
            self.util[e] = analysis::workload_utilization(&self.engines[e], self.ppm(e), self.combo.preemption)
                .expect("allocated tasks are timed");
        }
    }

    /// Tries candidates `0..n` in the given order, first sequentially, then
    /// with parallelization. Commits the first success.
    fn try_candidates(
        &mut self,
        spec: TaskId,
        order: &[usize],
        mut build: impl FnMut(usize) -> ConcreteTask,
    ) -> Result<Arc<ConcreteTask>, SpecFailure> {
        self.scratch.borrow_mut().clear();
        let mut failures = Vec::new();
        let mut cache: Vec<Option<Prepared>> = vec![None; order.len()];
        for pass in [Pass::Sequential, Pass::Parallel] {
            for (slot, &i) in order.iter().enumerate() {
                if cache[slot].is_none() {
                    let c = build(i);
                    cache[slot] = Some(match timing::assign_deadlines_offsets(&c, self.combo.slack) {
                        Ok(timed) => {
                            let timed = Arc::new(timed);
                            let tagged = tagged_tasks(&timed, self.arch);
                            Some((timed, tagged))
                        }
                        Err(e) => {
                            failures.push(CandidateFailure { concrete: c.id, reason: e.to_string() });
                            None
                        }
                    });
                }
                let Some(Some((c, tagged))) = &cache[slot] else { continue };
                let (c, tagged) = (c.clone(), tagged.clone());
                let attempt = match pass {
                    Pass::Sequential => self.feasible_sequential(&tagged),
                    Pass::Parallel => self.parallelize(&c, &tagged),
                };
                match attempt {
                    Ok(p) => {
                        self.commit(p);
                        return Ok(c);
                    }
                    Err(reason) => failures.push(CandidateFailure { concrete: c.id, reason }),
                }
            }
        }
        Err(SpecFailure { spec, candidates: failures })
    }

    /// Allocates one specification task.
    pub fn allocate_spec(&mut self, spec: &SpecTask) -> Result<Arc<ConcreteTask>, SpecFailure> {
        let fail = |reason: String| SpecFailure {
            spec: spec.id,
            candidates: vec![CandidateFailure { concrete: ConcreteId { spec: spec.id, index: 0 }, reason }],
        };
        let dag = spec.dag().map_err(|e| fail(e.to_string()))?;
        if dag.subtask_indices().next().is_none() {
            return Err(fail("no sub-tasks".into()));
        }
        let mut sels: Vec<Selection> = Selections::new(&dag, ControlKind::Alternative)
            .map_err(|e| fail(e.to_string()))?
            .take(OMEGA_CAP + 1)
            .collect();
        if sels.len() > OMEGA_CAP {
            sels.truncate(OMEGA_CAP);
            self.capped.push(spec.id);
        }
        let order = self.candidate_order(&dag, &sels);
        self.try_candidates(spec.id, &order, |i| concrete_from_selection(spec, &dag, &sels[i], i as u32))
    }

    fn candidate_order(&self, dag: &crate::graph::Dag, sels: &[Selection]) -> Vec<usize> {
        let mut keys: Vec<(Vec<u64>, usize)> = sels
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let key = match self.combo.order {
                    CandidateOrder::Total => vec![s.total_wcet(dag)],
                    CandidateOrder::Scarce => {
                        let loads = s.tag_loads(dag, self.arch);
                        self.arch.tag_order().iter().map(|&t| loads[t]).collect()
                    }
                };
                (key, i)
            })
            .collect();
        keys.sort();
        keys.into_iter().map(|k| k.1).collect()
    }

    /// Allocates an already fixed concrete task (cp-DAG baseline).
    pub fn allocate_concrete(&mut self, c: &ConcreteTask) -> Result<Arc<ConcreteTask>, SpecFailure> {
        self.try_candidates(c.id.spec, &[0], |_| c.clone())
    }
}

/// Outcome of allocating a whole task set.
#[derive(Debug, Clone)]
pub struct Allocation {
    pub combo: HeuristicCombo,
    /// Committed workload per engine (partial when the run failed).
    pub engines: Vec<Vec<TaggedTask>>,
    /// Inflated utilization per engine.
    pub utilization: Vec<f64>,
    /// Concrete task chosen for each allocated specification, in input order.
    pub accepted: Vec<Arc<ConcreteTask>>,
    pub failure: Option<SpecFailure>,
    /// Specifications whose Ω was cut at [`OMEGA_CAP`].
    pub capped: Vec<TaskId>,
}

impl Allocation {
    pub fn is_success(&self) -> bool {
        self.failure.is_none()
    }

    pub fn omega_cap_exceeded(&self) -> bool {
        !self.capped.is_empty()
    }
}

fn finish(alloc: Allocator<'_>, accepted: Vec<Arc<ConcreteTask>>, failure: Option<SpecFailure>) -> Allocation {
    let combo = alloc.combo;
    let utilization = alloc.util.clone();
    let capped = alloc.capped.clone();
    Allocation { combo, engines: alloc.into_workloads(), utilization, accepted, failure, capped }
}

/// Allocates specifications in order; stops at the first one that cannot
/// be placed.
pub fn allocate_taskset(specs: &[SpecTask], arch: &Architecture, combo: HeuristicCombo, seed: u64) -> Allocation {
    let mut alloc = Allocator::new(arch, combo, seed);
    let mut accepted = Vec::new();
    for spec in specs {
        match alloc.allocate_spec(spec) {
            Ok(c) => accepted.push(c),
            Err(f) => return finish(alloc, accepted, Some(f)),
        }
    }
    finish(alloc, accepted, None)
}

/// Same as [`allocate_taskset`] for fixed concrete tasks.
pub fn allocate_concrete_set(
    tasks: &[ConcreteTask],
    arch: &Architecture,
    combo: HeuristicCombo,
    seed: u64,
) -> Allocation {
    let mut alloc = Allocator::new(arch, combo, seed);
    let mut accepted = Vec::new();
    for c in tasks {
        match alloc.allocate_concrete(c) {
            Ok(c) => accepted.push(c),
            Err(f) => return finish(alloc, accepted, Some(f)),
        }
    }
    finish(alloc, accepted, None)
}

/// Re-checks every engine of an allocation under its preemption mode.
pub fn verify(alloc: &Allocation, arch: &Architecture) -> bool {
    alloc.engines.iter().enumerate().all(|(e, items)| {
        let ppm = arch.tags()[arch.engines()[e].tag].preemption_ppm();
        analysis::engine_feasible(items, ppm, alloc.combo.preemption).unwrap_or(false)
    })
}
