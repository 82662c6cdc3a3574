//! Event-driven partitioned preemptive EDF.
//!
//! Each concrete task instance resolves its conditionals to one scenario.
//! A sub-task job is released once all its sub-task predecessors in the
//! scenario have completed (or at its planned offset when anticipation is
//! off) and keeps the planned absolute deadline. A job that preempts another
//! pays the preempted sub-task's preemption cost.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{hyperperiod, preemption_cost};
use crate::model::{Architecture, ConcreteId, ConcreteTask, NodeId, TaggedTask, Ticks};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalMode {
    /// Synchronous strictly periodic arrivals.
    Periodic,
    /// Inter-arrival `T + k`, `k` geometric with success probability `p`.
    Sporadic { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioMode {
    /// One run per combination of per-task scenarios when there are at most
    /// [`EXHAUSTIVE_LIMIT`] of them, random per instance otherwise.
    Exhaustive,
    Random,
}

pub const EXHAUSTIVE_LIMIT: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Arrivals happen in `[0, horizon)`; released work runs to completion.
    /// `None` means twice the hyperperiod.
    pub horizon: Option<Ticks>,
    pub arrival: ArrivalMode,
    pub scenarios: ScenarioMode,
    pub anticipate: bool,
    pub trace: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: None,
            arrival: ArrivalMode::Periodic,
            scenarios: ScenarioMode::Exhaustive,
            anticipate: true,
            trace: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("plan has {plan} engines, architecture has {arch}")]
    EngineCount { plan: usize, arch: usize },
    #[error("unknown engine {0}")]
    UnknownEngine(usize),
    #[error("task {0} has no timing")]
    Untimed(ConcreteId),
    #[error("hyperperiod overflow")]
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Miss {
    pub task: ConcreteId,
    pub subtask: NodeId,
    pub instance: u64,
    pub deadline: Ticks,
    pub finish: Ticks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceEvent {
    Release,
    Start,
    Preempt,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub time: Ticks,
    pub engine: usize,
    pub event: TraceEvent,
    pub task: String,
    pub subtask: NodeId,
    pub job: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimReport {
    pub runs: usize,
    pub jobs: usize,
    pub preemptions: usize,
    pub misses: Vec<Miss>,
    /// Completion time of every executed job, keyed by (task, sub-task,
    /// instance); filled for single runs only.
    #[serde(skip)]
    pub completions: HashMap<(ConcreteId, NodeId, u64), Ticks>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl SimReport {
    pub fn write_trace_csv(&self, w: impl Write) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.trace {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Static per-task data.
struct TaskInfo {
    task: Arc<ConcreteTask>,
    /// Engine per DAG index; `None` for sub-tasks outside the simulation.
    engine: Vec<Option<usize>>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
    scenarios: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
struct Job {
    task: usize,
    ix: usize,
    instance: u64,
    engine: Option<usize>,
    deadline: Ticks,
    remaining: Ticks,
    pending: usize,
    earliest: Ticks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    /// Virtual job (outside the simulation) completes.
    Virtual(usize),
    Release(usize),
    Arrival(usize),
}

/// Ready-queue key: deadline, then task id, sub-task id, instance.
type Key = (Ticks, ConcreteId, NodeId, u64, usize);

struct Engine {
    ready: BTreeSet<Key>,
    running: Option<Key>,
    ppm: u64,
}

struct Run<'a> {
    info: &'a [TaskInfo],
    cfg: &'a SimConfig,
    horizon: Ticks,
    fixed: Option<&'a [usize]>,
    rng: ChaCha8Rng,
    jobs: Vec<Job>,
    /// Job ids per (task, instance), indexed by DAG index.
    instances: HashMap<(usize, u64), Vec<Option<usize>>>,
    arrived: Vec<u64>,
    events: BinaryHeap<Reverse<(Ticks, Event)>>,
    engines: Vec<Engine>,
    report: SimReport,
}

impl Run<'_> {
    fn key(&self, j: usize) -> Key {
        let job = &self.jobs[j];
        let t = &self.info[job.task].task;
        (job.deadline, t.id, t.dag.node(job.ix).id, job.instance, j)
    }

    fn trace(&mut self, time: Ticks, engine: usize, event: TraceEvent, j: usize) {
        if self.cfg.trace {
            let job = &self.jobs[j];
            let t = &self.info[job.task].task;
            self.report.trace.push(TraceRow {
                time,
                engine,
                event,
                task: t.id.to_string(),
                subtask: t.dag.node(job.ix).id,
                job: job.instance,
            });
        }
    }

    fn arrive(&mut self, now: Ticks, task: usize, instance: u64) {
        let info = &self.info[task];
        let scen = match self.fixed {
            Some(f) => f[task],
            None => self.rng.gen_range(0..info.scenarios.len()),
        };
        let members = &info.scenarios[scen];
        let timing = info.task.timing.as_ref().expect("checked before the run");
        let n = info.task.dag.len();
        let mut ids = vec![None; n];
        let mut in_scen = vec![false; n];
        for &ix in members {
            in_scen[ix] = true;
        }
        for &ix in members {
            let pending = info.preds[ix].iter().filter(|&&p| in_scen[p]).count();
            let id = self.jobs.len();
            self.jobs.push(Job {
                task,
                ix,
                instance,
                engine: info.engine[ix],
                deadline: now + timing.local_deadline(ix),
                remaining: info.task.dag.wcet(ix),
                pending,
                earliest: now + timing.offset[ix],
            });
            ids[ix] = Some(id);
        }
        self.instances.insert((task, instance), ids);
        for &ix in members {
            let id = self.instances[&(task, instance)][ix].expect("just created");
            if self.jobs[id].engine.is_none() {
                // Foreign sub-task: completes at its planned local deadline.
                self.events.push(Reverse((self.jobs[id].deadline, Event::Virtual(id))));
            } else if self.jobs[id].pending == 0 {
                self.ready_at(now, id);
            }
        }
        let next = now
            + info.task.period
            + match self.cfg.arrival {
                ArrivalMode::Periodic => 0,
                ArrivalMode::Sporadic { p } => {
                    let mut k = 0;
                    while k < info.task.period && !self.rng.gen_bool(p.clamp(1e-6, 1.0)) {
                        k += 1;
                    }
                    k
                }
            };
        if next < self.horizon {
            self.events.push(Reverse((next, Event::Arrival(task))));
        }
    }

    /// Predecessors done at `now`: release now, or at the planned offset.
    fn ready_at(&mut self, now: Ticks, j: usize) {
        let at = if self.cfg.anticipate { now } else { now.max(self.jobs[j].earliest) };
        if at > now {
            self.events.push(Reverse((at, Event::Release(j))));
        } else {
            self.release(now, j);
        }
    }

    fn release(&mut self, now: Ticks, j: usize) {
        let e = self.jobs[j].engine.expect("real job");
        let key = self.key(j);
        self.engines[e].ready.insert(key);
        self.report.jobs += 1;
        self.trace(now, e, TraceEvent::Release, j);
    }

    fn complete(&mut self, now: Ticks, j: usize) {
        let (task, ix, instance) = (self.jobs[j].task, self.jobs[j].ix, self.jobs[j].instance);
        let info = &self.info[task];
        if let Some(e) = self.jobs[j].engine {
            self.trace(now, e, TraceEvent::Complete, j);
            let id = (info.task.id, info.task.dag.node(ix).id, instance);
            if self.fixed.is_some() || self.cfg.scenarios == ScenarioMode::Random {
                self.report.completions.insert(id, now);
            }
            if now > self.jobs[j].deadline {
                self.report.misses.push(Miss {
                    task: id.0,
                    subtask: id.1,
                    instance,
                    deadline: self.jobs[j].deadline,
                    finish: now,
                });
            }
        }
        let ids = self.instances[&(task, instance)].clone();
        for &s in &info.succs[ix] {
            let Some(sj) = ids[s] else { continue };
            self.jobs[sj].pending -= 1;
            if self.jobs[sj].pending == 0 && self.jobs[sj].engine.is_some() {
                self.ready_at(now, sj);
            }
        }
    }

    fn dispatch(&mut self, now: Ticks) {
        for e in 0..self.engines.len() {
            let Some(&head) = self.engines[e].ready.first() else { continue };
            match self.engines[e].running {
                None => {
                    self.engines[e].ready.remove(&head);
                    self.engines[e].running = Some(head);
                    self.trace(now, e, TraceEvent::Start, head.4);
                }
                Some(run) if head.0 < run.0 => {
                    self.engines[e].ready.remove(&head);
                    self.engines[e].ready.insert(run);
                    self.engines[e].running = Some(head);
                    let cost = preemption_cost(
                        self.engines[e].ppm,
                        self.info[self.jobs[run.4].task].task.dag.wcet(self.jobs[run.4].ix),
                    );
                    self.jobs[head.4].remaining += cost;
                    self.report.preemptions += 1;
                    self.trace(now, e, TraceEvent::Preempt, run.4);
                    self.trace(now, e, TraceEvent::Start, head.4);
                }
                Some(_) => {}
            }
        }
    }

    fn go(mut self) -> SimReport {
        for t in 0..self.info.len() {
            self.events.push(Reverse((0, Event::Arrival(t))));
        }
        let mut now: Ticks = 0;
        loop {
            let next_event = self.events.peek().map(|r| r.0 .0);
            let next_done = self.engines.iter().filter_map(|e| e.running.map(|k| now + self.jobs[k.4].remaining)).min();
            let next = match (next_event, next_done) {
                (None, None) => break,
                (a, b) => a.into_iter().chain(b).min().expect("one is set"),
            };
            let dt = next - now;
            for e in 0..self.engines.len() {
                if let Some(k) = self.engines[e].running {
                    self.jobs[k.4].remaining -= dt;
                }
            }
            now = next;
            for e in 0..self.engines.len() {
                if let Some(k) = self.engines[e].running {
                    if self.jobs[k.4].remaining == 0 {
                        self.engines[e].running = None;
                        self.complete(now, k.4);
                    }
                }
            }
            while let Some(&Reverse((t, ev))) = self.events.peek() {
                if t != now {
                    break;
                }
                self.events.pop();
                match ev {
                    Event::Virtual(j) => self.complete(now, j),
                    Event::Release(j) => self.release(now, j),
                    Event::Arrival(task) => {
                        let inst = self.arrived[task];
                        self.arrived[task] += 1;
                        self.arrive(now, task, inst);
                    }
                }
            }
            self.dispatch(now);
        }
        self.report.runs = 1;
        self.report
    }
}

/// Simulates the committed workloads. `only` restricts execution to a set
/// of engines; sub-tasks placed elsewhere complete at their local deadline.
pub fn simulate(
    workloads: &[Vec<TaggedTask>],
    arch: &Architecture,
    only: Option<&[usize]>,
    cfg: &SimConfig,
) -> Result<SimReport, SimError> {
    if workloads.len() != arch.engines().len() {
        return Err(SimError::EngineCount { plan: workloads.len(), arch: arch.engines().len() });
    }
    if let Some(o) = only {
        if let Some(&bad) = o.iter().find(|&&e| e >= workloads.len()) {
            return Err(SimError::UnknownEngine(bad));
        }
    }
    let mut by_task: Vec<TaskInfo> = Vec::new();
    let mut index: HashMap<ConcreteId, usize> = HashMap::new();
    for (e, items) in workloads.iter().enumerate() {
        let simulated = only.is_none_or(|o| o.contains(&e));
        for t in items {
            let k = *index.entry(t.parent.id).or_insert_with(|| {
                let c = t.parent.clone();
                let n = c.dag.len();
                let preds = (0..n).map(|ix| c.dag.subtask_preds(ix)).collect();
                let succs = (0..n).map(|ix| c.dag.subtask_succs(ix)).collect();
                let scenarios = c.scenarios().sets.iter().map(|s| s.ones().collect()).collect();
                by_task.push(TaskInfo { task: c, engine: vec![None; n], preds, succs, scenarios });
                by_task.len() - 1
            });
            if simulated {
                for ix in t.active_indices() {
                    by_task[k].engine[ix] = Some(e);
                }
            }
        }
    }
    for i in &by_task {
        if i.task.timing.is_none() {
            return Err(SimError::Untimed(i.task.id));
        }
    }
    // Tasks with nothing to execute here cannot cause misses.
    by_task.retain(|i| i.engine.iter().any(Option::is_some));

    let horizon = match cfg.horizon {
        Some(h) => h,
        None => 2 * hyperperiod(by_task.iter().map(|i| i.task.period)).ok_or(SimError::Horizon)?,
    };
    let engines = || -> Vec<Engine> {
        arch.engines()
            .iter()
            .map(|e| Engine { ready: BTreeSet::new(), running: None, ppm: arch.tags()[e.tag].preemption_ppm() })
            .collect()
    };
    let run = |fixed: Option<&[usize]>, seed: u64| {
        Run {
            info: &by_task,
            cfg,
            horizon,
            fixed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            jobs: Vec::new(),
            instances: HashMap::new(),
            arrived: vec![0; by_task.len()],
            events: BinaryHeap::new(),
            engines: engines(),
            report: SimReport::default(),
        }
        .go()
    };

    let counts: Vec<usize> = by_task.iter().map(|i| i.scenarios.len()).collect();
    let combos = counts.iter().try_fold(1usize, |acc, &c| acc.checked_mul(c).filter(|&p| p <= EXHAUSTIVE_LIMIT));
    match (cfg.scenarios, combos) {
        (ScenarioMode::Exhaustive, Some(total)) => {
            let mut merged = SimReport::default();
            let mut choice = vec![0usize; counts.len()];
            for r in 0..total {
                let rep = run(Some(&choice), cfg.seed.wrapping_add(r as u64));
                merged.runs += 1;
                merged.jobs += rep.jobs;
                merged.preemptions += rep.preemptions;
                merged.misses.extend(rep.misses);
                merged.trace.extend(rep.trace);
                if total == 1 {
                    merged.completions = rep.completions;
                }
                for (c, &n) in choice.iter_mut().zip(&counts) {
                    *c += 1;
                    if *c < n {
                        break;
                    }
                    *c = 0;
                }
            }
            Ok(merged)
        }
        _ => Ok(run(None, cfg.seed)),
    }
}
