//! Offset-aware demand bound functions, the single-engine EDF test and
//! preemption-cost inflation.
//!
//! A tagged task's demand is periodic after two periods: for `t ≥ 2T`,
//! `dbf(t) = dbf(t - T) + C` per conditional scenario. Each scenario is
//! therefore tabulated once on `[0, 2T)` and extended analytically.

use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use crate::model::{TaggedTask, Ticks, TimingAbsent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreemptionMode {
    /// Preemption costs ignored.
    None,
    /// Every sub-task pays the largest cost among co-located sub-tasks with a
    /// larger relative deadline.
    Max,
    /// Only the earliest-deadline member of the maximal sequential subset and
    /// sub-tasks with a null predecessor pay, and only for foreign sub-tasks.
    Reduced,
}

/// Per-item WCET inflation, `extra[item][dag index]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreemptionContext {
    pub mode: PreemptionMode,
    pub extra: Vec<Vec<Ticks>>,
}

impl PreemptionContext {
    pub fn none(items: &[TaggedTask]) -> Self {
        Self { mode: PreemptionMode::None, extra: items.iter().map(|t| vec![0; t.dag().len()]).collect() }
    }

    pub fn total(&self) -> Ticks {
        self.extra.iter().flatten().sum()
    }
}

/// Cost of preempting a sub-task of WCET `wcet` on an engine whose
/// preemption factor is `ppm` parts per million: zero below one tick,
/// rounded up otherwise.
pub fn preemption_cost(ppm: u64, wcet: Ticks) -> Ticks {
    let prod = ppm as u128 * wcet as u128;
    if prod < 1_000_000 {
        0
    } else {
        prod.div_ceil(1_000_000) as Ticks
    }
}

/// (item, dag index, relative deadline, pc) for every active sub-task.
fn cost_table(items: &[TaggedTask], ppm: u64) -> Result<Vec<(usize, usize, Ticks, Ticks)>, TimingAbsent> {
    let mut rows = Vec::new();
    for (i, t) in items.iter().enumerate() {
        let timing = t.timing()?;
        for ix in t.active_indices() {
            rows.push((i, ix, timing.deadline[ix], preemption_cost(ppm, t.wcet(ix))));
        }
    }
    Ok(rows)
}

/// `pc^i = max{pc(w) : D(w) > D(v_i)}` over every co-located sub-task.
pub fn inflate_max(items: &[TaggedTask], ppm: u64) -> Result<PreemptionContext, TimingAbsent> {
    let mut rows = cost_table(items, ppm)?;
    let mut ctx = PreemptionContext::none(items);
    ctx.mode = PreemptionMode::Max;
    rows.sort_by_key(|r| std::cmp::Reverse(r.2));
    // Scan by decreasing deadline; `best` covers strictly larger deadlines.
    let mut best = 0;
    let mut k = 0;
    while k < rows.len() {
        let d = rows[k].2;
        let end = k + rows[k..].iter().take_while(|r| r.2 == d).count();
        for r in &rows[k..end] {
            ctx.extra[r.0][r.1] = best;
        }
        best = best.max(rows[k..end].iter().map(|r| r.3).max().unwrap_or(0));
        k = end;
    }
    Ok(ctx)
}

/// Maximal sequential subset of a tagged task (or fragment): the active
/// sub-tasks none of whose sub-task predecessors is null, plus the member
/// with the smallest local deadline (smallest id on ties).
pub fn maximal_sequential_subset(t: &TaggedTask) -> Result<(Vec<usize>, Option<usize>), TimingAbsent> {
    let timing = t.timing()?;
    let dag = t.dag();
    let members: Vec<usize> =
        t.active_indices().filter(|&ix| dag.subtask_preds(ix).iter().all(|&p| !t.is_null(p))).collect();
    let head = members.iter().copied().min_by_key(|&ix| (timing.local_deadline(ix), ix));
    Ok((members, head))
}

/// Reduced inflation: `v^M` and sub-tasks with a null predecessor pay the
/// largest cost among sub-tasks of the other items with a larger relative
/// deadline; everything else pays nothing.
pub fn inflate_reduced(items: &[TaggedTask], ppm: u64) -> Result<PreemptionContext, TimingAbsent> {
    let rows = cost_table(items, ppm)?;
    let mut ctx = PreemptionContext::none(items);
    ctx.mode = PreemptionMode::Reduced;
    for (i, t) in items.iter().enumerate() {
        let (members, head) = maximal_sequential_subset(t)?;
        let timing = t.timing()?;
        for ix in t.active_indices() {
            let pays = head == Some(ix) || members.binary_search(&ix).is_err();
            if !pays {
                continue;
            }
            let d = timing.deadline[ix];
            ctx.extra[i][ix] = rows.iter().filter(|r| r.0 != i && r.2 > d).map(|r| r.3).max().unwrap_or(0);
        }
    }
    Ok(ctx)
}

pub fn inflate(items: &[TaggedTask], ppm: u64, mode: PreemptionMode) -> Result<PreemptionContext, TimingAbsent> {
    match mode {
        PreemptionMode::None => Ok(PreemptionContext::none(items)),
        PreemptionMode::Max => inflate_max(items, ppm),
        PreemptionMode::Reduced => inflate_reduced(items, ppm),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Job {
    offset: Ticks,
    deadline: Ticks,
    wcet: Ticks,
}

/// Demand of one conditional scenario, tabulated on `[0, 2T)`.
#[derive(Debug, Clone, PartialEq, Eq)]
struct ScenarioTable {
    /// Abscissae where the envelope over reference sub-tasks increases.
    points: Vec<Ticks>,
    values: Vec<Ticks>,
    /// Demand added per period once `t ≥ 2T`.
    per_period: Ticks,
}

impl ScenarioTable {
    fn new(jobs: &[Job], period: Ticks) -> Self {
        let horizon = 2 * period;
        let mut per_ref: Vec<Vec<(Ticks, Ticks)>> = Vec::with_capacity(jobs.len());
        let mut all_points = Vec::new();
        for r in jobs {
            let mut steps = Vec::new();
            for j in jobs {
                let rel = (j.offset + period - r.offset % period) % period;
                let mut a = rel + j.deadline;
                while a < horizon {
                    steps.push((a, j.wcet));
                    a += period;
                }
            }
            steps.sort_unstable();
            let mut cum: Vec<(Ticks, Ticks)> = Vec::with_capacity(steps.len());
            let mut acc = 0;
            for (a, c) in steps {
                acc += c;
                match cum.last_mut() {
                    Some(last) if last.0 == a => last.1 = acc,
                    _ => cum.push((a, acc)),
                }
            }
            all_points.extend(cum.iter().map(|s| s.0));
            per_ref.push(cum);
        }
        all_points.sort_unstable();
        all_points.dedup();
        let mut cursor = vec![0usize; per_ref.len()];
        let mut points = Vec::new();
        let mut values: Vec<Ticks> = Vec::new();
        for &p in &all_points {
            let mut env = 0;
            for (r, cum) in per_ref.iter().enumerate() {
                while cursor[r] < cum.len() && cum[cursor[r]].0 <= p {
                    cursor[r] += 1;
                }
                if cursor[r] > 0 {
                    env = env.max(cum[cursor[r] - 1].1);
                }
            }
            if env > values.last().copied().unwrap_or(0) {
                points.push(p);
                values.push(env);
            }
        }
        Self { points, values, per_period: jobs.iter().map(|j| j.wcet).sum() }
    }

    fn eval(&self, t: Ticks, period: Ticks) -> Ticks {
        if t >= 2 * period {
            let k = t / period - 1;
            return self.eval(t - k * period, period) + k * self.per_period;
        }
        match self.points.partition_point(|&p| p <= t) {
            0 => 0,
            n => self.values[n - 1],
        }
    }
}

/// Demand bound function of one tagged task, maximized over its
/// conditional scenarios.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemandCurve {
    pub period: Ticks,
    tables: Vec<ScenarioTable>,
    /// Sorted union of all table points.
    points: Vec<Ticks>,
    /// Candidate points in `[T, 2T)`; later steps are these shifted by whole
    /// periods.
    tail: Vec<Ticks>,
    /// Largest per-scenario demand per period.
    pub max_wcet: Ticks,
}

impl DemandCurve {
    /// `extra` is indexed like the task's DAG and added to active sub-tasks.
    pub fn new(t: &TaggedTask, extra: Option<&[Ticks]>) -> Result<Self, TimingAbsent> {
        let timing = t.timing()?;
        let period = t.period();
        let job = |ix: usize| Job {
            offset: timing.offset[ix],
            deadline: timing.deadline[ix],
            wcet: t.wcet(ix) + extra.map_or(0, |e| e[ix]),
        };
        let tables: Vec<ScenarioTable> = job_sets(t)
            .iter()
            .map(|set| ScenarioTable::new(&set.iter().map(|&ix| job(ix)).collect::<Vec<_>>(), period))
            .collect();
        let mut points: Vec<Ticks> = tables.iter().flat_map(|s| s.points.iter().copied()).collect();
        points.sort_unstable();
        points.dedup();
        // `T` is kept as a candidate so that a step landing on a multiple of
        // the period is never missed by the periodic extension.
        let mut tail: Vec<Ticks> = points.iter().copied().filter(|&p| p > period).collect();
        if !points.is_empty() {
            tail.insert(0, period);
        }
        let max_wcet = tables.iter().map(|s| s.per_period).max().unwrap_or(0);
        Ok(Self { period, tables, points, tail, max_wcet })
    }

    pub fn eval(&self, t: Ticks) -> Ticks {
        self.tables.iter().map(|s| s.eval(t, self.period)).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.points.is_empty()
    }

    /// Largest step abscissa strictly below `t`.
    pub fn point_below(&self, t: Ticks) -> Option<Ticks> {
        let p = self.period;
        if t <= 2 * p {
            let n = self.points.partition_point(|&x| x < t);
            return n.checked_sub(1).map(|i| self.points[i]);
        }
        let k = (t - p - 1) / p;
        let local = t - k * p;
        match self.tail.partition_point(|&x| x < local) {
            0 => self.tail.last().map(|&x| x + (k - 1) * p),
            n => Some(self.tail[n - 1] + k * p),
        }
    }

    /// Smallest step abscissa.
    pub fn first_point(&self) -> Option<Ticks> {
        self.points.first().copied()
    }

    /// Step abscissae (where the demand increases) in `(0, limit]`.
    pub fn points_up_to(&self, limit: Ticks) -> Vec<Ticks> {
        let mut out: Vec<Ticks> = self.points.iter().copied().filter(|&x| x < self.period && x <= limit).collect();
        let mut k = 0;
        'outer: loop {
            for &x in &self.tail {
                let v = x + k * self.period;
                if v > limit {
                    break 'outer;
                }
                if self.eval(v) > self.eval(v - 1) {
                    out.push(v);
                }
            }
            if self.tail.is_empty() {
                break;
            }
            k += 1;
        }
        out
    }
}

/// Non-null job sets of each conditional scenario, deduplicated with
/// subsets dropped (a subset never has the larger demand).
fn job_sets(t: &TaggedTask) -> Vec<Vec<usize>> {
    let scenarios = t.parent.scenarios();
    let mut seen = std::collections::HashSet::new();
    let mut sets: Vec<(usize, fixedbitset::FixedBitSet)> = Vec::new();
    for s in &scenarios.sets {
        let mut s = s.clone();
        s.intersect_with(&t.active);
        if !s.is_clear() && seen.insert(s.as_slice().to_vec()) {
            sets.push((s.count_ones(..), s));
        }
    }
    sets.sort_by_key(|s| std::cmp::Reverse(s.0));
    let mut kept: Vec<fixedbitset::FixedBitSet> = Vec::new();
    for (_, s) in sets {
        if !kept.iter().any(|k| s.is_subset(k)) {
            kept.push(s);
        }
    }
    kept.into_iter().map(|s| s.ones().collect()).collect()
}

/// Demand of `t` in any window of length `horizon`.
pub fn dbf_task(t: &TaggedTask, horizon: Ticks) -> Result<Ticks, TimingAbsent> {
    Ok(DemandCurve::new(t, None)?.eval(horizon))
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Least common multiple of `periods`, `None` on overflow.
pub fn hyperperiod(periods: impl IntoIterator<Item = Ticks>) -> Option<Ticks> {
    let mut h: u128 = 1;
    for p in periods {
        let p = p as u128;
        h = h / gcd(h, p) * p;
        if h > Ticks::MAX as u128 / 4 {
            return None;
        }
    }
    Some(h as Ticks)
}

/// `Σ C_i / T_i ≤ 1`, evaluated exactly.
fn utilization_at_most_one<C: Borrow<DemandCurve>>(curves: &[C]) -> bool {
    let Some(h) = hyperperiod(curves.iter().map(|c| c.borrow().period)) else {
        return utilization(curves) <= 1.0;
    };
    let mut total: u128 = 0;
    for c in curves {
        let c = c.borrow();
        total += c.max_wcet as u128 * (h / c.period) as u128;
    }
    total <= h as u128
}

/// `H + 2·max T` over the non-empty curves.
pub fn analysis_horizon<C: Borrow<DemandCurve>>(curves: &[C]) -> Option<Ticks> {
    let h = hyperperiod(curves.iter().map(|c| c.borrow().period))?;
    let max_t = curves.iter().map(|c| c.borrow().period).max().unwrap_or(0);
    Some(h + 2 * max_t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineVerdict {
    pub feasible: bool,
    /// Inflated utilization of the workload.
    pub utilization: f64,
    /// First interval length found with demand above supply.
    pub violation: Option<Ticks>,
    pub horizon: Option<Ticks>,
}

fn curves_for(items: &[TaggedTask], ctx: &PreemptionContext) -> Result<Vec<DemandCurve>, TimingAbsent> {
    let mut out = Vec::with_capacity(items.len());
    for (t, extra) in items.iter().zip(&ctx.extra) {
        let c = DemandCurve::new(t, Some(extra))?;
        if !c.is_zero() {
            out.push(c);
        }
    }
    Ok(out)
}

pub fn utilization<C: Borrow<DemandCurve>>(curves: &[C]) -> f64 {
    curves.iter().map(|c| c.borrow()).map(|c| c.max_wcet as f64 / c.period as f64).sum()
}

/// Processor-demand test on precomputed curves.
///
/// Scans backwards from the horizon: at each point the demand either
/// exceeds supply (infeasible), or the scan jumps to the demand value (no
/// violation can lie in between) or to the previous step.
pub fn check_curves<C: Borrow<DemandCurve>>(curves: &[C]) -> EngineVerdict {
    let u = utilization(curves);
    if curves.is_empty() {
        return EngineVerdict { feasible: true, utilization: 0.0, violation: None, horizon: None };
    }
    let horizon = analysis_horizon(curves);
    if !utilization_at_most_one(curves) {
        return EngineVerdict { feasible: false, utilization: u, violation: None, horizon };
    }
    let Some(limit) = horizon else {
        return EngineVerdict { feasible: false, utilization: u, violation: None, horizon };
    };
    let demand = |t: Ticks| curves.iter().map(|c| c.borrow().eval(t)).sum::<Ticks>();
    let below = |t: Ticks| curves.iter().filter_map(|c| c.borrow().point_below(t)).max();
    let d_min = curves.iter().filter_map(|c| c.borrow().first_point()).min().unwrap_or(0);
    let mut t = match below(limit + 1) {
        Some(t) => t,
        None => return EngineVerdict { feasible: true, utilization: u, violation: None, horizon },
    };
    loop {
        let h = demand(t);
        if h > t {
            return EngineVerdict { feasible: false, utilization: u, violation: Some(t), horizon };
        }
        if h <= d_min {
            return EngineVerdict { feasible: true, utilization: u, violation: None, horizon };
        }
        t = if h < t {
            h
        } else {
            match below(t) {
                Some(p) => p,
                None => return EngineVerdict { feasible: true, utilization: u, violation: None, horizon },
            }
        };
    }
}

/// EDF feasibility of `items` on one engine with preemption factor `ppm`.
pub fn engine_check(items: &[TaggedTask], ppm: u64, mode: PreemptionMode) -> Result<EngineVerdict, TimingAbsent> {
    let ctx = inflate(items, ppm, mode)?;
    Ok(check_curves(&curves_for(items, &ctx)?))
}

pub fn engine_feasible(items: &[TaggedTask], ppm: u64, mode: PreemptionMode) -> Result<bool, TimingAbsent> {
    Ok(engine_check(items, ppm, mode)?.feasible)
}

pub fn engine_feasible_with(items: &[TaggedTask], ctx: &PreemptionContext) -> Result<bool, TimingAbsent> {
    Ok(check_curves(&curves_for(items, ctx)?).feasible)
}

/// Every step abscissa of the workload in `(0, t*]`, plus `t*`.
pub fn test_points(items: &[TaggedTask], ctx: &PreemptionContext) -> Result<Vec<Ticks>, TimingAbsent> {
    let curves = curves_for(items, ctx)?;
    let Some(limit) = analysis_horizon(&curves).filter(|_| !curves.is_empty()) else {
        return Ok(Vec::new());
    };
    let mut pts: Vec<Ticks> = curves.iter().flat_map(|c| c.points_up_to(limit)).collect();
    pts.push(limit);
    pts.sort_unstable();
    pts.dedup();
    Ok(pts)
}

/// Reference check: evaluates the demand at every test point.
pub fn engine_feasible_exhaustive(items: &[TaggedTask], ctx: &PreemptionContext) -> Result<bool, TimingAbsent> {
    let curves = curves_for(items, ctx)?;
    if !curves.is_empty() && !utilization_at_most_one(&curves) {
        return Ok(false);
    }
    let pts = test_points(items, ctx)?;
    Ok(pts.iter().all(|&t| curves.iter().map(|c| c.eval(t)).sum::<Ticks>() <= t))
}

/// Inflated utilization of an engine workload.
pub fn workload_utilization(items: &[TaggedTask], ppm: u64, mode: PreemptionMode) -> Result<f64, TimingAbsent> {
    let ctx = inflate(items, ppm, mode)?;
    Ok(utilization(&curves_for(items, &ctx)?))
}
