//! Acceptance suite. Runs every criterion at its stated size and tolerance,
//! prints one PASS/FAIL line each and exits non-zero if any failed.
//!
//! `CDAG_TRIALS` overrides the trials per sweep step (the sweep criteria
//! report FAIL below 85).

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cdag::allocation::HeuristicCombo;
use cdag::analysis::{self, PreemptionContext, PreemptionMode};
use cdag::expansion::enumerate_conditional_scenarios;
use cdag::generator::{derive_cpdag, generate_taskset, GenConfig};
use cdag::graph::Dag;
use cdag::harness::{run_sweep, Metric, SweepConfig, SweepResult, CPDAG_PREFIX};
use cdag::model::{filter_tagged_task, ConcreteId, ConcreteTask, Node, NodeId, TagInfo, TaggedTask, Ticks, Timing};
use cdag::simulator::{simulate, SimConfig};
use cdag::timing::{self, SlackMode};
use cdag::Architecture;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MIN_TRIALS: usize = 85;
const SWEEP_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(id: u32, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut out = f();
    let took = start.elapsed();
    if let Some(b) = budget {
        if took > b {
            out.pass = false;
            out.detail.push_str(&format!("; over the {} s budget", b.as_secs()));
        }
    }
    let verdict = if out.pass { "PASS" } else { "FAIL" };
    println!("criterion {id} [{verdict}] {name}: {} ({:.1} s)", out.detail, took.as_secs_f64());
    out.pass
}

// ---------------------------------------------------------------- 1: dbf

/// Random DAG over `n` sub-tasks (ids 1..=n, edges only forward), optionally
/// with one conditional node (id 100) fanning out to two later sub-tasks.
fn random_dag(rng: &mut impl Rng, n: usize, tag: &dyn Fn(&mut dyn rand::RngCore) -> &'static str, max_c: Ticks) -> Dag {
    let mut nodes: Vec<Node> =
        (1..=n as NodeId).map(|id| Node::subtask(id, tag(rng), rng.gen_range(1..=max_c))).collect();
    let mut edges = Vec::new();
    for a in 1..=n as NodeId {
        for b in a + 1..=n as NodeId {
            if rng.gen_bool(0.35) {
                edges.push((a, b));
            }
        }
    }
    if n >= 3 && rng.gen_bool(0.5) {
        let u = rng.gen_range(1..=n as NodeId - 2);
        let v1 = rng.gen_range(u + 1..n as NodeId);
        let v2 = rng.gen_range(v1 + 1..=n as NodeId);
        edges.retain(|&(a, b)| !(a == u && (b == v1 || b == v2)));
        nodes.push(Node::conditional(100));
        edges.extend([(u, 100), (100, v1), (100, v2)]);
    }
    Dag::new(nodes, &edges).unwrap()
}

/// Demand of jobs released and due inside some window of length `len`,
/// maximized over window starts and conditional scenarios.
fn brute_dbf(c: &ConcreteTask, len: Ticks) -> Ticks {
    let t = c.timing.as_ref().unwrap();
    let p = c.period;
    let mut best = 0;
    for sc in enumerate_conditional_scenarios(c) {
        let ixs: Vec<usize> = sc.nodes.iter().map(|&id| c.dag.index_of(id).unwrap()).collect();
        for &s in &ixs {
            let start = t.offset[s];
            let mut sum = 0;
            for &ix in &ixs {
                for k in 0..=len / p + 1 {
                    let r = k * p + t.offset[ix];
                    if r >= start && r + t.deadline[ix] <= start + len {
                        sum += c.dag.wcet(ix);
                    }
                }
            }
            best = best.max(sum);
        }
    }
    best
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    let mut points = 0usize;
    for i in 0..500u32 {
        let n = rng.gen_range(1..=5);
        let dag = random_dag(&mut rng, n, &|_| "CPU", 4);
        let period = rng.gen_range(4..=20);
        let mut timing = Timing { offset: vec![0; dag.len()], deadline: vec![0; dag.len()] };
        for ix in dag.subtask_indices() {
            let o = rng.gen_range(0..period);
            timing.offset[ix] = o;
            timing.deadline[ix] = rng.gen_range(1..=period - o);
        }
        let mut c = ConcreteTask::new(ConcreteId { spec: i, index: 0 }, period, period, dag, vec![]);
        c.timing = Some(timing);
        let t = filter_tagged_task(&Arc::new(c), "CPU");
        let ctx = PreemptionContext::none(std::slice::from_ref(&t));
        let mut at: BTreeSet<Ticks> =
            analysis::test_points(std::slice::from_ref(&t), &ctx).unwrap().into_iter().collect();
        at.extend(0..=6 * period);
        for h in at {
            points += 1;
            if analysis::dbf_task(&t, h).unwrap() != brute_dbf(&t.parent, h) {
                mismatches += 1;
            }
        }
    }
    Outcome { pass: mismatches == 0, detail: format!("500 tasks, {points} points, {mismatches} mismatches") }
}

// ------------------------------------------------------- 2: soundness

fn criterion_2() -> Outcome {
    let arch = Architecture::new(vec![TagInfo::new("A", 1, 0.25), TagInfo::new("B", 1, 0.0)]).unwrap();
    let periods = [4, 5, 6, 8, 10, 12, 15, 20];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut tried, mut found, mut with_cost, mut misses, mut jobs) = (0, 0, 0, 0, 0);
    while found < 300 && tried < 100_000 {
        tried += 1;
        let k = rng.gen_range(1..=4);
        let mut items: Vec<TaggedTask> = Vec::new();
        for i in 0..k {
            let n = rng.gen_range(1..=5);
            let dag = random_dag(&mut rng, n, &|r| if r.gen_bool(0.8) { "A" } else { "B" }, 6);
            let p = *periods.choose(&mut rng).unwrap();
            let c = ConcreteTask::new(ConcreteId { spec: i, index: 0 }, p, p, dag, vec![]);
            let mode = if rng.gen_bool(0.5) { SlackMode::Fair } else { SlackMode::Proportional };
            let Ok(c) = timing::assign_deadlines_offsets(&c, mode) else { continue };
            let t = filter_tagged_task(&Arc::new(c), "A");
            if !t.is_empty() {
                items.push(t);
            }
        }
        if items.is_empty() || !analysis::engine_feasible(&items, 250_000, PreemptionMode::Reduced).unwrap() {
            continue;
        }
        found += 1;
        if analysis::inflate(&items, 250_000, PreemptionMode::Reduced).unwrap().total() > 0 {
            with_cost += 1;
        }
        let workloads = vec![items, Vec::new()];
        let report = simulate(&workloads, &arch, Some(&[0]), &SimConfig::default()).unwrap();
        jobs += report.jobs;
        misses += report.misses.len();
    }
    Outcome {
        pass: found == 300 && misses == 0,
        detail: format!(
            "{found} feasible workloads ({with_cost} with preemption charges), {jobs} jobs, {misses} misses"
        ),
    }
}

// ------------------------------------------------------ 3: deadlines

/// Sub-task successors with control nodes contracted.
fn contracted_succs(dag: &Dag, ix: usize) -> Vec<usize> {
    let mut out = BTreeSet::new();
    let mut stack: Vec<usize> = dag.succ(ix).to_vec();
    while let Some(v) = stack.pop() {
        if dag.is_subtask(v) {
            out.insert(v);
        } else {
            stack.extend_from_slice(dag.succ(v));
        }
    }
    out.into_iter().collect()
}

/// Largest `Σ w` over source-to-sink sub-task paths.
fn heaviest(dag: &Dag, w: impl Fn(usize) -> Ticks) -> Ticks {
    let order = dag.topo_order().unwrap();
    let mut best = vec![0; dag.len()];
    let mut top = 0;
    for &v in order.iter().rev() {
        if !dag.is_subtask(v) {
            continue;
        }
        let tail = contracted_succs(dag, v).into_iter().map(|s| best[s]).max().unwrap_or(0);
        best[v] = w(v) + tail;
        top = top.max(best[v]);
    }
    top
}

fn criterion_3() -> Outcome {
    let arch = Architecture::xavier();
    let cfg = GenConfig::uniform(&arch, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut checked, mut infeasible, mut bad) = (0, 0, Vec::new());
    'outer: while checked < 1000 {
        for spec in generate_taskset(&cfg, &arch, &mut rng).unwrap() {
            let c = derive_cpdag(&spec, &mut rng);
            for mode in [SlackMode::Fair, SlackMode::Proportional] {
                let Ok(tc) = timing::assign_deadlines_offsets(&c, mode) else {
                    infeasible += 1;
                    continue;
                };
                let t = tc.timing.as_ref().unwrap();
                let dag = &tc.dag;
                if heaviest(dag, |v| t.deadline[v]) > tc.deadline {
                    bad.push(format!("{} path sum", tc.id));
                }
                for p in dag.subtask_indices() {
                    for v in contracted_succs(dag, p) {
                        if t.offset[v] < t.offset[p] + t.deadline[p] {
                            bad.push(format!("{} precedence", tc.id));
                        }
                    }
                }
                let cp = timing::critical_path(&tc);
                let sg = tc.subtask_graph();
                let sink = sg.members[*cp.last().unwrap()];
                let cp_wcet: Ticks = cp.iter().map(|&k| dag.wcet(sg.members[k])).sum();
                if t.local_deadline(sink) != tc.deadline || cp_wcet != heaviest(dag, |v| dag.wcet(v)) {
                    bad.push(format!("{} critical sink", tc.id));
                }
                checked += 1;
                if checked == 1000 {
                    break 'outer;
                }
            }
        }
    }
    bad.dedup();
    Outcome {
        pass: bad.is_empty(),
        detail: format!(
            "{checked} timed concrete tasks, {infeasible} with negative slack skipped, {} violations {:?}",
            bad.len(),
            &bad[..bad.len().min(3)]
        ),
    }
}

// ---------------------------------------------------------- sweeps

fn trials() -> usize {
    std::env::var("CDAG_TRIALS").ok().and_then(|v| v.parse().ok()).unwrap_or(MIN_TRIALS)
}

fn combos(names: &[&str]) -> Vec<HeuristicCombo> {
    names.iter().map(|n| n.parse().unwrap()).collect()
}

fn sweep(names: &[&str], cpdag: bool) -> (SweepResult, Duration) {
    let cfg =
        SweepConfig { trials_per_step: trials(), seed: SWEEP_SEED, cpdag, ..SweepConfig::new("xavier", combos(names)) };
    let start = Instant::now();
    let r = run_sweep(&cfg).expect("sweep runs");
    (r, start.elapsed())
}

fn fmt_col(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
}

fn all_csvs(r: &SweepResult) -> Vec<String> {
    let mut v: Vec<String> = [Metric::SchedRate, Metric::ActiveCpus, Metric::ActiveCpuUtil, Metric::ScarceUtil]
        .into_iter()
        .map(|m| r.metric_csv(m))
        .collect();
    v.push(r.trials_csv());
    v
}

fn main() {
    let mut ok = true;
    ok &= check(1, "dbf equals brute-force window demand", Some(Duration::from_secs(60)), criterion_1);
    ok &= check(2, "analysis-feasible workloads never miss in simulation", Some(Duration::from_secs(300)), criterion_2);
    ok &= check(3, "deadline and offset invariants", Some(Duration::from_secs(60)), criterion_3);

    let n = trials();
    let (a, took_a) = sweep(&["BRF-P", "BRF-P:max"], true);
    ok &= check(4, "reduced preemption analysis dominates max", None, || {
        let red = a.column(Metric::SchedRate, "BRF-P").unwrap();
        let max = a.column(Metric::SchedRate, "BRF-P:max").unwrap();
        let never_below = red.iter().zip(&max).all(|(r, m)| r >= m);
        let strict = (4..12).filter(|&s| red[s] > max[s]).count();
        let mut pass = never_below && strict >= 3 && n >= MIN_TRIALS && took_a <= Duration::from_secs(1800);
        let mut detail = format!(
            "{n} trials/step, sweep {:.0} s; reduced [{}] max [{}]; strictly greater on {strict} of steps 4-11",
            took_a.as_secs_f64(),
            fmt_col(&red),
            fmt_col(&max)
        );
        if n < MIN_TRIALS {
            pass = false;
            detail.push_str("; too few trials");
        }
        Outcome { pass, detail }
    });
    ok &= check(5, "C-DAG rate at least cp-DAG rate", None, || {
        let mut worst = Vec::new();
        for name in ["BRF-P", "BRF-P:max"] {
            let c = a.column(Metric::SchedRate, name).unwrap();
            let cp = a.column(Metric::SchedRate, &format!("{CPDAG_PREFIX}{name}")).unwrap();
            let below: Vec<usize> = (0..c.len()).filter(|&s| c[s] < cp[s]).collect();
            worst.push(format!("{name}: C-DAG [{}] cp-DAG [{}] below at {below:?}", fmt_col(&c), fmt_col(&cp)));
        }
        let pass = worst.iter().all(|w| w.ends_with("[]"));
        Outcome { pass, detail: worst.join("; ") }
    });
    let (b, took_b) = sweep(&["BRF-P", "BOF-P", "WRF-P", "WOF-P"], false);
    let mean_over = |r: &SweepResult, m: Metric, names: &[&str], steps: std::ops::Range<usize>| -> Vec<f64> {
        steps.map(|s| names.iter().map(|n| r.column(m, n).unwrap()[s]).sum::<f64>() / names.len() as f64).collect()
    };
    ok &= check(6, "best fit at least worst fit at the top four steps", None, || {
        let bf: f64 = mean_over(&b, Metric::SchedRate, &["BRF-P", "BOF-P"], 12..16).iter().sum::<f64>() / 4.0;
        let wf: f64 = mean_over(&b, Metric::SchedRate, &["WRF-P", "WOF-P"], 12..16).iter().sum::<f64>() / 4.0;
        Outcome {
            pass: bf >= wf && n >= MIN_TRIALS,
            detail: format!("{n} trials/step, sweep {:.0} s; BF mean {bf:.4}, WF mean {wf:.4}", took_b.as_secs_f64()),
        }
    });
    ok &= check(7, "scarce-first order loads scarce engines no more than total order", None, || {
        let r = mean_over(&b, Metric::ScarceUtil, &["BRF-P", "WRF-P"], 8..16);
        let o = mean_over(&b, Metric::ScarceUtil, &["BOF-P", "WOF-P"], 8..16);
        let above: Vec<usize> = (0..8).filter(|&i| r[i] > o[i]).map(|i| i + 8).collect();
        Outcome {
            pass: above.is_empty() && n >= MIN_TRIALS,
            detail: format!("steps 8-15: R [{}] O [{}]; R above O at {above:?}", fmt_col3(&r), fmt_col3(&o)),
        }
    });

    ok &= check(8, "same seed gives byte-identical CSVs", None, || {
        let (again, _) = sweep(&["BRF-P", "BRF-P:max"], true);
        let same = all_csvs(&a) == all_csvs(&again);
        Outcome { pass: same, detail: format!("{} CSV files compared", all_csvs(&a).len()) }
    });

    if !ok {
        std::process::exit(1);
    }
}

fn fmt_col3(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}
