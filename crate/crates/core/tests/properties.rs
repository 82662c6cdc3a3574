//! Cross-module invariants checked on generated task sets.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::sync::Arc;

use cdag::allocation::{allocate_concrete_set, allocate_taskset, verify, Allocator, HeuristicCombo};
use cdag::analysis::PreemptionMode;
use cdag::expansion::{compare_total, generate_concrete_tasks};
use cdag::generator::{derive_cpdag, generate_taskset, GenConfig, DEFAULT_PERIODS};
use cdag::graph::Dag;
use cdag::model::{tagged_tasks, validate_concrete, validate_spec, ConcreteTask, Node, NodeKind, TagInfo};
use cdag::simulator::{simulate, ScenarioMode, SimConfig};
use cdag::timing::{assign_deadlines_offsets, SlackMode};
use cdag::{Architecture, SpecTask};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(fraction: f64, tasks: [usize; 2], nodes: [usize; 2]) -> GenConfig {
    GenConfig { task_count: tasks, node_count: nodes, ..GenConfig::uniform(&Architecture::xavier(), fraction) }
}

fn specs(seed: u64, cfg: &GenConfig) -> Vec<SpecTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..20 {
        if let Ok(s) = generate_taskset(cfg, &Architecture::xavier(), &mut rng) {
            return s;
        }
    }
    panic!("no task set for seed {seed}");
}

/// Same engines without preemption overhead, for plans analysed with `:none`.
fn cost_free(arch: &Architecture) -> Architecture {
    Architecture::new(arch.tags().iter().map(|t| TagInfo::new(t.name.clone(), t.count, 0.0)).collect()).unwrap()
}

fn concretes(spec: &SpecTask, limit: usize) -> Vec<ConcreteTask> {
    let mut all = generate_concrete_tasks(spec).unwrap();
    all.truncate(limit);
    all
}

fn combo(s: &str) -> HeuristicCombo {
    s.parse().unwrap()
}

fn plan_ids(loads: &[Vec<cdag::TaggedTask>]) -> Vec<Vec<(cdag::model::ConcreteId, Vec<u32>)>> {
    loads.iter().map(|e| e.iter().map(|t| (t.parent.id, t.active_ids())).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn generated_specs_are_valid_with_bounded_subtask_utilization(seed in any::<u64>()) {
        let arch = Architecture::xavier();
        for s in specs(seed, &small(0.4, [3, 5], [10, 30])) {
            prop_assert!(validate_spec(&s, &arch).is_ok());
            prop_assert!(s.dag().unwrap().topo_order().is_ok());
            prop_assert!(DEFAULT_PERIODS.contains(&s.period));
            prop_assert!(120_000 % s.period == 0);
            for n in &s.nodes {
                prop_assert!(n.wcet() <= s.period);
            }
        }
    }

    #[test]
    fn tagged_tasks_partition_the_wcet(seed in any::<u64>()) {
        let arch = Architecture::xavier();
        for s in specs(seed, &small(0.3, [2, 3], [6, 14])) {
            for c in concretes(&s, 40) {
                let c = Arc::new(c);
                let parts = tagged_tasks(&c, &arch);
                let total: u64 = parts.iter().map(|t| t.total_wcet()).sum();
                prop_assert_eq!(total, c.total_wcet());
                let mut seen = BTreeSet::new();
                for t in &parts {
                    prop_assert_eq!(t.dag().len(), c.dag.len());
                    prop_assert_eq!(t.dag().edge_count(), c.dag.edge_count());
                    for ix in t.active_indices() {
                        prop_assert!(seen.insert(ix), "sub-task in two tagged tasks");
                    }
                    let again = t.filter(&t.tag);
                    prop_assert_eq!(again.active_ids(), t.active_ids());
                }
            }
        }
    }

    #[test]
    fn concrete_tasks_cover_every_alternative_branch(seed in any::<u64>()) {
        let arch = Architecture::xavier();
        for s in specs(seed, &small(0.3, [2, 3], [6, 12])) {
            let all = generate_concrete_tasks(&s).unwrap();
            prop_assume!(all.len() < 4096);
            let mut chosen = BTreeSet::new();
            for c in &all {
                prop_assert!(c.dag.nodes().iter().all(|n| n.kind != NodeKind::Alternative));
                prop_assert!(validate_concrete(c, &arch).is_ok());
                chosen.extend(c.choices.iter().copied());
            }
            // Every branch of an alternative that some concrete task keeps
            // must be chosen by at least one of them.
            let dag = s.dag().unwrap();
            let kept: BTreeSet<u32> = all.iter().flat_map(|c| c.dag.nodes().iter().map(|n| n.id)).collect();
            for ix in 0..dag.len() {
                if dag.node(ix).kind == NodeKind::Alternative {
                    let id = dag.node(ix).id;
                    let reached = all.iter().any(|c| c.choices.iter().any(|&(a, _)| a == id));
                    if reached {
                        for &b in dag.succ(ix) {
                            prop_assert!(chosen.contains(&(id, dag.node(b).id)), "branch {}->{} never chosen", id, dag.node(b).id);
                        }
                    }
                }
            }
            prop_assert!(!kept.is_empty());
        }
    }

    #[test]
    fn concrete_order_is_a_total_order(seed in any::<u64>()) {
        for s in specs(seed, &small(0.3, [1, 2], [6, 12])) {
            let cs = concretes(&s, 30);
            for a in &cs {
                for b in &cs {
                    let ab = compare_total(a, b);
                    prop_assert_eq!(ab, compare_total(b, a).reverse());
                    prop_assert_eq!(ab == Ordering::Equal, a.id == b.id);
                }
            }
        }
    }

    #[test]
    fn local_deadlines_never_below_wcet(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in specs(seed, &small(0.4, [3, 4], [10, 30])) {
            let c = derive_cpdag(&s, &mut rng);
            for mode in [SlackMode::Fair, SlackMode::Proportional] {
                if let Ok(t) = assign_deadlines_offsets(&c, mode) {
                    let tm = t.timing.as_ref().unwrap();
                    for ix in t.dag.subtask_indices() {
                        prop_assert!(tm.deadline[ix] >= t.dag.wcet(ix));
                        prop_assert!(tm.offset[ix] + tm.deadline[ix] <= t.deadline);
                    }
                }
            }
        }
    }

    #[test]
    fn fair_and_proportional_agree_on_equal_wcets(seed in any::<u64>(), w in 1u64..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in specs(seed, &small(0.3, [2, 3], [10, 20])) {
            let c = derive_cpdag(&s, &mut rng);
            let nodes: Vec<Node> = c
                .dag
                .nodes()
                .iter()
                .map(|n| match n.tag() {
                    Some(tag) => Node::subtask(n.id, tag, w),
                    None => n.clone(),
                })
                .collect();
            let edges: Vec<_> = c.dag.edges().collect();
            let eq = ConcreteTask::new(c.id, c.period, c.deadline, Dag::new(nodes, &edges).unwrap(), c.choices.clone());
            let fair = assign_deadlines_offsets(&eq, SlackMode::Fair).map(|t| t.timing);
            let prop = assign_deadlines_offsets(&eq, SlackMode::Proportional).map(|t| t.timing);
            prop_assert_eq!(fair.ok(), prop.ok());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn allocation_is_verified_deterministic_and_dominates_cpdag(
        seed in any::<u64>(),
        frac in 0.05f64..0.5,
        name in prop::sample::select(vec!["BRF-P:none", "WOF-P:none", "BOF-P", "WRF-P:max"]),
    ) {
        let arch = Architecture::xavier();
        let set = specs(seed, &small(frac, [2, 4], [8, 16]));
        let c = combo(name);
        let a = allocate_taskset(&set, &arch, c, seed);
        prop_assert!(verify(&a, &arch));
        let b = allocate_taskset(&set, &arch, c, seed);
        prop_assert_eq!(plan_ids(&a.engines), plan_ids(&b.engines));
        prop_assert_eq!(a.is_success(), b.is_success());

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cp: Vec<_> = set.iter().map(|s| derive_cpdag(s, &mut rng)).collect();
        let p = allocate_concrete_set(&cp, &arch, c, seed);
        prop_assert!(verify(&p, &arch));
        if p.is_success() {
            prop_assert!(a.is_success(), "cp-DAG placed but C-DAG failed");
        }
    }

    #[test]
    fn failed_specs_leave_workloads_untouched(seed in any::<u64>()) {
        let arch = Architecture::xavier();
        let set = specs(seed, &small(0.7, [3, 5], [8, 16]));
        let mut alloc = Allocator::new(&arch, combo("BRF-P:none"), seed);
        for s in &set {
            let before = plan_ids(alloc.workloads());
            let util = alloc.utilizations().to_vec();
            if alloc.allocate_spec(s).is_err() {
                prop_assert_eq!(plan_ids(alloc.workloads()), before);
                prop_assert_eq!(alloc.utilizations(), &util[..]);
            }
        }
    }

    #[test]
    fn successful_plans_meet_every_deadline_in_simulation(seed in any::<u64>(), frac in 0.05f64..0.35) {
        let arch = Architecture::xavier();
        let set = specs(seed, &small(frac, [2, 3], [6, 12]));
        for name in ["BRF-P:none", "BRF-P", "WOF-P:max"] {
            let a = allocate_taskset(&set, &arch, combo(name), seed);
            if !a.is_success() {
                continue;
            }
            // The simulator always pays the engines' preemption costs.
            let hw = if a.combo.preemption == PreemptionMode::None { cost_free(&arch) } else { arch.clone() };
            for anticipate in [true, false] {
                let cfg = SimConfig { horizon: Some(240_000), anticipate, ..SimConfig::default() };
                let r = simulate(&a.engines, &hw, None, &cfg).unwrap();
                prop_assert!(r.misses.is_empty(), "{} anticipate={}: {:?}", name, anticipate, &r.misses[..r.misses.len().min(3)]);
                prop_assert_eq!(r.clone(), simulate(&a.engines, &hw, None, &cfg).unwrap());
            }
        }
    }

    #[test]
    fn random_scenario_runs_are_reproducible(seed in any::<u64>(), frac in 0.05f64..0.35) {
        let arch = Architecture::xavier();
        let set = specs(seed, &small(frac, [2, 3], [6, 12]));
        let a = allocate_taskset(&set, &arch, combo("BRF-P:none"), seed);
        let cfg = SimConfig { horizon: Some(60_000), scenarios: ScenarioMode::Random, seed, ..SimConfig::default() };
        let x = simulate(&a.engines, &arch, None, &cfg).unwrap();
        let y = simulate(&a.engines, &arch, None, &cfg).unwrap();
        prop_assert_eq!(&x.completions, &y.completions);
        prop_assert_eq!(x, y);
    }
}
