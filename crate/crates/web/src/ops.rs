use std::sync::Arc;

use cdag::allocation::HeuristicCombo;
use cdag::analysis::{self, DemandCurve, PreemptionMode};
use cdag::expansion::generate_concrete_tasks;
use cdag::harness::{run_sweep, Metric, SweepConfig};
use cdag::model::{filter_tagged_task, validate_spec, TagInfo};
use cdag::timing::{self, SlackMode};
use cdag::{fixtures, ConcreteTask, SpecTask, Ticks};
use serde::Serialize;

#[derive(Serialize)]
pub struct Bar {
    pub id: u32,
    pub tag: String,
    pub wcet: Ticks,
    pub offset: Ticks,
    pub deadline: Ticks,
    pub critical: bool,
}

#[derive(Serialize)]
pub struct Lane {
    pub index: u32,
    pub period: Ticks,
    pub deadline: Ticks,
    /// `None` when the critical path does not fit in the deadline.
    pub error: Option<String>,
    pub bars: Vec<Bar>,
}

#[derive(Serialize)]
pub struct Curve {
    pub index: u32,
    pub feasible: bool,
    pub utilization: f64,
    /// `(t, demand)` at every step of the curve up to the limit.
    pub points: Vec<(Ticks, Ticks)>,
}

#[derive(Serialize)]
pub struct SweepTable {
    pub columns: Vec<String>,
    /// `rates[step][column]`.
    pub rates: Vec<Vec<f64>>,
}

pub fn example_task() -> String {
    serde_json::to_string_pretty(&fixtures::example_spec()).expect("fixture serializes")
}

fn slack_mode(s: &str) -> Result<SlackMode, String> {
    match s {
        "fair" => Ok(SlackMode::Fair),
        "proportional" => Ok(SlackMode::Proportional),
        _ => Err(format!("unknown slack mode {s:?}")),
    }
}

fn preemption_mode(s: &str) -> Result<PreemptionMode, String> {
    match s {
        "none" => Ok(PreemptionMode::None),
        "max" => Ok(PreemptionMode::Max),
        "reduced" => Ok(PreemptionMode::Reduced),
        _ => Err(format!("unknown preemption mode {s:?}")),
    }
}

fn expand(spec_json: &str) -> Result<Vec<ConcreteTask>, String> {
    let spec: SpecTask = serde_json::from_str(spec_json).map_err(|e| e.to_string())?;
    let report = validate_spec(&spec, &cdag::Architecture::xavier());
    if !report.is_ok() {
        return Err(report.to_string());
    }
    generate_concrete_tasks(&spec).map_err(|e| e.to_string())
}

pub fn timeline(spec_json: &str, slack: &str) -> Result<String, String> {
    let mode = slack_mode(slack)?;
    let mut lanes = Vec::new();
    for c in expand(spec_json)? {
        let mut lane =
            Lane { index: c.id.index, period: c.period, deadline: c.deadline, error: None, bars: Vec::new() };
        match timing::assign_deadlines_offsets(&c, mode) {
            Ok(tc) => {
                let t = tc.timing.as_ref().expect("timed");
                let sg = tc.subtask_graph();
                let cp: Vec<usize> = timing::critical_path(&tc).into_iter().map(|k| sg.members[k]).collect();
                for ix in tc.dag.subtask_indices() {
                    let n = tc.dag.node(ix);
                    lane.bars.push(Bar {
                        id: n.id,
                        tag: n.tag().unwrap_or_default().to_string(),
                        wcet: n.wcet(),
                        offset: t.offset[ix],
                        deadline: t.deadline[ix],
                        critical: cp.contains(&ix),
                    });
                }
            }
            Err(e) => lane.error = Some(e.to_string()),
        }
        lanes.push(lane);
    }
    Ok(serde_json::to_string(&lanes).expect("lanes serialize"))
}

pub fn dbf_curve(
    spec_json: &str,
    slack: &str,
    tag: &str,
    factor: f64,
    preemption: &str,
    limit: Ticks,
) -> Result<String, String> {
    let mode = slack_mode(slack)?;
    let pmode = preemption_mode(preemption)?;
    if !(0.0..=1.0).contains(&factor) {
        return Err("preemption factor must be in [0, 1]".into());
    }
    let ppm = TagInfo::new(tag, 1, factor).preemption_ppm();
    let mut out = Vec::new();
    for c in expand(spec_json)? {
        let Ok(tc) = timing::assign_deadlines_offsets(&c, mode) else { continue };
        let t = filter_tagged_task(&Arc::new(tc), tag);
        if t.is_empty() {
            continue;
        }
        let items = [t];
        let ctx = analysis::inflate(&items, ppm, pmode).map_err(|e| e.to_string())?;
        let curve = DemandCurve::new(&items[0], Some(&ctx.extra[0])).map_err(|e| e.to_string())?;
        let verdict = analysis::check_curves(&[&curve]);
        let points = std::iter::once(0).chain(curve.points_up_to(limit)).map(|x| (x, curve.eval(x))).collect();
        out.push(Curve {
            index: items[0].parent.id.index,
            feasible: verdict.feasible,
            utilization: verdict.utilization,
            points,
        });
    }
    Ok(serde_json::to_string(&out).expect("curves serialize"))
}

pub fn mini_sweep(combos: &str, steps: usize, trials: usize, tasks: usize, seed: u64) -> Result<String, String> {
    let combos: Vec<HeuristicCombo> = combos
        .split(',')
        .map(|s| s.trim().parse::<HeuristicCombo>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    if !(1..=16).contains(&steps) || !(1..=20).contains(&trials) || !(1..=25).contains(&tasks) {
        return Err("steps must be 1-16, trials 1-20, tasks 1-25".into());
    }
    let cfg = SweepConfig {
        steps,
        trials_per_step: trials,
        task_count: [tasks, tasks],
        seed,
        ..SweepConfig::new("xavier", combos)
    };
    let r = run_sweep(&cfg).map_err(|e| e.to_string())?;
    let table = SweepTable { rates: r.table(Metric::SchedRate), columns: r.columns };
    Ok(serde_json::to_string(&table).expect("table serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn example_timeline_has_both_concrete_tasks() {
        let v: Value = serde_json::from_str(&timeline(&example_task(), "fair").unwrap()).unwrap();
        let lanes = v.as_array().unwrap();
        assert_eq!(lanes.len(), 2);
        for lane in lanes {
            assert!(lane["error"].is_null());
            let bars = lane["bars"].as_array().unwrap();
            assert!(bars.iter().all(|b| b["deadline"].as_u64() >= b["wcet"].as_u64()));
            assert!(bars.iter().any(|b| b["critical"] == true));
        }
    }

    #[test]
    fn dbf_curve_is_non_decreasing() {
        let s = dbf_curve(&example_task(), "proportional", "dGPU", 0.3, "reduced", 120).unwrap();
        let v: Vec<Value> = serde_json::from_str(&s).unwrap();
        assert!(!v.is_empty());
        for c in &v {
            let pts: Vec<(u64, u64)> = serde_json::from_value(c["points"].clone()).unwrap();
            assert_eq!(pts[0], (0, 0));
            assert!(pts.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
        }
    }

    #[test]
    fn bad_input_is_an_error() {
        assert!(timeline("{", "fair").is_err());
        assert!(timeline(&example_task(), "greedy").is_err());
        assert!(dbf_curve(&example_task(), "fair", "dGPU", 2.0, "reduced", 60).is_err());
    }

    #[test]
    fn mini_sweep_shape() {
        let s = mini_sweep("BRF-P:none", 3, 2, 2, 1).unwrap();
        let t: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(t["columns"].as_array().unwrap().len(), 2);
        let rates = t["rates"].as_array().unwrap();
        assert_eq!(rates.len(), 3);
        assert_eq!(rates[0][0], 1.0);
    }
}
