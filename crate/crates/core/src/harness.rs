//! Utilization sweeps: generate task sets per step, allocate them under each
//! heuristic combination (and on the cp-DAG baseline), aggregate metrics.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{allocate_concrete_set, allocate_taskset, Allocation, HeuristicCombo};
use crate::generator::{derive_cpdag, generate_taskset, GenConfig, GenError};
use crate::model::{Architecture, SpecTask};

pub const CPDAG_PREFIX: &str = "cpdag:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub arch_fixture: String,
    pub combos: Vec<HeuristicCombo>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_trials")]
    pub trials_per_step: usize,
    #[serde(default = "default_task_count")]
    pub task_count: [usize; 2],
    #[serde(default)]
    pub seed: u64,
    /// Also run every combo on cp-DAG versions of the same task sets.
    #[serde(default = "yes")]
    pub cpdag: bool,
    /// Adds wall-clock time to trial records; breaks byte-identical output.
    #[serde(default)]
    pub wall_time: bool,
    /// Overrides for the remaining generator knobs; utilization and task
    /// count are set per step.
    #[serde(default)]
    pub generator: Option<GenConfig>,
}

fn default_steps() -> usize {
    16
}
fn default_trials() -> usize {
    85
}
fn default_task_count() -> [usize; 2] {
    [20, 25]
}
fn yes() -> bool {
    true
}

impl SweepConfig {
    pub fn new(arch_fixture: &str, combos: Vec<HeuristicCombo>) -> Self {
        Self {
            arch_fixture: arch_fixture.to_string(),
            combos,
            steps: default_steps(),
            trials_per_step: default_trials(),
            task_count: default_task_count(),
            seed: 0,
            cpdag: true,
            wall_time: false,
            generator: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("unknown architecture fixture {0}")]
    UnknownFixture(String),
    #[error("invalid sweep configuration: {0}")]
    Config(String),
    #[error("generation failed at step {step}, trial {trial}: {source}")]
    Generation { step: usize, trial: usize, source: GenError },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub combo: String,
    pub step: usize,
    pub seed: u64,
    pub schedulable: bool,
    pub active_cpus: usize,
    pub active_cpu_util: f64,
    pub scarce_util: f64,
    /// Some specification had more concrete tasks than the allocator scans.
    pub omega_capped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Column names: the combos, then their cp-DAG variants.
    pub columns: Vec<String>,
    pub trials: Vec<TrialRecord>,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    SchedRate,
    ActiveCpus,
    ActiveCpuUtil,
    ScarceUtil,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::SchedRate, Metric::ActiveCpus, Metric::ActiveCpuUtil, Metric::ScarceUtil];

    pub fn file_name(self) -> &'static str {
        match self {
            Metric::SchedRate => "sched_rate.csv",
            Metric::ActiveCpus => "active_cpus.csv",
            Metric::ActiveCpuUtil => "active_cpu_util.csv",
            Metric::ScarceUtil => "scarce_util.csv",
        }
    }

    fn of(self, r: &TrialRecord) -> f64 {
        match self {
            Metric::SchedRate => f64::from(u8::from(r.schedulable)),
            Metric::ActiveCpus => r.active_cpus as f64,
            Metric::ActiveCpuUtil => r.active_cpu_util,
            Metric::ScarceUtil => r.scarce_util,
        }
    }
}

impl SweepResult {
    /// Mean of `metric` per step (rows) and column.
    pub fn table(&self, metric: Metric) -> Vec<Vec<f64>> {
        let mut sum = vec![vec![0.0; self.columns.len()]; self.steps];
        let mut cnt = vec![vec![0usize; self.columns.len()]; self.steps];
        for r in &self.trials {
            let c = self.columns.iter().position(|n| *n == r.combo).expect("known column");
            sum[r.step][c] += metric.of(r);
            cnt[r.step][c] += 1;
        }
        for (srow, crow) in sum.iter_mut().zip(&cnt) {
            for (s, &c) in srow.iter_mut().zip(crow) {
                if c > 0 {
                    *s /= c as f64;
                }
            }
        }
        sum
    }

    pub fn column(&self, metric: Metric, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.table(metric).into_iter().map(|row| row[c]).collect())
    }

    pub fn metric_csv(&self, metric: Metric) -> String {
        let mut out = String::from("step");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (s, row) in self.table(metric).iter().enumerate() {
            write!(out, "{s}").expect("string write");
            for v in row {
                write!(out, ",{v:.6}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn trials_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.trials {
            let mut row = vec![
                r.combo.clone(),
                r.step.to_string(),
                r.seed.to_string(),
                u8::from(r.schedulable).to_string(),
                r.active_cpus.to_string(),
                format!("{:.6}", r.active_cpu_util),
                format!("{:.6}", r.scarce_util),
                u8::from(r.omega_capped).to_string(),
            ];
            if let Some(ms) = r.wall_ms {
                row.push(format!("{ms:.3}"));
            }
            w.write_record(&row).expect("in-memory csv");
        }
        let body = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8");
        let mut head = String::from("combo,step,seed,schedulable,active_cpus,active_cpu_util,scarce_util,omega_capped");
        if self.trials.first().is_some_and(|r| r.wall_ms.is_some()) {
            head.push_str(",wall_ms");
        }
        head + "\n" + &body
    }

    /// Writes the four metric tables and `trials.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for m in Metric::ALL {
            fs::write(dir.join(m.file_name()), self.metric_csv(m))?;
        }
        fs::write(dir.join("trials.csv"), self.trials_csv())
    }
}

pub fn trial_seed(seed: u64, step: usize, trial: usize) -> u64 {
    seed.wrapping_mul(1_000_000).wrapping_add(step as u64 * 1_000).wrapping_add(trial as u64)
}

/// Per-tag target utilization at `step`: `step · n(tag) / steps`.
pub fn step_config(base: &GenConfig, arch: &Architecture, step: usize, steps: usize) -> GenConfig {
    let mut cfg = GenConfig::uniform(arch, step as f64 / steps as f64);
    cfg.utilization.retain(|_, u| *u > 0.0);
    GenConfig { utilization: cfg.utilization, ..base.clone() }
}

/// Metrics of one allocation (partial when it failed).
pub fn trial_metrics(alloc: &Allocation, arch: &Architecture) -> (usize, f64, f64) {
    let cpu = arch.tag_index("CPU");
    let active: Vec<f64> = arch
        .engines()
        .iter()
        .filter(|e| Some(e.tag) == cpu && !alloc.engines[e.id].is_empty())
        .map(|e| alloc.utilization[e.id])
        .collect();
    let active_util = if active.is_empty() { 0.0 } else { active.iter().sum::<f64>() / active.len() as f64 };
    let scarce = arch.scarce_tags();
    let scarce_util: Vec<f64> =
        arch.engines().iter().filter(|e| scarce.contains(&e.tag)).map(|e| alloc.utilization[e.id]).collect();
    let scarce_mean =
        if scarce_util.is_empty() { 0.0 } else { scarce_util.iter().sum::<f64>() / scarce_util.len() as f64 };
    (active.len(), active_util, scarce_mean)
}

fn generate(
    base: &GenConfig,
    arch: &Architecture,
    step: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<SpecTask>, GenError> {
    if step == 0 {
        return Ok(Vec::new());
    }
    let cfg = step_config(base, arch, step, steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = GenError::DiscardLimit;
    for _ in 0..10 {
        match generate_taskset(&cfg, arch, &mut rng) {
            Ok(s) => return Ok(s),
            Err(e @ GenError::DiscardLimit) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

/// Runs the whole sweep; `progress` is called after every trial.
pub fn run_sweep_with(cfg: &SweepConfig, progress: impl FnMut(usize, usize)) -> Result<SweepResult, SweepError> {
    run_steps(cfg, 0..cfg.steps, progress)
}

/// Runs only the given steps (rows of the other steps stay empty).
pub fn run_sweep_steps(cfg: &SweepConfig, steps: std::ops::Range<usize>) -> Result<SweepResult, SweepError> {
    run_steps(cfg, steps, |_, _| {})
}

fn run_steps(
    cfg: &SweepConfig,
    steps: std::ops::Range<usize>,
    mut progress: impl FnMut(usize, usize),
) -> Result<SweepResult, SweepError> {
    let arch =
        Architecture::fixture(&cfg.arch_fixture).ok_or_else(|| SweepError::UnknownFixture(cfg.arch_fixture.clone()))?;
    if cfg.combos.is_empty() || cfg.steps == 0 || cfg.trials_per_step == 0 {
        return Err(SweepError::Config("need at least one combo, step and trial".into()));
    }
    if cfg.trials_per_step > 1_000 {
        return Err(SweepError::Config("trials_per_step must be at most 1000".into()));
    }
    if cfg.task_count[0] == 0 || cfg.task_count[0] > cfg.task_count[1] {
        return Err(SweepError::Config("task_count must be a non-empty range [lo, hi]".into()));
    }
    let mut base = cfg.generator.clone().unwrap_or_default();
    base.task_count = cfg.task_count;

    let mut columns: Vec<String> = cfg.combos.iter().map(ToString::to_string).collect();
    if cfg.cpdag {
        columns.extend(cfg.combos.iter().map(|c| format!("{CPDAG_PREFIX}{c}")));
    }
    let mut trials = Vec::new();
    if steps.end > cfg.steps {
        return Err(SweepError::Config("step range exceeds steps".into()));
    }
    for step in steps {
        for trial in 0..cfg.trials_per_step {
            let seed = trial_seed(cfg.seed, step, trial);
            let specs = generate(&base, &arch, step, cfg.steps, seed).map_err(|source| SweepError::Generation {
                step,
                trial,
                source,
            })?;
            let cp = if cfg.cpdag {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cda6);
                Some(specs.iter().map(|s| derive_cpdag(s, &mut rng)).collect::<Vec<_>>())
            } else {
                None
            };
            let mut record = |name: String, run: &dyn Fn() -> Allocation| {
                let start = Instant::now();
                let alloc = run();
                let wall = start.elapsed().as_secs_f64() * 1e3;
                let (active_cpus, active_cpu_util, scarce_util) = trial_metrics(&alloc, &arch);
                trials.push(TrialRecord {
                    combo: name,
                    step,
                    seed,
                    schedulable: alloc.is_success(),
                    active_cpus,
                    active_cpu_util,
                    scarce_util,
                    omega_capped: alloc.omega_cap_exceeded(),
                    wall_ms: cfg.wall_time.then_some(wall),
                });
            };
            for combo in &cfg.combos {
                record(combo.to_string(), &|| allocate_taskset(&specs, &arch, *combo, seed));
            }
            if let Some(cp) = &cp {
                for combo in &cfg.combos {
                    record(format!("{CPDAG_PREFIX}{combo}"), &|| allocate_concrete_set(cp, &arch, *combo, seed));
                }
            }
            progress(step, trial);
        }
    }
    Ok(SweepResult { columns, trials, steps: cfg.steps })
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult, SweepError> {
    run_sweep_with(cfg, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(combos: &[&str]) -> SweepConfig {
        SweepConfig {
            steps: 4,
            trials_per_step: 2,
            task_count: [3, 4],
            seed: 7,
            ..SweepConfig::new("xavier", combos.iter().map(|c| c.parse().unwrap()).collect())
        }
    }

    #[test]
    fn seeds_are_distinct_per_trial() {
        assert_eq!(trial_seed(3, 2, 5), 3_002_005);
        assert_ne!(trial_seed(0, 1, 0), trial_seed(0, 0, 1));
    }

    #[test]
    fn step_utilization_scales_with_engine_count() {
        let arch = Architecture::xavier();
        let cfg = step_config(&GenConfig::default(), &arch, 1, 16);
        assert_eq!(cfg.utilization["CPU"], 0.5);
        assert_eq!(cfg.utilization["DLA"], 0.0625);
    }

    #[test]
    fn step_zero_is_always_schedulable() {
        let r = run_sweep(&small(&["BRF-P", "WOP-R"])).unwrap();
        let rate = r.table(Metric::SchedRate);
        assert!(rate[0].iter().all(|&v| v == 1.0));
        assert_eq!(r.columns, ["BRF-P", "WOP-R", "cpdag:BRF-P", "cpdag:WOP-R"]);
        assert_eq!(r.trials.len(), 4 * 2 * 4);
        for row in &rate {
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for t in &r.trials {
            assert!(t.active_cpus <= 8);
        }
    }

    #[test]
    fn csv_layout_and_determinism() {
        let a = run_sweep(&small(&["BRF-P"])).unwrap();
        let b = run_sweep(&small(&["BRF-P"])).unwrap();
        let csv = a.metric_csv(Metric::SchedRate);
        assert!(csv.starts_with("step,BRF-P,cpdag:BRF-P\n0,1.000000,1.000000\n"));
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(csv, b.metric_csv(Metric::SchedRate));
        assert_eq!(a.trials_csv(), b.trials_csv());
        assert!(a.trials_csv().starts_with("combo,step,seed,schedulable,"));
    }

    #[test]
    fn config_json() {
        let cfg: SweepConfig = serde_json::from_str(
            r#"{"arch_fixture":"xavier","combos":["BRF-P","BRF-P:max"],"steps":16,"trials_per_step":85,"task_count":[20,25],"seed":1}"#,
        )
        .unwrap();
        assert_eq!(cfg.combos.len(), 2);
        assert!(cfg.cpdag);
        assert!(serde_json::from_str::<SweepConfig>(r#"{"arch_fixture":"xavier","combos":["nope"]}"#).is_err());
        let bad = SweepConfig { arch_fixture: "tx2".into(), ..small(&["BRF-P"]) };
        assert!(matches!(run_sweep(&bad), Err(SweepError::UnknownFixture(_))));
    }
}
