//! `cdag`: generate, validate, allocate, analyze, simulate and sweep C-DAG
//! task sets.
//!
//! Exit status: 0 on success, 1 on a FAIL verdict (invalid task set,
//! allocation failure, infeasible engine, deadline miss), 2 on usage or
//! input errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cdag::allocation::{allocate_concrete_set, allocate_taskset, HeuristicCombo};
use cdag::analysis::{self, DemandCurve, PreemptionMode};
use cdag::generator::{derive_cpdag, generate_taskset, GenConfig};
use cdag::harness::{run_sweep_steps, Metric, SweepConfig, SweepResult};
use cdag::io::{ArchSpec, Plan, TaskSetFile, Verdict};
use cdag::model::validate_spec;
use cdag::simulator::{simulate, ArrivalMode, ScenarioMode, SimConfig};
use cdag::{fixtures, Architecture, SpecTask, Ticks};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "cdag", version, about = "C-DAG task sets on heterogeneous engines")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// RNG seed; overrides the seed in --config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file (directory for `sweep`); stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a random task set (config: generator knobs).
    Gen {
        #[command(flatten)]
        common: Common,
        /// Architecture fixture (xavier, pegasus).
        #[arg(long, default_value = "xavier")]
        arch: String,
        /// Per-tag utilization as a fraction of the tag's engine count.
        #[arg(long)]
        util: Option<f64>,
        /// Emit a built-in example instead (example).
        #[arg(long, conflicts_with = "util")]
        fixture: Option<String>,
        /// Emit cp-DAG versions (one concrete task per specification).
        #[arg(long)]
        cpdag: bool,
    },
    /// Check a task-set file (config: architecture to check against).
    Validate {
        #[command(flatten)]
        common: Common,
        file: PathBuf,
    },
    /// Allocate a task set and write the plan (config: {"combo", "cpdag"}).
    Allocate {
        #[command(flatten)]
        common: Common,
        file: PathBuf,
        /// Heuristic combination, e.g. BRF-P, WOF-P:max.
        #[arg(long)]
        combo: Option<HeuristicCombo>,
        /// Allocate one cp-DAG concrete task per specification.
        #[arg(long)]
        cpdag: bool,
    },
    /// Per-engine demand-bound analysis of a plan; --out writes the curves
    /// as CSV (config: {"preemption", "curve_limit"}).
    Analyze {
        #[command(flatten)]
        common: Common,
        plan: PathBuf,
        /// Preemption handling; defaults to the plan's.
        #[arg(long)]
        preemption: Option<String>,
    },
    /// Replay a plan under EDF; --out writes the trace as CSV
    /// (config: simulator settings).
    Simulate {
        #[command(flatten)]
        common: Common,
        plan: PathBuf,
        #[arg(long)]
        horizon: Option<Ticks>,
        /// Sporadic arrivals: extra delay geometric with this success
        /// probability.
        #[arg(long)]
        sporadic: Option<f64>,
        /// Draw conditional outcomes per instance.
        #[arg(long)]
        random_scenarios: bool,
    },
    /// Utilization sweep writing one CSV per metric (config: experiment).
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        combos: Option<Vec<HeuristicCombo>>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        no_cpdag: bool,
        /// Suppress per-step progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn config<T: for<'de> Deserialize<'de> + Default>(c: &Common) -> Result<T> {
    c.config.as_deref().map_or_else(|| Ok(T::default()), read_json)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

fn fixture_arch(name: &str) -> Result<Architecture> {
    Architecture::fixture(name).with_context(|| format!("unknown architecture fixture {name:?} (xavier, pegasus)"))
}

fn parse_mode(s: &str) -> Result<PreemptionMode> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .with_context(|| format!("unknown preemption mode {s:?} (none, max, reduced)"))
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Gen { common, arch, util, fixture, cpdag } => gen(&common, &arch, util, fixture.as_deref(), cpdag),
        Cmd::Validate { common, file } => validate(&common, &file),
        Cmd::Allocate { common, file, combo, cpdag } => allocate(&common, &file, combo, cpdag),
        Cmd::Analyze { common, plan, preemption } => analyze(&common, &plan, preemption.as_deref()),
        Cmd::Simulate { common, plan, horizon, sporadic, random_scenarios } => {
            simulate_plan(&common, &plan, horizon, sporadic, random_scenarios)
        }
        Cmd::Sweep { common, combos, trials, no_cpdag, quiet } => sweep(&common, combos, trials, no_cpdag, quiet),
    }
}

fn gen(c: &Common, arch: &str, util: Option<f64>, fixture: Option<&str>, cpdag: bool) -> Result<bool> {
    let arch = fixture_arch(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed.unwrap_or(0));
    let specs = match fixture {
        Some("example") => vec![fixtures::example_spec()],
        Some(other) => bail!("unknown fixture {other:?} (example)"),
        None => {
            let mut cfg: GenConfig = config(c)?;
            if let Some(u) = util {
                cfg.utilization = GenConfig::uniform(&arch, u).utilization;
            }
            if cfg.utilization.is_empty() {
                bail!("no target utilization: pass --util or set \"utilization\" in --config");
            }
            generate_taskset(&cfg, &arch, &mut rng)?
        }
    };
    let specs = if cpdag {
        specs
            .iter()
            .map(|s| {
                let c = derive_cpdag(s, &mut rng);
                SpecTask {
                    id: s.id,
                    period: c.period,
                    deadline: c.deadline,
                    nodes: c.dag.nodes().to_vec(),
                    edges: c.dag.edges().collect(),
                }
            })
            .collect()
    } else {
        specs
    };
    emit(c.out.as_deref(), &TaskSetFile::new(&arch, specs).to_json())?;
    Ok(true)
}

fn validate(c: &Common, file: &Path) -> Result<bool> {
    let set: TaskSetFile =
        TaskSetFile::from_json(&fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?)
            .with_context(|| format!("parsing {}", file.display()))?;
    let arch = match &c.config {
        Some(p) => read_json::<ArchSpec>(p)?.build()?,
        None => set.architecture()?,
    };
    let mut ok = true;
    let mut lines = Vec::new();
    for t in &set.tasks {
        let r = validate_spec(t, &arch);
        ok &= r.is_ok();
        lines.push(format!("task {}: {r}", t.id));
    }
    lines.push(if ok { "ok".into() } else { "FAIL".into() });
    emit(c.out.as_deref(), &lines.join("\n"))?;
    Ok(ok)
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AllocateConfig {
    combo: Option<HeuristicCombo>,
    #[serde(default)]
    cpdag: bool,
}

fn allocate(c: &Common, file: &Path, combo: Option<HeuristicCombo>, cpdag: bool) -> Result<bool> {
    let cfg: AllocateConfig = config(c)?;
    let combo = match combo.or(cfg.combo) {
        Some(x) => x,
        None => "BRF-P".parse()?,
    };
    let set: TaskSetFile = read_json(file)?;
    let arch = set.architecture()?;
    for t in &set.tasks {
        let r = validate_spec(t, &arch);
        if !r.is_ok() {
            bail!("task {} is invalid: {r}", t.id);
        }
    }
    let seed = c.seed.unwrap_or(0);
    let alloc = if cpdag || cfg.cpdag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cp: Vec<_> = set.tasks.iter().map(|s| derive_cpdag(s, &mut rng)).collect();
        allocate_concrete_set(&cp, &arch, combo, seed)
    } else {
        allocate_taskset(&set.tasks, &arch, combo, seed)
    };
    let plan = Plan::from_allocation(&alloc, &arch)?;
    emit(c.out.as_deref(), &plan.to_json())?;
    if let Some(f) = &plan.failure {
        eprintln!("FAIL: specification {} could not be placed", f.spec);
    }
    Ok(plan.verdict == Verdict::Success)
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnalyzeConfig {
    preemption: Option<PreemptionMode>,
    /// Last interval length written to the curve CSV; default twice the
    /// largest period on the engine.
    curve_limit: Option<Ticks>,
}

#[derive(Serialize)]
struct EngineReport {
    engine: usize,
    tag: String,
    items: usize,
    feasible: bool,
    utilization: f64,
    violation: Option<Ticks>,
}

fn analyze(c: &Common, plan_path: &Path, preemption: Option<&str>) -> Result<bool> {
    let cfg: AnalyzeConfig = config(c)?;
    let plan: Plan = read_json(plan_path)?;
    let mode = match preemption {
        Some(s) => parse_mode(s)?,
        None => cfg.preemption.unwrap_or(plan.preemption),
    };
    let (arch, loads) = plan.workloads()?;
    let mut reports = Vec::new();
    let mut csv = String::from("engine,tag,t,demand\n");
    for (e, items) in loads.iter().enumerate() {
        let tag = &arch.tags()[arch.engines()[e].tag];
        let ctx = analysis::inflate(items, tag.preemption_ppm(), mode)?;
        let verdict = analysis::engine_feasible_with(items, &ctx)?;
        let curves =
            items.iter().zip(&ctx.extra).map(|(t, x)| DemandCurve::new(t, Some(x))).collect::<Result<Vec<_>, _>>()?;
        let check = analysis::check_curves(&curves);
        debug_assert_eq!(check.feasible, verdict);
        reports.push(EngineReport {
            engine: e,
            tag: tag.name.clone(),
            items: items.len(),
            feasible: check.feasible,
            utilization: check.utilization,
            violation: check.violation,
        });
        if !items.is_empty() {
            let limit = cfg.curve_limit.unwrap_or_else(|| 2 * items.iter().map(|t| t.period()).max().unwrap_or(0));
            let mut points: Vec<Ticks> = curves.iter().flat_map(|k| k.points_up_to(limit)).collect();
            points.sort_unstable();
            points.dedup();
            for t in points {
                let d: Ticks = curves.iter().map(|k| k.eval(t)).sum();
                csv.push_str(&format!("{e},{},{t},{d}\n", tag.name));
            }
        }
    }
    let ok = reports.iter().all(|r| r.feasible);
    if let Some(p) = &c.out {
        fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?;
    }
    let mut lines = vec![format!("preemption: {}", serde_json::to_value(mode)?.as_str().unwrap_or_default())];
    for r in &reports {
        let v = r.violation.map(|t| format!(", demand exceeds supply at t = {t}")).unwrap_or_default();
        lines.push(format!(
            "engine {:>2} {:<5} {:>3} items  U = {:.4}  {}{v}",
            r.engine,
            r.tag,
            r.items,
            r.utilization,
            if r.feasible { "feasible" } else { "INFEASIBLE" }
        ));
    }
    println!("{}", lines.join("\n"));
    Ok(ok)
}

#[derive(Serialize)]
struct SimSummary {
    runs: usize,
    jobs: usize,
    preemptions: usize,
    misses: Vec<cdag::simulator::Miss>,
}

fn simulate_plan(
    c: &Common,
    plan_path: &Path,
    horizon: Option<Ticks>,
    sporadic: Option<f64>,
    random: bool,
) -> Result<bool> {
    let mut cfg: SimConfig = config(c)?;
    if let Some(h) = horizon {
        cfg.horizon = Some(h);
    }
    if let Some(p) = sporadic {
        cfg.arrival = ArrivalMode::Sporadic { p };
    }
    if random {
        cfg.scenarios = ScenarioMode::Random;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.trace = c.out.is_some();
    let plan: Plan = read_json(plan_path)?;
    if plan.verdict == Verdict::Fail {
        eprintln!("note: replaying the partial plan of a failed allocation");
    }
    let (arch, loads) = plan.workloads()?;
    let report = simulate(&loads, &arch, None, &cfg)?;
    if let Some(p) = &c.out {
        let f = fs::File::create(p).with_context(|| format!("writing {}", p.display()))?;
        report.write_trace_csv(f)?;
    }
    let summary =
        SimSummary { runs: report.runs, jobs: report.jobs, preemptions: report.preemptions, misses: report.misses };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(summary.misses.is_empty())
}

fn sweep(
    c: &Common,
    combos: Option<Vec<HeuristicCombo>>,
    trials: Option<usize>,
    no_cpdag: bool,
    quiet: bool,
) -> Result<bool> {
    let mut cfg = match &c.config {
        Some(p) => read_json::<SweepConfig>(p)?,
        None => SweepConfig::new("xavier", vec!["BRF-P".parse()?]),
    };
    if let Some(x) = combos {
        cfg.combos = x;
    }
    if let Some(n) = trials {
        cfg.trials_per_step = n;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if no_cpdag {
        cfg.cpdag = false;
    }
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    let mut all: Option<SweepResult> = None;
    for step in 0..cfg.steps {
        let part = run_sweep_steps(&cfg, step..step + 1)?;
        let acc = all.get_or_insert_with(|| SweepResult { trials: Vec::new(), ..part.clone() });
        acc.trials.extend(part.trials);
        // Rewritten after every step so an interrupted sweep leaves the
        // finished steps on disk.
        acc.write_csvs(&dir).with_context(|| format!("writing {}", dir.display()))?;
        if !quiet {
            let rates =
                acc.table(Metric::SchedRate)[step].iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(" ");
            eprintln!("step {step:>2}/{}: {rates}", cfg.steps);
        }
    }
    if !quiet {
        eprintln!("wrote {}", dir.display());
    }
    Ok(true)
}
