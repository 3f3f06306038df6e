//! `drawreason`: maze generation, rollouts, scoring, filtering, advantages
//! and evaluation. Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use drawreason_core::canvas::encode_png;
use drawreason_core::episode::remote::RemotePolicy;
use drawreason_core::episode::{run_episode, EpisodeTrace, FixedPolicy, Policy, Provenance, Termination};
use drawreason_core::eval::evaluate;
use drawreason_core::grpo::group_advantages;
use drawreason_core::maze::{emit_dataset, OraclePolicy, MAX_GRID, MIN_GRID};
use drawreason_core::reflect::{cold_start_filter, rrs_filter, Verdict};
use drawreason_core::reward::total_reward;
use drawreason_core::task::{load_tasks, Task};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use config::RunConfig;

/// Bad arguments or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "drawreason", version, about = "Drawing-based visual reasoning toolkit")]
struct Cli {
    /// Flat TOML config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a maze dataset with oracle traces.
    GenMaze {
        /// Grid sizes, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [3usize, 4, 5, 6])]
        sizes: Vec<usize>,
        /// Tasks per size: one value for all sizes or one per size.
        #[arg(long, value_delimiter = ',', default_values_t = [10usize])]
        counts: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Roll out a policy on every task, writing traces.jsonl and drawn images.
    Run {
        #[arg(long)]
        tasks: PathBuf,
        /// oracle, remote, or fixed:<reply text> (`\n` escapes allowed).
        #[arg(long)]
        policy: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        parallel: Option<usize>,
        #[arg(long)]
        attempts: Option<u32>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        alpha: Option<usize>,
    },
    /// Attach a reward breakdown to every trace.
    Score {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        /// Output JSONL; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Keep traces passing the reflective (or cold-start) filter.
    FilterRrs {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FilterMode::Rrs)]
        mode: FilterMode,
        /// Also write the acceptance report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Group-normalized advantages from `{"group", "scores"}` lines.
    Advantages {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score traces against tasks and print the report table.
    Eval {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum FilterMode {
    Rrs,
    ColdStart,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::GenMaze {
            sizes,
            counts,
            seed,
            out,
            parallel,
        } => {
            override_opt(&mut cfg.seed, seed);
            override_opt(&mut cfg.parallel, parallel);
            cfg.validate()?;
            gen_maze(&cfg, &sizes, &counts, &out)
        }
        Cmd::Run {
            tasks,
            policy,
            out,
            parallel,
            attempts,
            endpoint,
            max_steps,
            alpha,
        } => {
            override_opt(&mut cfg.parallel, parallel);
            override_opt(&mut cfg.attempts, attempts);
            override_opt(&mut cfg.endpoint, endpoint);
            override_opt(&mut cfg.max_steps, max_steps);
            override_opt(&mut cfg.alpha, alpha);
            cfg.validate()?;
            run(&cfg, &tasks, &policy, &out)
        }
        Cmd::Score {
            tasks,
            traces,
            out,
            beta,
        } => {
            override_opt(&mut cfg.beta, beta);
            cfg.validate()?;
            score(&cfg, &tasks, &traces, out.as_deref())
        }
        Cmd::FilterRrs {
            tasks,
            traces,
            out,
            mode,
            report,
        } => {
            cfg.validate()?;
            filter(&cfg, &tasks, &traces, &out, mode, report.as_deref())
        }
        Cmd::Advantages { input, out } => advantages(&input, out.as_deref()),
        Cmd::Eval { tasks, traces, out } => {
            cfg.validate()?;
            eval(&cfg, &tasks, &traces, &out)
        }
    }
}

fn override_opt<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn pool(n: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .context("building thread pool")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Writes to `path`, or stdout when `None`.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, text.as_bytes()),
        None => io::stdout()
            .write_all(text.as_bytes())
            .context("writing to stdout"),
    }
}

fn gen_maze(cfg: &RunConfig, sizes: &[usize], counts: &[usize], out: &Path) -> Result<ExitCode> {
    if sizes.is_empty() {
        bail!(UsageError("--sizes is empty".into()));
    }
    if let Some(&g) = sizes.iter().find(|g| !(MIN_GRID..=MAX_GRID).contains(*g)) {
        bail!(UsageError(format!("grid size {g} outside {MIN_GRID}..={MAX_GRID}")));
    }
    let per_size: Vec<usize> = match counts.len() {
        1 => vec![counts[0]; sizes.len()],
        n if n == sizes.len() => counts.to_vec(),
        n => bail!(UsageError(format!(
            "--counts has {n} values for {} sizes",
            sizes.len()
        ))),
    };
    let mut table = BTreeMap::new();
    for (&g, &n) in sizes.iter().zip(&per_size) {
        if table.insert(g, n).is_some() {
            bail!(UsageError(format!("grid size {g} listed twice")));
        }
    }
    let ep = cfg.episode()?;
    let manifest = pool(cfg.parallel)?.install(|| emit_dataset(&table, cfg.seed, out, &ep))?;
    eprintln!(
        "wrote {} tasks to {} (dataset sha256 {})",
        manifest.records,
        out.display(),
        manifest.dataset_sha256
    );
    Ok(ExitCode::SUCCESS)
}

fn make_policy(spec: &str, cfg: &RunConfig) -> Result<Box<dyn Policy>> {
    Ok(match spec {
        "oracle" => Box::new(OraclePolicy),
        "remote" => Box::new(RemotePolicy::new(cfg.remote())),
        _ => match spec.strip_prefix("fixed:") {
            Some(text) => Box::new(FixedPolicy(text.replace("\\n", "\n"))),
            None => bail!(UsageError(format!(
                "unknown policy {spec:?}; expected oracle, remote or fixed:<text>"
            ))),
        },
    })
}

struct RunItem {
    trace: EpisodeTrace,
    pngs: Vec<(String, Vec<u8>)>,
}

fn run_one(
    policy: &dyn Policy,
    task: &Task,
    base: &Path,
    attempt: u32,
    cfg: &RunConfig,
) -> Result<RunItem> {
    let inputs = task.load_images(base)?;
    let out = run_episode(policy, task, inputs, &cfg.episode()?, attempt)?;
    let mut trace = out.trace;
    let mut pngs = Vec::new();
    for (entry, (index, img, prov)) in trace.registry.iter_mut().zip(out.registry.iter()) {
        let rel = match prov {
            Provenance::Input { n } => task.images.get(n - 1).cloned(),
            Provenance::Drawn { .. } => {
                let rel = format!("images/{}/{attempt}/{index}.png", task.id);
                pngs.push((rel.clone(), encode_png(img)?));
                Some(rel)
            }
        };
        entry.path = rel;
    }
    Ok(RunItem { trace, pngs })
}

fn run(cfg: &RunConfig, tasks_path: &Path, policy: &str, out: &Path) -> Result<ExitCode> {
    let policy = make_policy(policy, cfg)?;
    let tasks = load_tasks(tasks_path)?;
    let base = tasks_path.parent().unwrap_or(Path::new("."));
    let jobs: Vec<(usize, u32)> = (0..tasks.len())
        .flat_map(|i| (0..cfg.attempts).map(move |a| (i, a)))
        .collect();
    let items: Vec<RunItem> = pool(cfg.parallel)?.install(|| {
        jobs.par_iter()
            .map(|&(i, a)| run_one(policy.as_ref(), &tasks[i], base, a, cfg))
            .collect::<Result<_>>()
    })?;

    let mut jsonl = String::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for item in &items {
        for (rel, bytes) in &item.pngs {
            write_file(&out.join(rel), bytes)?;
        }
        jsonl.push_str(&serde_json::to_string(&item.trace)?);
        jsonl.push('\n');
        *counts.entry(item.trace.termination.as_str()).or_default() += 1;
    }
    write_file(&out.join("traces.jsonl"), jsonl.as_bytes())?;
    let summary: Vec<String> = counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    eprintln!("{} trace(s): {}", items.len(), summary.join(" "));
    let failed = items
        .iter()
        .filter(|i| i.trace.termination == Termination::PolicyError)
        .count();
    if failed > 0 {
        eprintln!("{failed} episode(s) ended with a policy error");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn read_traces(path: &Path) -> Result<Vec<EpisodeTrace>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .with_context(|| format!("{}:{}: bad trace record", path.display(), i + 1))
        })
        .collect()
}

fn task_index(tasks: &[Task]) -> BTreeMap<&str, &Task> {
    tasks.iter().map(|t| (t.id.as_str(), t)).collect()
}

fn lookup<'a>(index: &BTreeMap<&str, &'a Task>, id: &str) -> Result<&'a Task> {
    index
        .get(id)
        .copied()
        .with_context(|| format!("trace for unknown task {id:?}"))
}

fn score(cfg: &RunConfig, tasks: &Path, traces: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let tasks = load_tasks(tasks)?;
    let index = task_index(&tasks);
    let ladder = cfg.ladder()?;
    let mut text = String::new();
    for tr in read_traces(traces)? {
        let task = lookup(&index, &tr.task_id)?;
        let reward = total_reward(&tr, task.answer, cfg.beta, &ladder);
        let mut v = serde_json::to_value(&tr)?;
        v["reward"] = serde_json::to_value(reward)?;
        text.push_str(&v.to_string());
        text.push('\n');
    }
    emit(out, &text)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct FilterReport {
    mode: FilterMode,
    total: usize,
    accepted: usize,
    rejected: usize,
    acceptance_rate: f64,
    reasons: BTreeMap<String, usize>,
}

fn filter(
    cfg: &RunConfig,
    tasks: &Path,
    traces: &Path,
    out: &Path,
    mode: FilterMode,
    report_path: Option<&Path>,
) -> Result<ExitCode> {
    let tasks = load_tasks(tasks)?;
    let index = task_index(&tasks);
    let fcfg = cfg.filter()?;
    let traces = read_traces(traces)?;
    let mut kept = String::new();
    let mut reasons = BTreeMap::new();
    let mut accepted = 0;
    for tr in &traces {
        let task = lookup(&index, &tr.task_id)?;
        let verdict = match mode {
            FilterMode::Rrs => rrs_filter(tr, task.answer, &fcfg),
            FilterMode::ColdStart => cold_start_filter(tr, task.answer, &fcfg),
        };
        match verdict {
            Verdict::Accept => {
                accepted += 1;
                kept.push_str(&serde_json::to_string(tr)?);
                kept.push('\n');
            }
            Verdict::Reject(why) => *reasons.entry(why).or_default() += 1,
        }
    }
    write_file(out, kept.as_bytes())?;
    let report = FilterReport {
        mode,
        total: traces.len(),
        accepted,
        rejected: traces.len() - accepted,
        acceptance_rate: if traces.is_empty() {
            0.0
        } else {
            accepted as f64 / traces.len() as f64
        },
        reasons,
    };
    let body = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(p) = report_path {
        write_file(p, body.as_bytes())?;
    }
    print!("{body}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct GroupIn {
    group: Value,
    scores: Vec<f64>,
}

#[derive(Serialize)]
struct GroupOut {
    group: Value,
    advantages: Vec<f64>,
}

fn advantages(input: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let mut body = String::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}:{}", input.display(), i + 1);
        let g: GroupIn = serde_json::from_str(line).with_context(at)?;
        let adv = group_advantages(&g.scores).with_context(at)?;
        body.push_str(&serde_json::to_string(&GroupOut {
            group: g.group,
            advantages: adv,
        })?);
        body.push('\n');
    }
    emit(out, &body)?;
    Ok(ExitCode::SUCCESS)
}

fn eval(cfg: &RunConfig, tasks: &Path, traces: &Path, out: &Path) -> Result<ExitCode> {
    let tasks = load_tasks(tasks)?;
    let traces = read_traces(traces)?;
    let report = evaluate(&traces, &tasks, &cfg.eval()?)?;
    write_file(out, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    print!("{}", report.table());
    Ok(ExitCode::SUCCESS)
}
