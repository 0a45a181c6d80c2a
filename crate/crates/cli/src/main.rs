mod config;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use config::{Experiment, ExperimentSpec, KeyValues};
use qfil_core::dataset::Dataset;
use qfil_core::envs::{bandit_generate, GridMdp, DEFAULT_MAP};
use qfil_core::numerics::RngStream;
use qfil_core::oampi::{
    append_records, expand_seeds, read_records, run_diagnostics, summarize, sweep, write_summary_csv,
    write_summary_table, EnvKind, Record, Regime,
};
use qfil_core::operators::FilterVariant;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Quantile-filtered imitation learning experiments.
#[derive(Debug, Parser)]
#[command(name = "qfil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by `run` and `diagnose`.
#[derive(Debug, clap::Args)]
struct SpecArgs {
    /// bandit-biasvar, grid-onestep, grid-iterative or custom.
    #[arg(default_value = "custom")]
    experiment: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed list, e.g. `0..50` or `1,2,5`.
    #[arg(long, visible_alias = "seed")]
    seeds: Option<String>,
    /// Output directory (default `$QFIL_OUT/<experiment>` or `results/<experiment>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value`, repeatable; wins over the config file.
    #[arg(long = "override", short = 'O')]
    overrides: Vec<String>,
    /// Worker threads (default: hardware threads).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    env: Option<String>,
    /// Dataset size(s), comma separated.
    #[arg(long)]
    n: Option<String>,
    /// Quantile level(s), comma separated.
    #[arg(long)]
    tau: Option<String>,
    /// Filter variant(s), comma separated.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Mean,
    Std,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a behavior dataset.
    Generate {
        #[arg(long)]
        env: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset file (default `$QFIL_OUT/<env>-<n>-<seed>.dataset`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
        #[arg(long, default_value_t = 200)]
        max_episode_steps: usize,
        #[arg(long, default_value_t = 0.5)]
        behavior_greedy: f64,
    },
    /// Run an experiment sweep and append its records.
    Run(SpecArgs),
    /// Emit a dataset-size by quantile matrix of across-seed statistics.
    Plotdata {
        /// Record file written by `run`.
        records: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::Mean)]
        kind: Kind,
        #[arg(long, default_value = "bandit")]
        env: String,
        #[arg(long, default_value = "qfil")]
        variant: String,
        #[arg(long, default_value = "one-step")]
        regime: String,
        /// Required dataset sizes (default: all present).
        #[arg(long)]
        n: Option<String>,
        /// Required levels (default: all present).
        #[arg(long)]
        tau: Option<String>,
        /// CSV file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train `β̂` and `Q̂` for each cell and report the filtered-W1 diagnostic.
    Diagnose(SpecArgs),
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn usage<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn runtime<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

fn out_root() -> PathBuf {
    std::env::var_os("QFIL_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("results"))
}

fn resolve(args: &SpecArgs) -> Result<ExperimentSpec> {
    let experiment: Experiment = args.experiment.parse()?;
    let file = args.config.as_deref().map(KeyValues::from_file).transpose()?;
    let base = args
        .config
        .as_deref()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let mut overrides = KeyValues::default();
    for (key, v) in [
        ("env", &args.env),
        ("n", &args.n),
        ("filter.tau", &args.tau),
        ("filter.variant", &args.variant),
        ("seeds", &args.seeds),
    ] {
        if let Some(v) = v {
            overrides.0.insert(key.into(), v.clone());
        }
    }
    overrides.layer(&KeyValues::from_overrides(&args.overrides)?);
    let out = args.out.clone().unwrap_or_else(|| out_root().join(&args.experiment));
    ExperimentSpec::resolve(experiment, file.as_ref(), &overrides, &base, out)
}

fn workers(flag: Option<usize>) -> Result<usize> {
    match flag {
        Some(0) => bail!("--workers must be positive"),
        Some(w) => Ok(w),
        None => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Discounted return of every episode, in dataset order.
fn discounted_returns(ds: &Dataset, gamma: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut current: Option<u32> = None;
    let mut discount = 1.0;
    for t in ds.transitions() {
        if current != Some(t.episode) {
            current = Some(t.episode);
            discount = 1.0;
            out.push(0.0);
        }
        *out.last_mut().expect("episode started") += discount * t.r;
        discount *= gamma;
    }
    out
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, (var / n).sqrt())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(env: &str, n: usize, seed: u64, out: Option<PathBuf>, gamma: f64, max_steps: usize, greedy: f64) -> Result<(), Failure> {
    let env: EnvKind = usage(env.parse().map_err(|e: String| anyhow!(e)))?;
    if n == 0 {
        return Err(Failure::Usage(anyhow!("--n must be positive")));
    }
    let out = out.unwrap_or_else(|| out_root().join(format!("{}-{n}-{seed}.dataset", env.name())));
    let mut rng = RngStream::new(seed, "run").fork("data");
    let ds = match env {
        EnvKind::Bandit => runtime(bandit_generate(n, &mut rng).map_err(Into::into))?,
        EnvKind::Grid => {
            let mdp = usage(GridMdp::from_map(DEFAULT_MAP, gamma).map_err(Into::into))?;
            let behavior = mdp.behavior_policy(greedy);
            let ds = runtime(mdp.generate(&behavior, n, max_steps, &mut rng).map_err(Into::into))?;
            let exact = runtime(mdp.exact_eval(&behavior).map_err(Into::into))?.j;
            let (m, se) = mean_se(&discounted_returns(&ds, gamma));
            println!("episodes {} discounted return {m:.6} ± {se:.6} exact J {exact:.6}", ds.n_episodes());
            ds
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        runtime(std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())))?;
    }
    runtime(ds.save(&out).with_context(|| format!("writing {}", out.display())))?;
    println!("rows {} written to {}", ds.len(), out.display());
    Ok(())
}

fn write_summaries(dir: &Path, records: &[Record]) -> Result<()> {
    let cells = summarize(records);
    write_summary_csv(&cells, std::fs::File::create(dir.join("summary.csv"))?)?;
    let mut table = Vec::new();
    write_summary_table(&cells, &mut table)?;
    std::fs::write(dir.join("summary.txt"), &table)?;
    std::io::stdout().write_all(&table)?;
    Ok(())
}

fn cmd_run(args: &SpecArgs) -> Result<(), Failure> {
    let spec = usage(resolve(args))?;
    let workers = usage(workers(args.workers))?;
    runtime(std::fs::create_dir_all(&spec.out).with_context(|| format!("creating {}", spec.out.display())))?;
    let configs = expand_seeds(&spec.cells, &spec.seeds);
    let records = runtime(sweep(&configs, workers).map_err(Into::into))?;
    let path = spec.out.join("records.jsonl");
    runtime(append_records(&path, &records).map_err(Into::into))?;
    let all = runtime(read_records(&path).map_err(Into::into))?;
    runtime(write_summaries(&spec.out, &all))?;
    let failed: Vec<&Record> = records.iter().filter(|r| r.result().is_none()).collect();
    for r in &failed {
        if let Record::Failed(f) = r {
            eprintln!("failed: {} {} n={} level={} seed={}: {}", f.env.name(), f.variant.name(), f.n, f.level, f.seed, f.error);
        }
    }
    if failed.len() == records.len() {
        return Err(Failure::Runtime(anyhow!("all {} runs failed", records.len())));
    }
    Ok(())
}

fn list<T: std::str::FromStr>(v: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|e| anyhow!("invalid {what} `{x}`: {e}")))
        .collect()
}

/// CSV matrix: one row per dataset size, one column per level.
fn plot_matrix(records: &[Record], kind: Kind, env: EnvKind, variant: FilterVariant, regime: Regime, ns: Option<Vec<usize>>, levels: Option<Vec<f64>>) -> Result<String> {
    let mut cells: BTreeMap<(usize, u64), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter_map(Record::result) {
        if r.env == env && r.variant == variant && r.regime == regime {
            cells.entry((r.n, r.level.to_bits())).or_default().push(r.mean_return);
        }
    }
    let ns = ns.unwrap_or_else(|| cells.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().collect());
    let mut levels = levels.unwrap_or_else(|| cells.keys().map(|k| f64::from_bits(k.1)).collect());
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if ns.is_empty() || levels.is_empty() {
        bail!("no matching records for {} {} {}", env.name(), variant.name(), regime.name());
    }
    let missing: Vec<String> = ns
        .iter()
        .flat_map(|&n| levels.iter().map(move |&l| (n, l)))
        .filter(|(n, l)| !cells.contains_key(&(*n, l.to_bits())))
        .map(|(n, l)| format!("(N={n}, tau={l})"))
        .collect();
    if !missing.is_empty() {
        bail!("missing cells: {}", missing.join(", "));
    }
    let mut out = String::from("n");
    for l in &levels {
        out.push_str(&format!(",{l}"));
    }
    out.push('\n');
    for &n in &ns {
        out.push_str(&n.to_string());
        for l in &levels {
            let xs = &cells[&(n, l.to_bits())];
            let v = match kind {
                Kind::Mean => xs.iter().sum::<f64>() / xs.len() as f64,
                Kind::Std => qfil_core::oampi::sample_std(xs)
                    .ok_or_else(|| anyhow!("std undefined for (N={n}, tau={l}): only {} seed", xs.len()))?,
            };
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_plotdata(records: &Path, kind: Kind, env: &str, variant: &str, regime: &str, n: Option<String>, tau: Option<String>, out: Option<PathBuf>) -> Result<(), Failure> {
    let env: EnvKind = usage(env.parse().map_err(|e: String| anyhow!(e)))?;
    let variant: FilterVariant = usage(variant.parse().map_err(|e: String| anyhow!(e)))?;
    let regime: Regime = usage(regime.parse().map_err(|e: String| anyhow!(e)))?;
    let ns = usage(n.as_deref().map(|v| list::<usize>(v, "dataset size")).transpose())?;
    let levels = usage(tau.as_deref().map(|v| list::<f64>(v, "level")).transpose())?;
    let recs = runtime(read_records(records).with_context(|| format!("reading {}", records.display())))?;
    let csv = runtime(plot_matrix(&recs, kind, env, variant, regime, ns, levels))?;
    match out {
        Some(p) => runtime(std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display())))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_diagnose(args: &SpecArgs) -> Result<(), Failure> {
    let spec = usage(resolve(args))?;
    runtime(std::fs::create_dir_all(&spec.out).with_context(|| format!("creating {}", spec.out.display())))?;
    let mut lines = String::new();
    for cfg in expand_seeds(&spec.cells, &spec.seeds) {
        let report = runtime(run_diagnostics(&cfg).map_err(Into::into))?;
        let line = serde_json::json!({
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "env": cfg.env,
            "n": cfg.n,
            "report": report,
        });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    print!("{lines}");
    let path = spec.out.join("diagnostics.jsonl");
    let mut f = runtime(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display())),
    )?;
    runtime(f.write_all(lines.as_bytes()).map_err(Into::into))?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate {
            env,
            n,
            seed,
            out,
            gamma,
            max_episode_steps,
            behavior_greedy,
        } => cmd_generate(&env, n, seed, out, gamma, max_episode_steps, behavior_greedy),
        Command::Run(args) => cmd_run(&args),
        Command::Plotdata {
            records,
            kind,
            env,
            variant,
            regime,
            n,
            tau,
            out,
        } => cmd_plotdata(&records, kind, &env, &variant, &regime, n, tau, out),
        Command::Diagnose(args) => cmd_diagnose(&args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
