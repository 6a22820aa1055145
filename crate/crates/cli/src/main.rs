use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atskd::data::{self, SyntheticSpec};
use atskd::harness::{self, DataSource, ExperimentConfig};
use atskd::scaling::Temperature;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "atskd", version, about = "Knowledge distillation with asymmetric temperature scaling")]
struct Cli {
    /// Print per-row detail in addition to summaries.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Decomposition statistics of one or two logit files.
    Analyze(AnalyzeArgs),
    /// Train teachers and students at the configured loss, without a sweep.
    Distill(RunArgs),
    /// Train teachers and students over the configured temperature grids.
    Sweep(RunArgs),
    /// Randomized checks of the numerical identities; writes a ledger.
    Verify(VerifyArgs),
    /// Write the synthetic train and test sets as text files.
    GenData(GenDataArgs),
    /// Print the built-in desk-scale experiment config.
    DefaultConfig,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// One logit file, or two for agreement statistics.
    #[arg(required = true, num_args = 1..=2)]
    files: Vec<PathBuf>,
    /// Comma-separated uniform temperatures.
    #[arg(long, value_delimiter = ',')]
    temps: Vec<f64>,
    /// Asymmetric temperature pair `tau1,tau2`; repeatable.
    #[arg(long, value_parser = parse_pair)]
    ats: Vec<(f64, f64)>,
    #[arg(long, default_value_t = 5)]
    topk: usize,
    #[arg(long, default_value = "atskd-analysis")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Runs only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "atskd-verify")]
    out: PathBuf,
    /// Exit with status 2 when any check fails.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Takes the synthetic spec from this experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "atskd-data")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `tau1,tau2`, got `{s}`"))?;
    let parse = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}"));
    Ok((parse(a)?, parse(b)?))
}

type CliResult = Result<ExitCode, Box<dyn std::error::Error>>;

fn analyze(args: &AnalyzeArgs, verbose: bool) -> CliResult {
    let mut temps = Vec::new();
    for &t in &args.temps {
        temps.push(Temperature::uniform(t)?);
    }
    for &(a, b) in &args.ats {
        temps.push(Temperature::asymmetric(a, b)?);
    }
    if temps.is_empty() {
        temps.push(Temperature::uniform(1.0)?);
    }
    let datasets = args
        .files
        .iter()
        .map(|p| data::read_logit_file(p))
        .collect::<Result<Vec<_>, _>>()?;
    let report = harness::analyze_logits(&datasets, &temps, args.topk)?;
    for r in &report.rows {
        let s = &r.summary;
        println!(
            "{} {}: n={} violations={} da={:.6e} dv={:.6e} iv={:.6e}",
            r.source, r.temperature, s.count, r.assumption_violations,
            s.derived_avg.mean, s.derived_var.mean, s.inherent_var.mean
        );
    }
    for a in &report.agreement {
        println!(
            "agreement {}: spearman={:.6} kendall={:.6} topk={:.6} l1={:.6}",
            a.temperature, a.stats.spearman, a.stats.kendall, a.stats.topk_overlap, a.stats.l1_distance
        );
    }
    for p in harness::emit_analysis(&report, &args.out)? {
        if verbose {
            println!("wrote {}", p.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, atskd::Error> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::desk_default()),
    }
}

fn run(args: &RunArgs, with_sweep: bool, verbose: bool) -> CliResult {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if !with_sweep {
        cfg.sweep = None;
    }
    cfg.validate()?;
    let exp = if with_sweep {
        harness::sweep(&cfg, args.jobs)?
    } else {
        harness::run_experiment(&cfg, args.jobs)?
    };
    let dir = &cfg.output_dir;
    let teacher_dir = dir.join("teachers");
    for t in &exp.teachers {
        t.save(&teacher_dir)?;
    }
    let written = harness::emit_report(&exp.report, dir)?;
    let r = &exp.report;
    for o in &r.overconfidence {
        println!(
            "seed {}: teacher mean f_y {:.3}, small teacher {:.3}, ratio {:.3}{}",
            o.seed,
            o.teacher_mean_target_logit,
            o.small_teacher_mean_target_logit,
            o.ratio,
            if o.over_confident { "" } else { " (not over-confident)" }
        );
    }
    if verbose {
        for row in &r.rows {
            println!(
                "{} ({}, {}) seed {}: student acc {:.4}",
                row.condition.name(), row.tau1, row.tau2, row.seed, row.student_test_acc
            );
        }
    }
    for c in &cfg.conditions {
        if let Some((t1, t2, acc)) = harness::best_grid_median(r, *c) {
            println!("{}: best ({t1}, {t2}) median student acc {acc:.4}", c.name());
        }
    }
    println!("{} rows, config {}", r.rows.len(), &r.config_hash[..12]);
    if verbose {
        for p in written {
            println!("wrote {}", p.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(args: &VerifyArgs) -> CliResult {
    let ledger = harness::verify_propositions(args.samples, args.seed)?;
    std::fs::create_dir_all(&args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    let path = args.out.join("ledger.csv");
    harness::write_ledger(&ledger, &path)?;
    let mut failed = 0;
    for e in &ledger {
        let status = if e.all_passed() { "ok  " } else { "FAIL" };
        println!("{status} {} {}/{}", e.check_name, e.passed, e.total);
        if !e.all_passed() {
            failed += 1;
        }
    }
    println!("ledger written to {}", path.display());
    if failed > 0 && args.strict {
        eprintln!("{failed} checks failed");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_data(args: &GenDataArgs) -> CliResult {
    let mut spec = match load_config(args.config.as_deref())?.data {
        DataSource::Synthetic(s) => s,
        DataSource::LogitFile(_) => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let (train, test) = data::generate(&spec)?;
    std::fs::create_dir_all(&args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    data::write_labeled_data(&train, &args.out.join("train.csv"))?;
    data::write_labeled_data(&test, &args.out.join("test.csv"))?;
    println!("{} train and {} test samples written to {}", train.len(), test.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Analyze(a) => analyze(a, cli.verbose),
        Command::Distill(a) => run(a, false, cli.verbose),
        Command::Sweep(a) => run(a, true, cli.verbose),
        Command::Verify(a) => verify(a),
        Command::GenData(a) => gen_data(a),
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::desk_default().to_toml_string());
            Ok(ExitCode::SUCCESS)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
