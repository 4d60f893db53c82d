//! `rlsd-lab`: training runs, the theory checks, ablations, CSV reports and
//! suite generation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rlsd_core::report::{export_credit_heatmap_data, export_series, Series};
use rlsd_core::trainer::{CreditTrace, RunLog};
use rlsd_core::{
    make_suite, write_suite, LabError, Method, MetricRecord, OpsdVariant, SuiteConfig, TheoryConfig, TrainerConfig,
};

const EXIT_USAGE: u8 = 1;
const EXIT_CHECK: u8 = 2;
const EXIT_IO: u8 = 3;
const SEED_ENV: &str = "RLSD_LAB_SEED";

#[derive(Parser, Debug)]
#[command(name = "rlsd-lab", version, about = "Desk-scale lab for token-level credit from self-distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Seed override; takes precedence over RLSD_LAB_SEED and the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one method and write the run log and CSV series.
    Train(Common),
    /// Run every theory check and write a JSON report.
    Theory(Common),
    /// Distillation-variant pilot and method comparison.
    Ablate(Common),
    /// Convert a run directory into CSV series.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
    },
    /// Generate a suite file.
    GenSuite(Common),
}

enum Failure {
    Usage(String),
    Check(String),
    Io(String),
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Io { .. } => Failure::Io(e.to_string()),
            LabError::Parse { .. }
            | LabError::Config(_)
            | LabError::Json(_)
            | LabError::UnknownFamily(_)
            | LabError::UnknownSeries(_)
            | LabError::InvalidArgument(_) => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(EXIT_CHECK)
        }
        Err(Failure::Io(m)) => {
            eprintln!("I/O error: {m}");
            ExitCode::from(EXIT_IO)
        }
    }
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Train(c) => train(&c),
        Command::Theory(c) => theory(&c),
        Command::Ablate(c) => ablate(&c),
        Command::Report { common, run } => report(&common, &run),
        Command::GenSuite(c) => gen_suite(&c),
    }
}

/// `--seed`, then `RLSD_LAB_SEED`, then the config's own seed.
fn seed_override(c: &Common) -> Result<Option<u64>, Failure> {
    if c.seed.is_some() {
        return Ok(c.seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, body: &str) -> Outcome {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, body).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

/// Prefixes configuration errors with the file name.
fn in_file(path: &Path, e: LabError) -> Failure {
    match Failure::from(e) {
        Failure::Usage(m) => Failure::Usage(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn trainer_config(c: &Common) -> Result<TrainerConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => TrainerConfig::from_json(&read(p)?).map_err(|e| in_file(p, e))?,
        None => TrainerConfig::default(),
    };
    if let Some(seed) = seed_override(c)? {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_series(dir: &Path, records: &[MetricRecord], credits: &[CreditTrace]) -> Outcome {
    for s in Series::ALL {
        write(&dir.join(format!("{}.csv", s.name())), &export_series(records, s))?;
    }
    write(&dir.join("credit_heatmap.csv"), &export_credit_heatmap_data(credits))
}

fn train(c: &Common) -> Outcome {
    let cfg = trainer_config(c)?;
    let log = rlsd_core::run(&cfg)?;
    log.persist(&c.out)?;
    write_series(&c.out.join("series"), &log.records, &log.credit_traces)?;
    let last = log.records.last().expect("initial record");
    println!(
        "{} seed {}: {} steps, train accuracy {}, held-out accuracy {}, probe {:.4}",
        cfg.method.name(),
        cfg.seed,
        cfg.steps,
        fmt_opt(last.train_accuracy),
        fmt_opt(last.eval_accuracy),
        last.probe_score
    );
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.4}"))
}

fn theory(c: &Common) -> Outcome {
    let mut cfg = match &c.config {
        Some(p) => serde_json::from_str::<TheoryConfig>(&read(p)?).map_err(|e| {
            Failure::Usage(format!("{}:{}: {e}", p.display(), e.line()))
        })?,
        None => TheoryConfig::default(),
    };
    if let Some(seed) = seed_override(c)? {
        cfg.seed = seed;
        cfg.trainer.seed = seed;
    }
    cfg.trainer.validate().map_err(Failure::from)?;
    let rep = rlsd_core::theory::run_suite(&cfg)?;
    write(&c.out.join("theory_report.json"), &rep.to_json())?;
    print!("{}", rep.summary());
    if rep.passed {
        Ok(())
    } else {
        Err(Failure::Check("one or more theory checks failed".into()))
    }
}

/// Named ablation arm.
struct Arm {
    name: &'static str,
    method: Method,
    variant: OpsdVariant,
}

const PILOT: [Arm; 5] = [
    Arm { name: "opsd_full", method: Method::Opsd, variant: OpsdVariant::Full },
    Arm { name: "opsd_teacher_top1", method: Method::Opsd, variant: OpsdVariant::TeacherTop1 },
    Arm { name: "opsd_student_top1", method: Method::Opsd, variant: OpsdVariant::StudentTop1 },
    Arm { name: "opd", method: Method::Opd, variant: OpsdVariant::Full },
    Arm { name: "grpo", method: Method::Grpo, variant: OpsdVariant::Full },
];

const COMPARISON: [Arm; 3] = [
    Arm { name: "combo", method: Method::Combo, variant: OpsdVariant::Full },
    Arm { name: "sdpo", method: Method::Sdpo, variant: OpsdVariant::Full },
    Arm { name: "rlsd", method: Method::Rlsd, variant: OpsdVariant::Full },
];

fn ablate(c: &Common) -> Outcome {
    let base = trainer_config(c)?;
    let mut summary = String::from(
        "# schema: rlsd-lab-csv/1 ablation\narm,method,variant,final_train_accuracy,final_eval_accuracy,peak_eval_accuracy,peak_step,first_kl,last_kl,first_probe,last_probe\n",
    );
    for arm in PILOT.iter().chain(&COMPARISON) {
        let cfg = TrainerConfig {
            method: arm.method,
            opsd_variant: arm.variant,
            ..base.clone()
        };
        let log = rlsd_core::run(&cfg)?;
        let dir = c.out.join(arm.name);
        log.persist(&dir)?;
        write_series(&dir.join("series"), &log.records, &log.credit_traces)?;
        summary.push_str(&summary_row(arm, &log));
        println!("{} done", arm.name);
    }
    write(&c.out.join("summary.csv"), &summary)
}

fn summary_row(arm: &Arm, log: &RunLog) -> String {
    use rlsd_core::report::format_sig as f;
    let recs = &log.records;
    let last = recs.last().expect("initial record");
    let (peak_step, peak) = recs
        .iter()
        .filter_map(|r| r.eval_accuracy.map(|a| (r.step, a)))
        .fold((0, f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best });
    let kls: Vec<f64> = recs.iter().filter_map(|r| r.kl).collect();
    let opt = |x: Option<f64>| x.map(f).unwrap_or_default();
    format!(
        "{},{},{:?},{},{},{},{},{},{},{},{}\n",
        arm.name,
        arm.method.name(),
        arm.variant,
        opt(last.train_accuracy),
        opt(last.eval_accuracy),
        f(peak),
        peak_step,
        opt(kls.first().copied()),
        opt(kls.last().copied()),
        f(recs[0].probe_score),
        f(last.probe_score)
    )
}

fn report(c: &Common, run: &Path) -> Outcome {
    let records = RunLog::load_records(&run.join("metrics.jsonl"))?;
    let credits_path = run.join("credits.jsonl");
    let credits = if credits_path.exists() {
        RunLog::load_credits(&credits_path)?
    } else {
        Vec::new()
    };
    write_series(&c.out, &records, &credits)?;
    println!("{} records, {} credit traces -> {}", records.len(), credits.len(), c.out.display());
    Ok(())
}

fn gen_suite(c: &Common) -> Outcome {
    let mut cfg = match &c.config {
        Some(p) => serde_json::from_str::<SuiteConfig>(&read(p)?)
            .map_err(|e| Failure::Usage(format!("{}:{}: {e}", p.display(), e.line())))?,
        None => TrainerConfig::default().suite,
    };
    if let Some(seed) = seed_override(c)? {
        cfg.seed = seed;
    }
    let suite = make_suite(&cfg)?;
    let path = c.out.join("suite.txt");
    write(&path, &write_suite(&suite))?;
    println!("{} instances -> {}", suite.instances.len(), path.display());
    Ok(())
}
