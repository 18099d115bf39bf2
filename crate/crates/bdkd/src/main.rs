#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bdkd::config::ExperimentConfig;
use bdkd::error::{CliError, CliResult};
use bdkd::experiment;
use clap::{Args, Parser, Subcommand};

/// Online distillation experiments with entropy-balanced KL.
///
/// Any config field can be overridden with a flag named after its dotted
/// path, e.g. `--distill.tau 3` or `--teacher.hidden_widths 32,32`.
#[derive(Parser, Debug)]
#[command(name = "bdkd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (repeatable); replaces the config's seed list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory; replaces the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one mode for every seed.
    Train(Common),
    /// 3×3 grid of student × teacher KL directions.
    AblateKl(Common),
    /// Sweep the teacher width for DML and BD-KD.
    CapacitySweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated teacher widths.
        #[arg(long, value_delimiter = ',')]
        widths: Vec<usize>,
    },
    /// BD-KD at several temperatures.
    TempSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated temperatures.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        taus: Vec<f64>,
    },
    /// Recompute calibration tables from a logits dump.
    Calibrate {
        #[arg(long)]
        logits: PathBuf,
        /// Separate label file; defaults to the dump's `label` column.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = bdkd_core::calibration::DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

const KNOWN_FLAGS: &[&str] = &[
    "config", "seed", "out", "widths", "taus", "logits", "labels", "bins", "help", "version",
];

/// Separates config overrides (`--dotted.path value` or `--path=value`) from
/// the arguments clap understands.
type Overrides = Vec<(String, String)>;

fn split_overrides(args: Vec<String>) -> CliResult<(Vec<String>, Overrides)> {
    let mut plain = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            plain.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if name.is_empty() || KNOWN_FLAGS.contains(&name.as_str()) {
            plain.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?,
        };
        overrides.push((name, value));
    }
    Ok((plain, overrides))
}

fn resolve(common: &Common, overrides: &[(String, String)]) -> CliResult<(ExperimentConfig, PathBuf)> {
    let base = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(overrides)?;
    if !common.seeds.is_empty() {
        cfg.seeds = common.seeds.clone();
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out_dir);
    Ok((cfg, out))
}

fn print_runs(runs: &[experiment::RunSummary]) {
    for r in runs {
        println!(
            "{} seed={} mode={} teacher_acc={:.4} student_acc={:.4} student_ece={:.4} -> {}",
            r.run_id,
            r.seed,
            r.mode.name(),
            r.teacher_accuracy,
            r.student_accuracy,
            r.student_ece,
            r.dir.display()
        );
    }
}

fn dispatch(cmd: Command, overrides: &[(String, String)]) -> CliResult<()> {
    if !overrides.is_empty() && matches!(cmd, Command::Calibrate { .. }) {
        return Err(CliError::Usage(format!("unknown flag --{}", overrides[0].0)));
    }
    match cmd {
        Command::Train(common) => {
            let (cfg, out) = resolve(&common, overrides)?;
            print_runs(&experiment::cmd_train(&cfg, &out)?);
        }
        Command::AblateKl(common) => {
            let (cfg, out) = resolve(&common, overrides)?;
            let grid = experiment::cmd_ablate_kl(&cfg, &out)?;
            for (name, m) in [("student", &grid.student), ("teacher", &grid.teacher)] {
                println!("{name} accuracy (rows: student_kl forward/reverse/symmetric, cols: teacher_kl)");
                for row in m {
                    println!(
                        "  {}",
                        row.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" ")
                    );
                }
            }
        }
        Command::CapacitySweep { common, widths } => {
            let (cfg, out) = resolve(&common, overrides)?;
            let widths = if widths.is_empty() {
                cfg.capacity_widths.clone()
            } else {
                widths
            };
            for r in experiment::cmd_capacity_sweep(&cfg, &widths, &out)? {
                println!(
                    "{} width={} params={} student_acc={:.4} teacher_acc={:.4}",
                    r.method.name(),
                    r.teacher_width,
                    r.teacher_param_count,
                    r.student_acc,
                    r.teacher_acc
                );
            }
        }
        Command::TempSweep { common, taus } => {
            let taus_given = !taus.is_empty();
            if taus_given {
                if let Some(t) = taus.iter().find(|&&t| !(t > 0.0)) {
                    return Err(CliError::Usage(format!("temperatures must be positive, got {t}")));
                }
            }
            let (cfg, out) = resolve(&common, overrides)?;
            let taus = if taus_given { taus } else { cfg.taus.clone() };
            for r in experiment::cmd_temp_sweep(&cfg, &taus, &out)? {
                println!(
                    "tau={} student_acc={:.4} teacher_acc={:.4}",
                    r.tau, r.student_acc, r.teacher_acc
                );
            }
        }
        Command::Calibrate {
            logits,
            labels,
            bins,
            out,
        } => {
            let report = experiment::cmd_calibrate(&logits, labels.as_deref(), bins, Path::new(&out))?;
            println!(
                "ece={} accuracy={} mean_confidence={} n={}",
                report.ece, report.accuracy, report.mean_confidence, report.num_samples
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let (plain, overrides) = match split_overrides(args) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(plain);
    match dispatch(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
