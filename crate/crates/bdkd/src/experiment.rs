//! The commands behind the CLI. Each one is a pure function of its config
//! and seeds to the files it writes.

use std::path::{Path, PathBuf};

use bdkd_core::calibration::{self, CalibrationReport};
use bdkd_core::data::{self, Dataset, Normalizer};
use bdkd_core::objectives::{StudentKl, TeacherKl};
use bdkd_core::training::{self, Mode, RunRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataKind, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::io;

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "BDKD_THREADS";

/// Generates (or loads), splits and z-scores the data for one seed.
/// Normalisation statistics come from the training split only.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> CliResult<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    let data_seed = d.seed.wrapping_add(seed);
    let full = match d.kind {
        DataKind::Spirals => data::gen_spirals(d.classes, d.n_per_class, d.noise, data_seed)?,
        DataKind::Blobs => data::gen_gaussian_blobs(d.classes, d.n_per_class, d.dim, d.spread, data_seed)?,
        DataKind::Csv => io::load_csv(Path::new(&d.path), &d.label_column)?,
    };
    let (train, val) = data::split(&full, d.val_fraction, seed)?;
    let norm = Normalizer::fit(&train);
    Ok((norm.apply(&train)?, norm.apply(&val)?))
}

/// Contents of `record.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDocument {
    pub run_id: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub record: RunRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub mode: Mode,
    pub teacher_accuracy: f64,
    pub student_accuracy: f64,
    pub student_ece: f64,
    pub teacher_param_count: usize,
    pub dir: PathBuf,
}

/// Trains one seed and writes `<out>/<run-id>/{record.json, <role>.ckpt,
/// logits_val.csv, calibration.csv, calibration.json}`.
pub fn execute_run(cfg: &ExperimentConfig, seed: u64, out: &Path) -> CliResult<RunSummary> {
    let (train, val) = prepare_data(cfg, seed)?;
    let outcome = training::run(&cfg.run_spec(seed), &train, &val)?;
    let run_id = cfg.run_id(seed);
    let dir = out.join(&run_id);
    let student = cfg.mode.student_index();

    for (role, net) in outcome.record.roles.iter().zip(&outcome.networks) {
        io::save_checkpoint(&dir.join(format!("{role}.ckpt")), net)?;
    }
    io::write_logits(&dir.join("logits_val.csv"), &outcome.val_logits[student], val.labels())?;
    io::write_calibration(&dir, &outcome.calibration)?;
    let summary = RunSummary {
        run_id: run_id.clone(),
        seed,
        mode: cfg.mode,
        teacher_accuracy: outcome.record.final_val_accuracy[0],
        student_accuracy: outcome.record.final_val_accuracy[student],
        student_ece: outcome.record.final_student_ece,
        teacher_param_count: outcome.record.param_counts[0],
        dir: dir.clone(),
    };
    let doc = RunDocument {
        run_id,
        seed,
        config: cfg.clone(),
        record: outcome.record,
    };
    io::write_json(&dir.join("record.json"), &doc)?;
    Ok(summary)
}

fn pool() -> CliResult<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let n: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Usage(e.to_string()))
}

/// Runs every `(config, seed)` job, in parallel, returning summaries in job order.
pub fn execute_all(jobs: &[(ExperimentConfig, u64)], out: &Path) -> CliResult<Vec<RunSummary>> {
    let results: Vec<CliResult<RunSummary>> = pool()?.install(|| {
        jobs.par_iter()
            .map(|(cfg, seed)| execute_run(cfg, *seed, out))
            .collect()
    });
    results.into_iter().collect()
}

fn jobs_for(cfg: &ExperimentConfig) -> Vec<(ExperimentConfig, u64)> {
    cfg.seeds.iter().map(|&s| (cfg.clone(), s)).collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

fn fmt_row(fields: &[String]) -> String {
    let mut line = fields.join(",");
    line.push('\n');
    line
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<RunSummary>> {
    execute_all(&jobs_for(cfg), out)
}

pub const ABLATION_STUDENT: [StudentKl; 3] = [StudentKl::Forward, StudentKl::Reverse, StudentKl::Symmetric];
pub const ABLATION_TEACHER: [TeacherKl; 3] = [TeacherKl::Forward, TeacherKl::Reverse, TeacherKl::Symmetric];

/// Mean validation accuracies; `student[i][j]` is for student selector `i`
/// and teacher selector `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub student_kl: Vec<StudentKl>,
    pub teacher_kl: Vec<TeacherKl>,
    pub seeds: Vec<u64>,
    pub student: Vec<Vec<f64>>,
    pub teacher: Vec<Vec<f64>>,
}

fn kebab<T: Serialize>(x: &T) -> String {
    serde_json::to_value(x)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

/// The configuration of one ablation cell: unit weights, no entropy balancing.
pub fn ablation_config(cfg: &ExperimentConfig, s: StudentKl, t: TeacherKl) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.mode = Mode::BdKd;
    c.distill.alpha_t = 1.0;
    c.distill.alpha_s = 1.0;
    c.distill.beta_t = 1.0;
    c.distill.beta_s = 1.0;
    c.distill.student_kl = s;
    c.distill.teacher_kl = t;
    c
}

/// Student × teacher KL-direction grid; writes `ablate_kl.csv` and `ablate_kl.json`.
pub fn cmd_ablate_kl(cfg: &ExperimentConfig, out: &Path) -> CliResult<AblationGrid> {
    let mut jobs = Vec::new();
    for s in ABLATION_STUDENT {
        for t in ABLATION_TEACHER {
            jobs.extend(jobs_for(&ablation_config(cfg, s, t)));
        }
    }
    let runs = execute_all(&jobs, out)?;
    let k = cfg.seeds.len();
    let mut grid = AblationGrid {
        student_kl: ABLATION_STUDENT.to_vec(),
        teacher_kl: ABLATION_TEACHER.to_vec(),
        seeds: cfg.seeds.clone(),
        student: vec![vec![0.0; 3]; 3],
        teacher: vec![vec![0.0; 3]; 3],
    };
    let mut csv = fmt_row(&["student_kl", "teacher_kl", "student_acc", "teacher_acc"].map(String::from));
    for (cell, chunk) in runs.chunks(k).enumerate() {
        let (i, j) = (cell / 3, cell % 3);
        grid.student[i][j] = mean(chunk.iter().map(|r| r.student_accuracy));
        grid.teacher[i][j] = mean(chunk.iter().map(|r| r.teacher_accuracy));
        csv += &fmt_row(&[
            kebab(&ABLATION_STUDENT[i]),
            kebab(&ABLATION_TEACHER[j]),
            grid.student[i][j].to_string(),
            grid.teacher[i][j].to_string(),
        ]);
    }
    io::write_atomic(&out.join("ablate_kl.csv"), csv.as_bytes())?;
    io::write_json(&out.join("ablate_kl.json"), &grid)?;
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub method: Mode,
    pub teacher_width: usize,
    pub teacher_param_count: usize,
    pub student_acc: f64,
    pub teacher_acc: f64,
}

/// Sweeps the teacher width (every hidden layer set to `w`) for DML and
/// BD-KD with the student fixed; writes `capacity_sweep.csv`.
pub fn cmd_capacity_sweep(cfg: &ExperimentConfig, widths: &[usize], out: &Path) -> CliResult<Vec<CapacityRow>> {
    if widths.len() < 2 {
        return Err(CliError::Usage("capacity-sweep needs at least two widths".into()));
    }
    if widths.contains(&0) {
        return Err(CliError::Usage("widths must be positive".into()));
    }
    let depth = cfg.teacher.hidden_widths.len().max(1);
    let methods = [Mode::Dml, Mode::BdKd];
    let mut jobs = Vec::new();
    for m in methods {
        for &w in widths {
            let mut c = cfg.clone();
            c.mode = m;
            c.teacher.hidden_widths = vec![w; depth];
            jobs.extend(jobs_for(&c));
        }
    }
    let runs = execute_all(&jobs, out)?;
    let k = cfg.seeds.len();
    let mut rows = Vec::new();
    let mut csv = fmt_row(
        &[
            "method",
            "teacher_width",
            "teacher_param_count",
            "student_acc",
            "teacher_acc",
        ]
        .map(String::from),
    );
    for (cell, chunk) in runs.chunks(k).enumerate() {
        let row = CapacityRow {
            method: methods[cell / widths.len()],
            teacher_width: widths[cell % widths.len()],
            teacher_param_count: chunk[0].teacher_param_count,
            student_acc: mean(chunk.iter().map(|r| r.student_accuracy)),
            teacher_acc: mean(chunk.iter().map(|r| r.teacher_accuracy)),
        };
        csv += &fmt_row(&[
            row.method.name().to_string(),
            row.teacher_width.to_string(),
            row.teacher_param_count.to_string(),
            row.student_acc.to_string(),
            row.teacher_acc.to_string(),
        ]);
        rows.push(row);
    }
    io::write_atomic(&out.join("capacity_sweep.csv"), csv.as_bytes())?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempRow {
    pub tau: f64,
    pub student_acc: f64,
    pub teacher_acc: f64,
}

/// BD-KD at each temperature; writes `temp_sweep.csv`.
pub fn cmd_temp_sweep(cfg: &ExperimentConfig, taus: &[f64], out: &Path) -> CliResult<Vec<TempRow>> {
    if taus.is_empty() {
        return Err(CliError::Usage("temp-sweep needs at least one temperature".into()));
    }
    if let Some(t) = taus.iter().find(|&&t| !(t > 0.0 && t.is_finite())) {
        return Err(CliError::Usage(format!("temperatures must be positive, got {t}")));
    }
    let mut jobs = Vec::new();
    for &tau in taus {
        let mut c = cfg.clone();
        c.mode = Mode::BdKd;
        c.distill.tau = tau;
        jobs.extend(jobs_for(&c));
    }
    let runs = execute_all(&jobs, out)?;
    let k = cfg.seeds.len();
    let mut csv = fmt_row(&["tau", "student_acc", "teacher_acc"].map(String::from));
    let mut rows = Vec::new();
    for (chunk, &tau) in runs.chunks(k).zip(taus) {
        let row = TempRow {
            tau,
            student_acc: mean(chunk.iter().map(|r| r.student_accuracy)),
            teacher_acc: mean(chunk.iter().map(|r| r.teacher_accuracy)),
        };
        csv += &fmt_row(&[
            tau.to_string(),
            row.student_acc.to_string(),
            row.teacher_acc.to_string(),
        ]);
        rows.push(row);
    }
    io::write_atomic(&out.join("temp_sweep.csv"), csv.as_bytes())?;
    Ok(rows)
}

/// Recomputes the calibration report of a logits dump and writes
/// `calibration.csv` / `calibration.json` into `out`.
pub fn cmd_calibrate(
    logits_path: &Path,
    labels_path: Option<&Path>,
    bins: usize,
    out: &Path,
) -> CliResult<CalibrationReport> {
    if bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let (logits, embedded) = io::read_logits(logits_path)?;
    let labels = match (labels_path, embedded) {
        (Some(p), _) => io::read_labels(p)?,
        (None, Some(l)) => l,
        (None, None) => {
            return Err(CliError::Usage(format!(
                "{} has no label column; pass --labels",
                logits_path.display()
            )))
        }
    };
    if labels.len() != logits.rows() {
        return Err(CliError::Data(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let report = calibration::bin_predictions(&logits, &labels, bins)?;
    io::write_calibration(out, &report)?;
    Ok(report)
}
