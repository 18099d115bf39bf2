//! SGD with momentum, step-decay schedules and the training loops: online
//! co-training of a teacher/student pair, three-network co-training, offline
//! distillation from a frozen teacher and plain cross-entropy training.
//!
//! Within a co-training step every gradient is computed from the parameters
//! as they were before the step; only then are the optimizers applied, so
//! the order of the updates is irrelevant.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::calibration::{self, CalibrationReport};
use crate::data::{Batch, Dataset};
use crate::error::{param_err, Error, Result};
use crate::models::{MlpSpec, Network};
use crate::objectives::{self, DistillConfig, LossBreakdown, LossSummary, StudentKl, TeacherKl};
use crate::tensor::{Tape, Tensor};

/// Learning-rate schedule and optimizer constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub base_lr: f64,
    pub momentum: f64,
    /// Epochs (0-based) at which the rate is multiplied by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub weight_decay: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 0.05,
            momentum: 0.9,
            milestones: vec![30, 45],
            decay_factor: 0.1,
            weight_decay: 0.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(param_err("base_lr", format!("must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(param_err(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        if !(self.decay_factor > 0.0) {
            return Err(param_err("decay_factor", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(param_err("weight_decay", "must be non-negative"));
        }
        Ok(())
    }

    /// `base_lr · decay_factor^(number of milestones ≤ epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        (0..passed).fold(self.base_lr, |lr, _| lr * self.decay_factor)
    }
}

/// Heavy-ball momentum state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<Vec<f64>>,
    pub lr: f64,
    pub schedule: Schedule,
}

impl OptimState {
    pub fn new(params: &[Tensor], schedule: Schedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            lr: schedule.base_lr,
            schedule,
        })
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = self.schedule.lr_at(epoch);
    }
}

/// `v ← μ·v + g (+ λ·p)`, `p ← p − lr·v`, then clears the gradients.
pub fn sgd_step(params: &mut [Tensor], state: &mut OptimState) -> Result<()> {
    if params.len() != state.velocity.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} tensors, got {}",
            state.velocity.len(),
            params.len()
        )));
    }
    for (k, p) in params.iter().enumerate() {
        if p.requires_grad() && p.grad().is_none() {
            return Err(Error::Contract(format!("parameter {k} has no gradient")));
        }
    }
    let (mu, lr, wd) = (state.schedule.momentum, state.lr, state.schedule.weight_decay);
    for (p, vel) in params.iter_mut().zip(&mut state.velocity) {
        if !p.requires_grad() {
            continue;
        }
        let g = p.grad().expect("checked above").to_vec();
        let data = p.data_mut();
        for ((w, v), g) in data.iter_mut().zip(vel.iter_mut()).zip(g) {
            let g = if wd != 0.0 { g + wd * *w } else { g };
            *v = mu * *v + g;
            *w -= lr * *v;
        }
        p.zero_grad();
    }
    Ok(())
}

/// Mean losses over the batches of one epoch, one entry per network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub losses: Vec<LossSummary>,
    /// Fraction of student samples whose reverse KL term carried `v`
    /// (balanced selector only).
    pub delta_r_fraction: Option<f64>,
}

#[derive(Default)]
struct Accum {
    sums: Vec<LossSummary>,
    batches: usize,
    reverse_hits: f64,
    delta_samples: usize,
}

impl Accum {
    fn add(&mut self, tape: &Tape, losses: &[&LossBreakdown]) {
        if self.sums.is_empty() {
            self.sums = vec![LossSummary::default(); losses.len()];
        }
        for (s, l) in self.sums.iter_mut().zip(losses) {
            let v = l.summary(tape);
            s.total += v.total;
            s.ce += v.ce;
            s.forward_kl += v.forward_kl;
            s.reverse_kl += v.reverse_kl;
        }
        self.batches += 1;
    }

    fn add_deltas(&mut self, l: &LossBreakdown) {
        for w in &l.deltas {
            self.reverse_hits += w.reverse_fraction() * w.len() as f64;
            self.delta_samples += w.len();
        }
    }

    fn finish(self) -> EpochStats {
        let n = self.batches.max(1) as f64;
        EpochStats {
            losses: self
                .sums
                .into_iter()
                .map(|s| LossSummary {
                    total: s.total / n,
                    ce: s.ce / n,
                    forward_kl: s.forward_kl / n,
                    reverse_kl: s.reverse_kl / n,
                })
                .collect(),
            delta_r_fraction: (self.delta_samples > 0).then(|| self.reverse_hits / self.delta_samples as f64),
        }
    }
}

/// One epoch of online co-training with the teacher/student objectives of
/// `cfg`. The teacher is the first network in every returned vector.
pub fn cotrain_epoch(
    teacher: &mut Network,
    student: &mut Network,
    batches: &[Batch],
    cfg: &DistillConfig,
    opt_t: &mut OptimState,
    opt_s: &mut OptimState,
) -> Result<EpochStats> {
    let mut acc = Accum::default();
    let mut tape = Tape::new();
    for batch in batches {
        tape.clear();
        let x = tape.constant(batch.x.clone());
        let ft = teacher.forward(&mut tape, x)?;
        let fs = student.forward(&mut tape, x)?;
        let lt = objectives::bdkd_teacher_loss(&mut tape, ft.logits, fs.logits, &batch.labels, cfg)?;
        let ls = objectives::bdkd_student_loss(&mut tape, fs.logits, ft.logits, &batch.labels, cfg)?;
        tape.backward(lt.total)?;
        tape.backward(ls.total)?;
        teacher.pull_grads(&tape, &ft)?;
        student.pull_grads(&tape, &fs)?;
        sgd_step(teacher.params_mut(), opt_t)?;
        sgd_step(student.params_mut(), opt_s)?;
        acc.add(&tape, &[&lt, &ls]);
        acc.add_deltas(&ls);
    }
    Ok(acc.finish())
}

/// Arrangement of a three-network run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MultiLayout {
    /// `[teacher, student1, student2]`
    OneTeacherTwoStudents,
    /// `[teacher1, teacher2, student]`
    TwoTeachersOneStudent,
}

/// One epoch of three-network co-training.
pub fn multinet_epoch(
    nets: &mut [Network; 3],
    batches: &[Batch],
    cfg: &DistillConfig,
    layout: MultiLayout,
    opts: &mut [OptimState; 3],
) -> Result<EpochStats> {
    let mut acc = Accum::default();
    let mut tape = Tape::new();
    for batch in batches {
        tape.clear();
        let x = tape.constant(batch.x.clone());
        let mut fwd = Vec::with_capacity(3);
        for net in nets.iter() {
            fwd.push(net.forward(&mut tape, x)?);
        }
        let (a, b, c) = (fwd[0].logits, fwd[1].logits, fwd[2].logits);
        let losses = match layout {
            MultiLayout::OneTeacherTwoStudents => {
                objectives::multinet_losses_1t2s(&mut tape, a, b, c, &batch.labels, cfg)?
            }
            MultiLayout::TwoTeachersOneStudent => {
                objectives::multinet_losses_2t1s(&mut tape, a, b, c, &batch.labels, cfg)?
            }
        };
        for l in &losses {
            tape.backward(l.total)?;
        }
        for (net, f) in nets.iter_mut().zip(&fwd) {
            net.pull_grads(&tape, f)?;
        }
        for (net, opt) in nets.iter_mut().zip(opts.iter_mut()) {
            sgd_step(net.params_mut(), opt)?;
        }
        acc.add(&tape, &[&losses[0], &losses[1], &losses[2]]);
        let student = match layout {
            MultiLayout::OneTeacherTwoStudents => &losses[1],
            MultiLayout::TwoTeachersOneStudent => &losses[2],
        };
        acc.add_deltas(student);
    }
    Ok(acc.finish())
}

/// One epoch of offline distillation: the student minimises the vanilla KD
/// loss against a teacher whose parameters are frozen.
pub fn offline_distill_epoch(
    frozen_teacher: &Network,
    student: &mut Network,
    batches: &[Batch],
    alpha: f64,
    tau: f64,
    opt_s: &mut OptimState,
) -> Result<EpochStats> {
    if frozen_teacher.params().iter().any(Tensor::requires_grad) {
        return Err(Error::Contract(
            "offline distillation needs a frozen teacher".to_string(),
        ));
    }
    let mut acc = Accum::default();
    let mut tape = Tape::new();
    for batch in batches {
        tape.clear();
        let x = tape.constant(batch.x.clone());
        let ft = frozen_teacher.forward(&mut tape, x)?;
        let fs = student.forward(&mut tape, x)?;
        let ls = objectives::vanilla_kd_loss(&mut tape, fs.logits, ft.logits, &batch.labels, alpha, tau)?;
        tape.backward(ls.total)?;
        student.pull_grads(&tape, &fs)?;
        sgd_step(student.params_mut(), opt_s)?;
        acc.add(&tape, &[&ls]);
    }
    Ok(acc.finish())
}

/// One epoch of plain cross-entropy training of a single network.
pub fn scratch_epoch(net: &mut Network, batches: &[Batch], opt: &mut OptimState) -> Result<EpochStats> {
    let mut acc = Accum::default();
    let mut tape = Tape::new();
    for batch in batches {
        tape.clear();
        let x = tape.constant(batch.x.clone());
        let f = net.forward(&mut tape, x)?;
        let ce = objectives::cross_entropy(&mut tape, f.logits, &batch.labels)?;
        let value = tape.value(ce)[0];
        if !value.is_finite() {
            return Err(Error::NonFinite {
                term: "cross-entropy".to_string(),
            });
        }
        tape.backward(ce)?;
        net.pull_grads(&tape, &f)?;
        sgd_step(net.params_mut(), opt)?;
        acc.sums.resize(1, LossSummary::default());
        acc.sums[0].total += value;
        acc.sums[0].ce += value;
        acc.batches += 1;
    }
    Ok(acc.finish())
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = calibration::predictions(logits)
        .iter()
        .zip(labels)
        .filter(|((pred, _), &y)| *pred == y)
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub logits: Tensor,
}

pub fn evaluate(net: &Network, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".to_string()));
    }
    let logits = net.predict(dataset.features())?;
    Ok(Evaluation {
        accuracy: accuracy(&logits, dataset.labels()),
        logits,
    })
}

/// Training regime of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "scratch")]
    Scratch,
    #[serde(rename = "vanilla-kd")]
    VanillaKd,
    #[serde(rename = "dml")]
    Dml,
    #[serde(rename = "bd-kd")]
    BdKd,
    #[serde(rename = "1t2s")]
    OneTeacherTwoStudents,
    #[serde(rename = "2t1s")]
    TwoTeachersOneStudent,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Scratch => "scratch",
            Mode::VanillaKd => "vanilla-kd",
            Mode::Dml => "dml",
            Mode::BdKd => "bd-kd",
            Mode::OneTeacherTwoStudents => "1t2s",
            Mode::TwoTeachersOneStudent => "2t1s",
        }
    }

    pub fn roles(self) -> &'static [&'static str] {
        match self {
            Mode::OneTeacherTwoStudents => &["teacher", "student1", "student2"],
            Mode::TwoTeachersOneStudent => &["teacher1", "teacher2", "student"],
            _ => &["teacher", "student"],
        }
    }

    /// Index of the network whose calibration is reported.
    pub fn student_index(self) -> usize {
        match self {
            Mode::TwoTeachersOneStudent => 2,
            _ => 1,
        }
    }
}

impl core::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Mode::Scratch,
            Mode::VanillaKd,
            Mode::Dml,
            Mode::BdKd,
            Mode::OneTeacherTwoStudents,
            Mode::TwoTeachersOneStudent,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| param_err("mode", format!("unknown mode `{s}`")))
    }
}

/// Everything that determines a run besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub mode: Mode,
    pub distill: DistillConfig,
    pub teacher_widths: Vec<usize>,
    pub student_widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    /// `α` of the offline KD loss.
    pub vanilla_alpha: f64,
    pub calibration_bins: usize,
    pub seed: u64,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            mode: Mode::BdKd,
            distill: DistillConfig::default(),
            teacher_widths: vec![64, 64],
            student_widths: vec![8],
            epochs: 60,
            batch_size: 64,
            schedule: Schedule::default(),
            vanilla_alpha: 0.5,
            calibration_bins: calibration::DEFAULT_BINS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `pretrain` (frozen-teacher preparation), `distill` or `train`.
    pub phase: String,
    pub lr: f64,
    pub losses: Vec<LossSummary>,
    pub val_accuracy: Vec<f64>,
    pub student_val_ece: f64,
    pub delta_r_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub seed: u64,
    pub roles: Vec<String>,
    pub param_counts: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    pub final_val_accuracy: Vec<f64>,
    pub final_student_ece: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub networks: Vec<Network>,
    pub val_logits: Vec<Tensor>,
    pub calibration: CalibrationReport,
}

/// SplitMix64 finaliser, used to derive independent seeds from a run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 1 << 20;

/// Seed of the batch order of `epoch`; shared by every network of a run.
pub fn epoch_seed(run_seed: u64, epoch: usize) -> u64 {
    derive_seed(run_seed, SHUFFLE_STREAM + epoch as u64)
}

/// Architecture of network `role` for `spec.mode`.
pub fn role_spec(spec: &RunSpec, role: usize, input_dim: usize, num_classes: usize) -> MlpSpec {
    let widths = match (spec.mode, role) {
        (Mode::OneTeacherTwoStudents, 0) => &spec.teacher_widths,
        (Mode::OneTeacherTwoStudents, _) => &spec.student_widths,
        (Mode::TwoTeachersOneStudent, 2) => &spec.student_widths,
        (Mode::TwoTeachersOneStudent, _) => &spec.teacher_widths,
        (_, 0) => &spec.teacher_widths,
        _ => &spec.student_widths,
    };
    MlpSpec::new(input_dim, widths, num_classes, derive_seed(spec.seed, role as u64 + 1))
}

fn check_run(spec: &RunSpec, train: &Dataset, val: &Dataset) -> Result<()> {
    spec.distill.validate()?;
    spec.schedule.validate()?;
    if spec.epochs == 0 {
        return Err(param_err("epochs", "must be positive"));
    }
    if spec.batch_size == 0 {
        return Err(param_err("batch_size", "must be positive"));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("train and validation splits must be non-empty".to_string()));
    }
    if train.dim() != val.dim() || train.num_classes() != val.num_classes() {
        return Err(Error::Data("train and validation splits disagree on shape".to_string()));
    }
    Ok(())
}

struct Evaluated {
    accuracy: Vec<f64>,
    logits: Vec<Tensor>,
    calibration: CalibrationReport,
}

fn eval_all(nets: &[Network], val: &Dataset, student: usize, bins: usize) -> Result<Evaluated> {
    let mut accuracy = Vec::with_capacity(nets.len());
    let mut logits = Vec::with_capacity(nets.len());
    for net in nets {
        let e = evaluate(net, val)?;
        accuracy.push(e.accuracy);
        logits.push(e.logits);
    }
    let calibration = calibration::bin_predictions(&logits[student], val.labels(), bins)?;
    Ok(Evaluated {
        accuracy,
        logits,
        calibration,
    })
}

/// Runs `spec` end to end and evaluates every network on `val` after each
/// epoch. Fully determined by `spec` and the data.
pub fn run(spec: &RunSpec, train: &Dataset, val: &Dataset) -> Result<RunOutcome> {
    check_run(spec, train, val)?;
    let roles = spec.mode.roles();
    let (d, c) = (train.dim(), train.num_classes());
    let mut nets: Vec<Network> = (0..roles.len())
        .map(|r| Network::init(role_spec(spec, r, d, c)))
        .collect::<Result<_>>()?;
    let mut opts: Vec<OptimState> = nets
        .iter()
        .map(|n| OptimState::new(n.params(), spec.schedule.clone()))
        .collect::<Result<_>>()?;
    let student = spec.mode.student_index();
    let bins = spec.calibration_bins;
    let mut epochs = Vec::new();

    let mut cfg = spec.distill;
    match spec.mode {
        Mode::Scratch => {
            cfg.beta_t = 0.0;
            cfg.beta_s = 0.0;
        }
        Mode::Dml => {
            cfg.student_kl = StudentKl::Forward;
            cfg.teacher_kl = TeacherKl::Forward;
        }
        _ => {}
    }

    if spec.mode == Mode::VanillaKd {
        // Pre-train the teacher with cross-entropy, then freeze it.
        for e in 0..spec.epochs {
            opts[0].set_epoch(e);
            let batches = train.batches(spec.batch_size, epoch_seed(spec.seed, e))?;
            let stats = scratch_epoch(&mut nets[0], &batches, &mut opts[0])?;
            let ev = evaluate(&nets[0], val)?;
            epochs.push(EpochRecord {
                epoch: e,
                phase: "pretrain".to_string(),
                lr: opts[0].lr,
                losses: vec![stats.losses[0], LossSummary::default()],
                val_accuracy: vec![ev.accuracy, 0.0],
                student_val_ece: 0.0,
                delta_r_fraction: None,
            });
        }
        nets[0].set_trainable(false);
    }

    for e in 0..spec.epochs {
        for o in opts.iter_mut() {
            o.set_epoch(e);
        }
        let batches = train.batches(spec.batch_size, epoch_seed(spec.seed, e))?;
        let (stats, phase) = match spec.mode {
            Mode::Scratch | Mode::Dml | Mode::BdKd => {
                let (t, s) = nets.split_at_mut(1);
                let (ot, os) = opts.split_at_mut(1);
                (
                    cotrain_epoch(&mut t[0], &mut s[0], &batches, &cfg, &mut ot[0], &mut os[0])?,
                    "train",
                )
            }
            Mode::VanillaKd => {
                let (t, s) = nets.split_at_mut(1);
                let st = offline_distill_epoch(&t[0], &mut s[0], &batches, spec.vanilla_alpha, cfg.tau, &mut opts[1])?;
                let stats = EpochStats {
                    losses: vec![LossSummary::default(), st.losses[0]],
                    delta_r_fraction: None,
                };
                (stats, "distill")
            }
            Mode::OneTeacherTwoStudents | Mode::TwoTeachersOneStudent => {
                let layout = if spec.mode == Mode::OneTeacherTwoStudents {
                    MultiLayout::OneTeacherTwoStudents
                } else {
                    MultiLayout::TwoTeachersOneStudent
                };
                let n3: &mut [Network; 3] = nets.as_mut_slice().try_into().expect("three networks");
                let o3: &mut [OptimState; 3] = opts.as_mut_slice().try_into().expect("three optimizers");
                (multinet_epoch(n3, &batches, &cfg, layout, o3)?, "train")
            }
        };
        let ev = eval_all(&nets, val, student, bins)?;
        epochs.push(EpochRecord {
            epoch: e,
            phase: phase.to_string(),
            lr: opts[student].lr,
            losses: stats.losses,
            val_accuracy: ev.accuracy,
            student_val_ece: ev.calibration.ece,
            delta_r_fraction: stats.delta_r_fraction,
        });
    }

    let ev = eval_all(&nets, val, student, bins)?;
    let record = RunRecord {
        mode: spec.mode,
        seed: spec.seed,
        roles: roles.iter().map(|r| r.to_string()).collect(),
        param_counts: nets.iter().map(crate::models::param_count).collect(),
        epochs,
        final_val_accuracy: ev.accuracy,
        final_student_ece: ev.calibration.ece,
    };
    Ok(RunOutcome {
        record,
        networks: nets,
        val_logits: ev.logits,
        calibration: ev.calibration,
    })
}
