//! Distillation objectives.
//!
//! Every loss is built for one network (the *owner*) against one or more
//! peers. Peer logits are detached inside each function, so backpropagating
//! a loss only ever reaches the owner's parameters.
//!
//! Direction naming follows the owner's point of view: the *forward* term is
//! `KL(p_peer || p_own)` (mean-seeking) and the *reverse* term is
//! `KL(p_own || p_peer)` (mode-seeking). The online teacher objective
//! `α_t·CE + τ²β_t·KL(p_t || p_s)` is therefore a reverse term for the teacher,
//! which is why [`TeacherKl::Reverse`] is its default.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::divergence::{self, BalanceWeights, ProbBatch, DEFAULT_V};
use crate::error::{param_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// KL combination used in a student's objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentKl {
    Forward,
    Reverse,
    Symmetric,
    /// Symmetric with per-sample entropy-gap weights.
    Balanced,
}

/// KL combination used in a teacher's objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKl {
    Forward,
    Reverse,
    Symmetric,
    None,
}

/// How per-sample losses are folded into a batch loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl FromStr for StudentKl {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Self::Forward),
            "reverse" => Ok(Self::Reverse),
            "symmetric" => Ok(Self::Symmetric),
            "balanced" => Ok(Self::Balanced),
            other => Err(param_err("student_kl", format!("unknown selector `{other}`"))),
        }
    }
}

impl FromStr for TeacherKl {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Self::Forward),
            "reverse" => Ok(Self::Reverse),
            "symmetric" => Ok(Self::Symmetric),
            "none" => Ok(Self::None),
            other => Err(param_err("teacher_kl", format!("unknown selector `{other}`"))),
        }
    }
}

/// Loss hyperparameters for a teacher/student pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub alpha_t: f64,
    pub alpha_s: f64,
    pub beta_t: f64,
    pub beta_s: f64,
    pub tau: f64,
    pub v: f64,
    pub student_kl: StudentKl,
    pub teacher_kl: TeacherKl,
    pub reduction: Reduction,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha_t: 1.0,
            alpha_s: 1.0,
            beta_t: 1.0,
            beta_s: 1.0,
            tau: 2.0,
            v: DEFAULT_V,
            student_kl: StudentKl::Balanced,
            teacher_kl: TeacherKl::Reverse,
            reduction: Reduction::Mean,
        }
    }
}

fn check_weight(name: &'static str, x: f64) -> Result<()> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(param_err(
            name,
            format!("must be a finite non-negative number, got {x}"),
        ))
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_weight("alpha_t", self.alpha_t)?;
        check_weight("alpha_s", self.alpha_s)?;
        check_weight("beta_t", self.beta_t)?;
        check_weight("beta_s", self.beta_s)?;
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(param_err(
                "tau",
                format!("temperature must be positive, got {}", self.tau),
            ));
        }
        if !(self.v >= 1.0) || !self.v.is_finite() {
            return Err(param_err("v", format!("balance weight must be >= 1, got {}", self.v)));
        }
        Ok(())
    }
}

/// `α` and `β` of one network in a multi-network setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoleWeights {
    pub alpha: f64,
    pub beta: f64,
}

/// A loss on the tape plus its scalar decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Scalar node to backpropagate.
    pub total: Var,
    /// `α · CE`.
    pub ce_term: f64,
    /// Weighted `τ²β · KL(peer || own)` summed over peers.
    pub forward_kl_term: f64,
    /// Weighted `τ²β · KL(own || peer)` summed over peers.
    pub reverse_kl_term: f64,
    /// Entropy-gap weights, one entry per peer, when the balanced selector is used.
    pub deltas: Vec<BalanceWeights>,
}

/// Plain-number view of a [`LossBreakdown`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub ce: f64,
    pub forward_kl: f64,
    pub reverse_kl: f64,
}

impl LossBreakdown {
    pub fn value(&self, tape: &Tape) -> f64 {
        tape.value(self.total)[0]
    }

    pub fn summary(&self, tape: &Tape) -> LossSummary {
        LossSummary {
            total: self.value(tape),
            ce: self.ce_term,
            forward_kl: self.forward_kl_term,
            reverse_kl: self.reverse_kl_term,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mix {
    Forward,
    Reverse,
    Symmetric,
    Balanced,
    None,
}

impl From<StudentKl> for Mix {
    fn from(s: StudentKl) -> Self {
        match s {
            StudentKl::Forward => Mix::Forward,
            StudentKl::Reverse => Mix::Reverse,
            StudentKl::Symmetric => Mix::Symmetric,
            StudentKl::Balanced => Mix::Balanced,
        }
    }
}

impl From<TeacherKl> for Mix {
    fn from(s: TeacherKl) -> Self {
        match s {
            TeacherKl::Forward => Mix::Forward,
            TeacherKl::Reverse => Mix::Reverse,
            TeacherKl::Symmetric => Mix::Symmetric,
            TeacherKl::None => Mix::None,
        }
    }
}

fn reduce(tape: &mut Tape, per_sample: Var, reduction: Reduction) -> Var {
    match reduction {
        Reduction::Mean => tape.mean(per_sample),
        Reduction::Sum => tape.sum(per_sample),
    }
}

fn cross_entropy_reduced(tape: &mut Tape, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
    let log_probs = tape.log_softmax(logits, 1.0)?;
    let picked = tape.pick(log_probs, labels)?;
    let r = reduce(tape, picked, reduction);
    Ok(tape.neg(r))
}

/// Mean over the batch of `−ln softmax(logits)[label]` at temperature 1.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    cross_entropy_reduced(tape, logits, labels, Reduction::Mean)
}

fn finite(value: f64, term: &str, owner: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            term: format!("{owner} {term}"),
        })
    }
}

fn weighted(tape: &mut Tape, kl: Var, w: &[f64], reduction: Reduction, scale: f64) -> Result<Var> {
    let w = tape.constant(Tensor::vector(w));
    let weighted = tape.mul(w, kl)?;
    let r = reduce(tape, weighted, reduction);
    Ok(tape.scale(r, scale))
}

fn add_opt(tape: &mut Tape, acc: Option<Var>, x: Var) -> Result<Option<Var>> {
    Ok(Some(match acc {
        Some(a) => tape.add(a, x)?,
        None => x,
    }))
}

struct Owner<'a> {
    name: &'a str,
    alpha: f64,
    beta: f64,
    mix: Mix,
}

/// `α·CE(own) + Σ_peers τ²β·[w_f ⊙ KL(peer||own) + w_r ⊙ KL(own||peer)]`.
fn assemble(
    tape: &mut Tape,
    own: Var,
    peers: &[Var],
    labels: &[usize],
    owner: Owner<'_>,
    tau: f64,
    v: f64,
    reduction: Reduction,
) -> Result<LossBreakdown> {
    let ce = cross_entropy_reduced(tape, own, labels, reduction)?;
    let ce = tape.scale(ce, owner.alpha);
    let ce_term = finite(tape.value(ce)[0], "cross-entropy", owner.name)?;

    let mut fwd: Option<Var> = None;
    let mut rev: Option<Var> = None;
    let mut deltas = Vec::new();
    if owner.mix != Mix::None {
        let p_own = divergence::softmax_tau(tape, own, tau)?;
        let n = p_own.rows;
        let ones = alloc::vec![1.0; n];
        for &peer in peers {
            let frozen = tape.detach(peer);
            let p_peer: ProbBatch = divergence::softmax_tau(tape, frozen, tau)?;
            let (wf, wr): (Option<Vec<f64>>, Option<Vec<f64>>) = match owner.mix {
                Mix::Forward => (Some(ones.clone()), None),
                Mix::Reverse => (None, Some(ones.clone())),
                Mix::Symmetric => (Some(ones.clone()), Some(ones.clone())),
                Mix::Balanced => {
                    let h_own = divergence::entropy(tape, &p_own);
                    let h_peer = divergence::entropy(tape, &p_peer);
                    let w = divergence::balance_weights(&h_own, &h_peer, v)?;
                    let pair = (Some(w.delta_f.clone()), Some(w.delta_r.clone()));
                    deltas.push(w);
                    pair
                }
                Mix::None => (None, None),
            };
            if owner.beta == 0.0 {
                continue;
            }
            let scale = tau * tau * owner.beta;
            if let Some(wf) = wf {
                let kl = divergence::forward_kl(tape, &p_peer, &p_own)?;
                let term = weighted(tape, kl, &wf, reduction, scale)?;
                fwd = add_opt(tape, fwd, term)?;
            }
            if let Some(wr) = wr {
                let kl = divergence::forward_kl(tape, &p_own, &p_peer)?;
                let term = weighted(tape, kl, &wr, reduction, scale)?;
                rev = add_opt(tape, rev, term)?;
            }
        }
    }

    let mut total = ce;
    let mut forward_kl_term = 0.0;
    let mut reverse_kl_term = 0.0;
    if let Some(f) = fwd {
        forward_kl_term = finite(tape.value(f)[0], "forward KL", owner.name)?;
        total = tape.add(total, f)?;
    }
    if let Some(r) = rev {
        reverse_kl_term = finite(tape.value(r)[0], "reverse KL", owner.name)?;
        total = tape.add(total, r)?;
    }
    finite(tape.value(total)[0], "total", owner.name)?;
    Ok(LossBreakdown {
        total,
        ce_term,
        forward_kl_term,
        reverse_kl_term,
        deltas,
    })
}

fn same_shape(tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Dimension {
            op: "distillation loss",
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Offline distillation from a frozen teacher:
/// `α·CE(student) + (1−α)·τ²·reduce KL(p_t || p_s)`.
pub fn vanilla_kd_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: Var,
    labels: &[usize],
    alpha: f64,
    tau: f64,
) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(param_err("alpha", format!("must lie in [0, 1], got {alpha}")));
    }
    same_shape(tape, student_logits, teacher_logits)?;
    let owner = Owner {
        name: "student",
        alpha,
        beta: 1.0 - alpha,
        mix: Mix::Forward,
    };
    assemble(
        tape,
        student_logits,
        &[teacher_logits],
        labels,
        owner,
        tau,
        1.0,
        Reduction::Mean,
    )
}

/// Online teacher objective: `α_t·CE(teacher) + τ²β_t·KL` with the KL
/// direction chosen by `cfg.teacher_kl` (default `KL(p_t || p_s)`).
pub fn bdkd_teacher_loss(
    tape: &mut Tape,
    teacher_logits: Var,
    student_logits: Var,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    same_shape(tape, teacher_logits, student_logits)?;
    let owner = Owner {
        name: "teacher",
        alpha: cfg.alpha_t,
        beta: cfg.beta_t,
        mix: cfg.teacher_kl.into(),
    };
    assemble(
        tape,
        teacher_logits,
        &[student_logits],
        labels,
        owner,
        cfg.tau,
        cfg.v,
        cfg.reduction,
    )
}

/// Online student objective:
/// `α_s·CE + τ²β_s·reduce[δ_f·KL(p_t||p_s) + δ_r·KL(p_s||p_t)]`.
///
/// With the balanced selector the δ's come from the current batch's entropy
/// gap; the other selectors fix them (forward: (1,0), reverse: (0,1),
/// symmetric: (1,1)).
pub fn bdkd_student_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: Var,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    same_shape(tape, student_logits, teacher_logits)?;
    let owner = Owner {
        name: "student",
        alpha: cfg.alpha_s,
        beta: cfg.beta_s,
        mix: cfg.student_kl.into(),
    };
    assemble(
        tape,
        student_logits,
        &[teacher_logits],
        labels,
        owner,
        cfg.tau,
        cfg.v,
        cfg.reduction,
    )
}

/// Deep-mutual-learning pair: each network gets `α·CE + τ²β·KL(p_peer || p_own)`.
/// Network `a` uses the teacher weights of `cfg`, `b` the student weights.
pub fn dml_pair_losses(
    tape: &mut Tape,
    logits_a: Var,
    logits_b: Var,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(LossBreakdown, LossBreakdown)> {
    let cfg = DistillConfig {
        student_kl: StudentKl::Forward,
        teacher_kl: TeacherKl::Forward,
        ..*cfg
    };
    let a = bdkd_teacher_loss(tape, logits_a, logits_b, labels, &cfg)?;
    let b = bdkd_student_loss(tape, logits_b, logits_a, labels, &cfg)?;
    Ok((a, b))
}

/// Default per-role weights: teachers take `(α_t, β_t)`, students `(α_s, β_s)`.
pub fn role_weights_1t2s(cfg: &DistillConfig) -> [RoleWeights; 3] {
    let t = RoleWeights {
        alpha: cfg.alpha_t,
        beta: cfg.beta_t,
    };
    let s = RoleWeights {
        alpha: cfg.alpha_s,
        beta: cfg.beta_s,
    };
    [t, s, s]
}

/// Default per-role weights for two teachers and one student.
pub fn role_weights_2t1s(cfg: &DistillConfig) -> [RoleWeights; 3] {
    let [t, s, _] = role_weights_1t2s(cfg);
    [t, t, s]
}

fn check_weights(weights: &[RoleWeights; 3]) -> Result<()> {
    for w in weights {
        check_weight("alpha", w.alpha)?;
        check_weight("beta", w.beta)?;
    }
    Ok(())
}

fn named(prefix: &str, k: usize) -> String {
    format!("{prefix}{k}")
}

/// One teacher, two students. Returns `(teacher, student1, student2)` losses.
///
/// Each student distills from the teacher and from the other student, every
/// pair with its own entropy-gap weights. The teacher regularises towards
/// both students.
pub fn multinet_losses_1t2s(
    tape: &mut Tape,
    teacher_logits: Var,
    s1_logits: Var,
    s2_logits: Var,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<[LossBreakdown; 3]> {
    multinet_losses_1t2s_weighted(
        tape,
        teacher_logits,
        s1_logits,
        s2_logits,
        labels,
        cfg,
        &role_weights_1t2s(cfg),
    )
}

/// [`multinet_losses_1t2s`] with explicit `[teacher, s1, s2]` weights.
pub fn multinet_losses_1t2s_weighted(
    tape: &mut Tape,
    teacher_logits: Var,
    s1_logits: Var,
    s2_logits: Var,
    labels: &[usize],
    cfg: &DistillConfig,
    weights: &[RoleWeights; 3],
) -> Result<[LossBreakdown; 3]> {
    cfg.validate()?;
    check_weights(weights)?;
    same_shape(tape, teacher_logits, s1_logits)?;
    same_shape(tape, teacher_logits, s2_logits)?;
    let teacher = assemble(
        tape,
        teacher_logits,
        &[s1_logits, s2_logits],
        labels,
        Owner {
            name: "teacher",
            alpha: weights[0].alpha,
            beta: weights[0].beta,
            mix: cfg.teacher_kl.into(),
        },
        cfg.tau,
        cfg.v,
        cfg.reduction,
    )?;
    let students = [(s1_logits, s2_logits), (s2_logits, s1_logits)];
    let mut out = Vec::with_capacity(2);
    for (k, &(own, other)) in students.iter().enumerate() {
        let name = named("student", k + 1);
        out.push(assemble(
            tape,
            own,
            &[teacher_logits, other],
            labels,
            Owner {
                name: &name,
                alpha: weights[k + 1].alpha,
                beta: weights[k + 1].beta,
                mix: cfg.student_kl.into(),
            },
            cfg.tau,
            cfg.v,
            cfg.reduction,
        )?);
    }
    let s2 = out.pop().expect("two students");
    let s1 = out.pop().expect("two students");
    Ok([teacher, s1, s2])
}

/// Two teachers, one student. Returns `(teacher1, teacher2, student)` losses.
pub fn multinet_losses_2t1s(
    tape: &mut Tape,
    t1_logits: Var,
    t2_logits: Var,
    student_logits: Var,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<[LossBreakdown; 3]> {
    multinet_losses_2t1s_weighted(
        tape,
        t1_logits,
        t2_logits,
        student_logits,
        labels,
        cfg,
        &role_weights_2t1s(cfg),
    )
}

/// [`multinet_losses_2t1s`] with explicit `[t1, t2, student]` weights.
pub fn multinet_losses_2t1s_weighted(
    tape: &mut Tape,
    t1_logits: Var,
    t2_logits: Var,
    student_logits: Var,
    labels: &[usize],
    cfg: &DistillConfig,
    weights: &[RoleWeights; 3],
) -> Result<[LossBreakdown; 3]> {
    cfg.validate()?;
    check_weights(weights)?;
    same_shape(tape, t1_logits, student_logits)?;
    same_shape(tape, t2_logits, student_logits)?;
    let mut teachers = Vec::with_capacity(2);
    for (k, own) in [t1_logits, t2_logits].into_iter().enumerate() {
        let name = named("teacher", k + 1);
        teachers.push(assemble(
            tape,
            own,
            &[student_logits],
            labels,
            Owner {
                name: &name,
                alpha: weights[k].alpha,
                beta: weights[k].beta,
                mix: cfg.teacher_kl.into(),
            },
            cfg.tau,
            cfg.v,
            cfg.reduction,
        )?);
    }
    let student = assemble(
        tape,
        student_logits,
        &[t1_logits, t2_logits],
        labels,
        Owner {
            name: "student",
            alpha: weights[2].alpha,
            beta: weights[2].beta,
            mix: cfg.student_kl.into(),
        },
        cfg.tau,
        cfg.v,
        cfg.reduction,
    )?;
    let t2 = teachers.pop().expect("two teachers");
    let t1 = teachers.pop().expect("two teachers");
    Ok([t1, t2, student])
}
