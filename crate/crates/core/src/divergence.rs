//! Temperature softmax, per-sample entropy, forward/reverse KL and the
//! entropy-gap balancing weights.
//!
//! All logarithms are natural. Probabilities are clamped at [`PROB_FLOOR`]
//! before taking logs, which also realises the `0 · ln 0 = 0` convention.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::math;
use crate::tensor::{Tape, Var};

/// Floor applied to probabilities before `ln`.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default emphasis weight for the favoured KL direction.
pub const DEFAULT_V: f64 = 2.0;

/// A batch of temperature-softened categorical distributions living on a tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbBatch {
    pub probs: Var,
    pub logits: Var,
    pub tau: f64,
    pub rows: usize,
    pub classes: usize,
}

/// Per-sample prediction entropies in nats. Never on the tape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyVector {
    pub values: Vec<f64>,
}

impl EntropyVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-sample weights of the forward and reverse KL terms.
///
/// For each sample exactly one of `delta_f[i]`, `delta_r[i]` is `v` and the
/// other is 1 (both are 1 when `v == 1`). These are plain numbers; they are
/// never differentiated through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceWeights {
    pub delta_f: Vec<f64>,
    pub delta_r: Vec<f64>,
    pub v: f64,
}

impl BalanceWeights {
    /// Unit weights on both directions (plain symmetric KL).
    pub fn uniform(n: usize) -> Self {
        Self {
            delta_f: alloc::vec![1.0; n],
            delta_r: alloc::vec![1.0; n],
            v: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.delta_f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta_f.is_empty()
    }

    /// Fraction of samples whose reverse term carries the weight `v`
    /// (non-negative entropy gap).
    pub fn reverse_fraction(&self) -> f64 {
        if self.delta_r.is_empty() {
            return 0.0;
        }
        let hits = self
            .delta_r
            .iter()
            .zip(&self.delta_f)
            .filter(|(&r, &f)| r == self.v && f == 1.0)
            .count();
        hits as f64 / self.delta_r.len() as f64
    }
}

/// Row-wise `softmax(logits / tau)`; differentiable with respect to `logits`.
pub fn softmax_tau(tape: &mut Tape, logits: Var, tau: f64) -> Result<ProbBatch> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::Dimension {
            op: "softmax_tau",
            lhs: shape,
            rhs: alloc::vec![2],
        });
    }
    let probs = tape.softmax(logits, tau)?;
    Ok(ProbBatch {
        probs,
        logits,
        tau,
        rows: shape[0],
        classes: shape[1],
    })
}

/// `-Σ_j p_j ln p_j` per row.
pub fn entropy(tape: &Tape, p: &ProbBatch) -> EntropyVector {
    let values = tape.value(p.probs).chunks(p.classes).map(entropy_of).collect();
    EntropyVector { values }
}

pub(crate) fn entropy_of(row: &[f64]) -> f64 {
    -row.iter().fold(0.0, |acc, &p| {
        let lp = math::ln(if p > PROB_FLOOR { p } else { PROB_FLOOR });
        acc + p * lp
    })
}

fn check_pair(p: &ProbBatch, q: &ProbBatch) -> Result<()> {
    if p.rows != q.rows || p.classes != q.classes {
        return Err(Error::Dimension {
            op: "kl_divergence",
            lhs: alloc::vec![p.rows, p.classes],
            rhs: alloc::vec![q.rows, q.classes],
        });
    }
    if p.tau != q.tau {
        return Err(param_err(
            "tau",
            format!(
                "KL between distributions at different temperatures ({} vs {})",
                p.tau, q.tau
            ),
        ));
    }
    Ok(())
}

/// `D_KL(p || q) = Σ_k p_k (ln p_k − ln q_k)` per row, as an `[n]` node.
///
/// Gradient flows into whichever argument is still attached to the tape.
pub fn forward_kl(tape: &mut Tape, p: &ProbBatch, q: &ProbBatch) -> Result<Var> {
    check_pair(p, q)?;
    let cp = tape.clamp_min(p.probs, PROB_FLOOR);
    let lp = tape.ln(cp)?;
    let cq = tape.clamp_min(q.probs, PROB_FLOOR);
    let lq = tape.ln(cq)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p.probs, diff)?;
    tape.sum_axis(terms, 1)
}

/// `D_KL(q || p)`; the mode-seeking direction when `q` is being fitted.
pub fn reverse_kl(tape: &mut Tape, p: &ProbBatch, q: &ProbBatch) -> Result<Var> {
    forward_kl(tape, q, p)
}

/// Per-sample weights from the entropy gap `H_s − H_t`.
///
/// A negative gap (student more certain than the teacher) puts `v` on the
/// forward term; a gap `≥ 0`, ties included, puts `v` on the reverse term.
pub fn balance_weights(h_s: &EntropyVector, h_t: &EntropyVector, v: f64) -> Result<BalanceWeights> {
    if !(v >= 1.0) || !v.is_finite() {
        return Err(param_err("v", format!("balance weight must be >= 1, got {v}")));
    }
    if h_s.len() != h_t.len() {
        return Err(Error::Dimension {
            op: "balance_weights",
            lhs: alloc::vec![h_s.len()],
            rhs: alloc::vec![h_t.len()],
        });
    }
    let n = h_s.len();
    let mut delta_f = alloc::vec![1.0; n];
    let mut delta_r = alloc::vec![1.0; n];
    for (i, (s, t)) in h_s.values.iter().zip(&h_t.values).enumerate() {
        let gap = s - t;
        if gap < 0.0 {
            delta_f[i] = v;
        } else {
            delta_r[i] = v;
        }
    }
    Ok(BalanceWeights { delta_f, delta_r, v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn batch(tape: &mut Tape, rows: &[&[f64]], tau: f64) -> ProbBatch {
        let z = tape.constant(Tensor::from_rows(rows).unwrap());
        softmax_tau(tape, z, tau).unwrap()
    }

    /// Batch whose softmax at τ=1 reproduces the given probabilities.
    fn from_probs(tape: &mut Tape, rows: &[&[f64]]) -> ProbBatch {
        let logs: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&p| math::ln(p)).collect()).collect();
        let z = tape.constant(Tensor::from_rows(&logs).unwrap());
        softmax_tau(tape, z, 1.0).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let p = batch(&mut t, &[&[0.0, 0.0, 0.0]], 2.0);
        for &x in t.value(p.probs) {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = batch(&mut t, &[&[1.0, 0.0]], 1.0);
        // e/(e+1) from a 50-digit oracle
        assert!((t.value(p.probs)[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((t.value(p.probs)[1] - 0.268_941_421_369_995_1).abs() < 1e-15);

        let shifted = batch(&mut t, &[&[1.0 + 7.5, 0.0 + 7.5]], 1.0);
        for (a, b) in t.value(p.probs).to_vec().iter().zip(t.value(shifted.probs)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        assert!(matches!(softmax_tau(&mut t, z, 0.0), Err(Error::Parameter { .. })));
        assert!(matches!(softmax_tau(&mut t, z, -1.0), Err(Error::Parameter { .. })));
        let one = t.constant(Tensor::from_rows(&[[1.0]]).unwrap());
        assert!(matches!(softmax_tau(&mut t, one, 1.0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn entropy_examples() {
        let mut t = Tape::new();
        let u = batch(&mut t, &[&[0.3, 0.3, 0.3, 0.3]], 1.0);
        assert!((entropy(&t, &u).values[0] - 4f64.ln()).abs() < 1e-15);

        assert_eq!(entropy_of(&[1.0, 0.0, 0.0]), 0.0);

        let p = batch(&mut t, &[&[1.0, 0.0]], 1.0);
        // −Σ p ln p for (e/(e+1), 1/(e+1)), 50-digit oracle
        assert!((entropy(&t, &p).values[0] - 0.582_203_108_888_217_9).abs() < 1e-14);
    }

    #[test]
    fn kl_examples() {
        let mut t = Tape::new();
        let p = from_probs(&mut t, &[&[0.8, 0.2]]);
        let q = from_probs(&mut t, &[&[0.5, 0.5]]);
        let f = forward_kl(&mut t, &p, &p).unwrap();
        assert!(t.value(f)[0].abs() < 1e-15);

        // 0.8 ln 1.6 + 0.2 ln 0.4 and 0.5 ln(0.5/0.8) + 0.5 ln(0.5/0.2), 50-digit oracle
        let fw = forward_kl(&mut t, &p, &q).unwrap();
        let rv = reverse_kl(&mut t, &p, &q).unwrap();
        assert!((t.value(fw)[0] - 0.192_744_757_021_757_43).abs() < 1e-12);
        assert!((t.value(rv)[0] - 0.223_143_551_314_209_76).abs() < 1e-12);
        assert_ne!(t.value(fw)[0], t.value(rv)[0]);

        let a = from_probs(&mut t, &[&[0.7, 0.3]]);
        let b = from_probs(&mut t, &[&[0.3, 0.7]]);
        let ab = forward_kl(&mut t, &a, &b).unwrap();
        assert!((t.value(ab)[0] - 0.338_919_144_154_881_45).abs() < 1e-12);
    }

    #[test]
    fn kl_of_one_hot_uses_zero_log_zero() {
        let mut t = Tape::new();
        let p = batch(&mut t, &[&[800.0, 0.0]], 1.0);
        let q = batch(&mut t, &[&[0.0, 0.0]], 1.0);
        assert_eq!(t.value(p.probs)[1], 0.0);
        let kl = forward_kl(&mut t, &p, &q).unwrap();
        assert!((t.value(kl)[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_mismatched_batches() {
        let mut t = Tape::new();
        let p = batch(&mut t, &[&[0.0, 1.0]], 2.0);
        let q = batch(&mut t, &[&[0.0, 1.0, 2.0]], 2.0);
        assert!(matches!(forward_kl(&mut t, &p, &q), Err(Error::Dimension { .. })));
        let r = batch(&mut t, &[&[0.0, 1.0]], 1.0);
        assert!(matches!(forward_kl(&mut t, &p, &r), Err(Error::Parameter { .. })));
    }

    #[test]
    fn balance_weight_rules() {
        let ev = |v: &[f64]| EntropyVector { values: v.to_vec() };
        let w = balance_weights(&ev(&[0.2]), &ev(&[0.9]), 2.0).unwrap();
        assert_eq!((w.delta_f[0], w.delta_r[0]), (2.0, 1.0));
        let w = balance_weights(&ev(&[0.5]), &ev(&[0.5]), 2.0).unwrap();
        assert_eq!((w.delta_f[0], w.delta_r[0]), (1.0, 2.0));
        let w = balance_weights(&ev(&[0.1, 0.9]), &ev(&[0.5, 0.2]), 1.0).unwrap();
        assert!(w.delta_f.iter().chain(&w.delta_r).all(|&d| d == 1.0));
        assert!(matches!(
            balance_weights(&ev(&[0.1]), &ev(&[0.5]), 0.5),
            Err(Error::Parameter { name: "v", .. })
        ));
        assert!(balance_weights(&ev(&[0.1]), &ev(&[0.5, 0.1]), 2.0).is_err());
    }

    #[test]
    fn student_kl_gradient_is_prob_difference_over_tau() {
        let tau = 2.0;
        let mut t = Tape::new();
        let zt = t.constant(Tensor::from_rows(&[[0.3, -1.0, 2.0]]).unwrap());
        let zs = t.leaf(&Tensor::from_rows(&[[1.0, 0.5, -0.5]]).unwrap().with_requires_grad(true));
        let pt = softmax_tau(&mut t, zt, tau).unwrap();
        let ps = softmax_tau(&mut t, zs, tau).unwrap();
        let kl = forward_kl(&mut t, &pt, &ps).unwrap();
        let loss = t.sum(kl);
        t.backward(loss).unwrap();
        let expected: Vec<f64> = t
            .value(ps.probs)
            .iter()
            .zip(t.value(pt.probs))
            .map(|(s, p)| (s - p) / tau)
            .collect();
        for (g, e) in t.grad(zs).unwrap().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-14);
        }
    }
}
