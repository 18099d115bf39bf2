//! Central finite-difference checks of tape gradients with respect to
//! network parameters.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::models::Network;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-4)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = libm::fmax(libm::fmax(libm::fabs(analytic), libm::fabs(numeric)), 1e-4);
    libm::fabs(analytic - numeric) / scale
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub entries: usize,
}

fn loss_value<F>(nets: &[Network], x: &Tensor, labels: &[usize], loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var], &[usize]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut logits = Vec::with_capacity(nets.len());
    for n in nets {
        logits.push(n.forward(&mut tape, xv)?.logits);
    }
    let l = loss(&mut tape, &logits, labels)?;
    tape.item(l)
}

/// Compares the gradient of `loss` with respect to every parameter of
/// `nets[owner]` against `(L(θ + h) − L(θ − h)) / 2h`. `loss` receives the
/// logits of every network, in order.
pub fn check_loss<F>(
    nets: &[Network],
    owner: usize,
    x: &Tensor,
    labels: &[usize],
    h: f64,
    loss: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var], &[usize]) -> Result<Var>,
{
    if owner >= nets.len() {
        return Err(Error::Contract(alloc::format!("no network {owner}")));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut fwds = Vec::with_capacity(nets.len());
    for n in nets {
        fwds.push(n.forward(&mut tape, xv)?);
    }
    let logits: Vec<Var> = fwds.iter().map(|f| f.logits).collect();
    let l = loss(&mut tape, &logits, labels)?;
    tape.backward(l)?;

    let mut report = GradReport {
        max_rel_err: 0.0,
        entries: 0,
    };
    let mut probe = nets.to_vec();
    for (k, &pv) in fwds[owner].params.iter().enumerate() {
        let numel = nets[owner].params()[k].numel();
        let zeros = alloc::vec![0.0; numel];
        let analytic = tape.grad(pv).unwrap_or(&zeros).to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = nets[owner].params()[k].data()[j];
            probe[owner].params_mut()[k].data_mut()[j] = orig + h;
            let up = loss_value(&probe, x, labels, &loss)?;
            probe[owner].params_mut()[k].data_mut()[j] = orig - h;
            let down = loss_value(&probe, x, labels, &loss)?;
            probe[owner].params_mut()[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            report.max_rel_err = libm::fmax(report.max_rel_err, relative_error(a, numeric));
            report.entries += 1;
        }
    }
    Ok(report)
}

/// Smallest `|pre-activation|` of any hidden unit over the rows of `x`;
/// infinite for networks without hidden layers. Finite differences are
/// unreliable when this is close to the ReLU kink.
pub fn min_preactivation(net: &Network, x: &Tensor) -> f64 {
    let params = net.params();
    let layers = params.len() / 2;
    let mut best = f64::INFINITY;
    let mut h: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
    for k in 0..layers.saturating_sub(1) {
        let (w, b) = (&params[2 * k], &params[2 * k + 1]);
        let out = w.cols();
        for row in h.iter_mut() {
            let z: Vec<f64> = (0..out)
                .map(|j| {
                    row.iter()
                        .enumerate()
                        .fold(b.data()[j], |acc, (i, &v)| acc + v * w.data()[i * out + j])
                })
                .collect();
            for &v in &z {
                best = libm::fmin(best, libm::fabs(v));
            }
            *row = z.into_iter().map(|v| libm::fmax(v, 0.0)).collect();
        }
    }
    best
}

fn row_entropy(z: &[f64], tau: f64) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| libm::fmax(a, b));
    let e: Vec<f64> = z.iter().map(|&v| math::exp((v - m) / tau)).collect();
    let s = e.iter().fold(0.0, |a, &b| a + b);
    -e.iter().fold(0.0, |acc, &v| {
        let p = v / s;
        acc + p * math::ln(p)
    })
}

/// Smallest per-sample `|H(a) − H(b)|` at temperature `tau`. The balancing
/// weights switch where this is zero, so the loss is not differentiable there.
pub fn min_entropy_gap(a: &Tensor, b: &Tensor, tau: f64) -> f64 {
    (0..a.rows()).fold(f64::INFINITY, |best, i| {
        libm::fmin(
            best,
            libm::fabs(row_entropy(a.row(i), tau) - row_entropy(b.row(i), tau)),
        )
    })
}
