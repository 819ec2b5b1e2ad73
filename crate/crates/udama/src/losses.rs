//! Component losses and the combined adversarial objective.
//!
//! The pure-`f64` functions here are the reference definitions used for
//! logging and verification. Training builds the same quantities on a
//! [`Tape`](crate::numerics::Tape) via the `*_node` builders so gradients
//! flow; forward values of the two routes agree to floating-point rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, TensorId};

/// Variance floor applied inside the Gaussian NLL.
pub const SIGMA2_FLOOR: f64 = 1e-6;

/// Weights of the combined objective: the predictor term is scaled by
/// `alpha` and the two discriminator terms by `lambda1` and `lambda2`,
/// which must sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    alpha: f64,
    lambda1: f64,
    lambda2: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::config(format!("alpha must be > 0, got {alpha}")));
        }
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must be in [0,1], got {v}")));
            }
        }
        if (lambda1 + lambda2 - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "lambda1 + lambda2 must equal 1 (got {lambda1} + {lambda2} = {})",
                lambda1 + lambda2
            )));
        }
        Ok(LossWeights { alpha, lambda1, lambda2 })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    /// Re-validates weights that came in through deserialization.
    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.alpha, self.lambda1, self.lambda2).map(|_| ())
    }
}

impl Default for LossWeights {
    /// alpha 0.01 brings the squared-error term (tens, in label units²) to
    /// the order of the discriminator losses (~1); an even split between
    /// the coarse and fine discriminators.
    fn default() -> Self {
        LossWeights { alpha: 0.01, lambda1: 0.5, lambda2: 0.5 }
    }
}

/// Mean squared error.
pub fn mse_loss(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "mse_loss needs equal non-empty inputs, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

/// Mean over samples of -log softmax(logits)[label], two classes, computed
/// with the log-sum-exp stabilization.
pub fn cross_entropy_loss(logits: &[[f64; 2]], labels: &[u8]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::contract(format!(
            "cross_entropy_loss needs equal non-empty inputs, got {} and {}",
            logits.len(),
            labels.len()
        )));
    }
    let mut acc = 0.0;
    for (row, &label) in logits.iter().zip(labels) {
        if label > 1 {
            return Err(Error::contract(format!("label must be 0 or 1, got {label}")));
        }
        let m = row[0].max(row[1]);
        let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
        acc += lse - row[label as usize];
    }
    Ok(acc / logits.len() as f64)
}

/// Gaussian negative log-likelihood with the constant term omitted:
/// mean of 0.5*(ln(max(σ², floor)) + (target-μ)²/max(σ², floor)).
pub fn gaussian_nll_loss(mu: &[f64], sigma2: &[f64], target: &[f64]) -> Result<f64> {
    if mu.is_empty() || mu.len() != sigma2.len() || mu.len() != target.len() {
        return Err(Error::contract(format!(
            "gaussian_nll_loss needs equal non-empty inputs, got {}, {}, {}",
            mu.len(),
            sigma2.len(),
            target.len()
        )));
    }
    let mut acc = 0.0;
    for i in 0..mu.len() {
        if !mu[i].is_finite() || !sigma2[i].is_finite() || !target[i].is_finite() {
            return Err(Error::contract("gaussian_nll_loss received a non-finite input"));
        }
        let s = sigma2[i].max(SIGMA2_FLOOR);
        let r = target[i] - mu[i];
        acc += 0.5 * (s.ln() + r * r / s);
    }
    Ok(acc / mu.len() as f64)
}

/// The signed combined objective `alpha*mse - lambda1*cse - lambda2*gll`.
///
/// The optimizer never minimizes this signed value directly: the minus
/// signs are realized by the gradient-reversal layer, so training minimizes
/// `alpha*mse + lambda1*cse + lambda2*gll` with reversed encoder gradients.
/// This function reports the signed value for logging.
pub fn combined_loss(l_mse: f64, l_cse: f64, l_gll: f64, w: &LossWeights) -> f64 {
    w.alpha * l_mse - w.lambda1 * l_cse - w.lambda2 * l_gll
}

// ── Tape builders ────────────────────────────────────────────────────

/// MSE between a `[n,1]` prediction node and constant targets.
pub fn mse_node(tape: &mut Tape, pred: TensorId, truth: &[f64]) -> Result<TensorId> {
    let n = truth.len();
    if tape.values(pred).len() != n || n == 0 {
        return Err(Error::contract(format!(
            "mse_node needs matching non-empty prediction/target, got {} and {n}",
            tape.values(pred).len()
        )));
    }
    let t = tape.constant(vec![n, 1], truth.to_vec())?;
    let d = tape.sub(pred, t)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Two-class cross-entropy between a `[n,2]` logits node and constant
/// labels, via the per-sample correct-class margin: -ln σ(±(l1-l0)).
pub fn cross_entropy_node(tape: &mut Tape, logits: TensorId, labels: &[u8]) -> Result<TensorId> {
    let n = labels.len();
    if tape.shape(logits) != [n, 2] || n == 0 {
        return Err(Error::contract(format!(
            "cross_entropy_node needs [n,2] logits for n={n}, got shape {:?}",
            tape.shape(logits)
        )));
    }
    let mut signs = Vec::with_capacity(n);
    for &label in labels {
        if label > 1 {
            return Err(Error::contract(format!("label must be 0 or 1, got {label}")));
        }
        signs.push(if label == 1 { 1.0 } else { -1.0 });
    }
    let col1 = tape.slice(logits, 0..n, 1..2)?;
    let col0 = tape.slice(logits, 0..n, 0..1)?;
    let diff = tape.sub(col1, col0)?;
    let sign = tape.constant(vec![n, 1], signs)?;
    let margin = tape.mul(diff, sign)?;
    let p = tape.sigmoid(margin);
    let lp = tape.log(p);
    let m = tape.mean(lp);
    Ok(tape.neg(m))
}

/// Gaussian NLL between `[n,1]` μ and σ² nodes and constant targets.
pub fn gaussian_nll_node(
    tape: &mut Tape,
    mu: TensorId,
    sigma2: TensorId,
    target: &[f64],
) -> Result<TensorId> {
    tape.gaussian_nll(mu, sigma2, target, SIGMA2_FLOOR)
}
