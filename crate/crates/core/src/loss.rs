//! Information quantities and the NCG objectives.
//!
//! The discrete objective is
//!
//! ```text
//! Q = -H(<s>) + < CE(s_{t+delta}, shat_t) >
//! ```
//!
//! where `<.>` averages over batch and aligned time, `H` is Shannon entropy
//! and `CE(p, q) = -sum p ln q`. Uniform outputs everywhere give exactly
//! `Q = 0`; a perfect predictor of one-hot targets with balanced class usage
//! reaches the lower bound `-ln K`.
//!
//! All logarithms are natural.

use crate::autodiff::{Tape, Tensor, Var, PROB_FLOOR};
use crate::error::{NcgError, Result};
use crate::scalar::Scalar;

/// Default ridge added to covariance diagonals in the continuous objective.
pub const DEFAULT_RIDGE: f64 = 1e-6;

const SUM_TOLERANCE: f64 = 1e-6;

fn check_distribution<F: Scalar>(p: &[F], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(NcgError::invalid(format!("{what}: empty distribution")));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < F::zero()) {
        return Err(NcgError::invalid(format!("{what}: invalid probability {v}")));
    }
    let total = p.iter().fold(F::zero(), |a, &v| a + v);
    if (total - F::one()).abs() > F::of(SUM_TOLERANCE) {
        return Err(NcgError::invalid(format!("{what}: probabilities sum to {total}")));
    }
    Ok(())
}

fn check_pair<F: Scalar>(s: &[F], shat: &[F]) -> Result<()> {
    if s.len() != shat.len() {
        return Err(NcgError::shape(
            "cross_entropy",
            format!("lengths {} and {}", s.len(), shat.len()),
        ));
    }
    check_distribution(s, "target")?;
    check_distribution(shat, "prediction")
}

/// Shannon entropy `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy<F: Scalar>(p: &[F]) -> Result<F> {
    check_distribution(p, "entropy")?;
    Ok(p.iter()
        .filter(|&&v| v > F::zero())
        .fold(F::zero(), |a, &v| a - v * v.ln()))
}

/// `-sum s ln shat`, with `shat` clamped below at [`PROB_FLOOR`].
pub fn cross_entropy<F: Scalar>(s: &[F], shat: &[F]) -> Result<F> {
    check_pair(s, shat)?;
    let floor = F::of(PROB_FLOOR);
    Ok(s.iter()
        .zip(shat)
        .fold(F::zero(), |a, (&p, &q)| a - p * q.max(floor).ln()))
}

/// Kullback-Leibler divergence `sum s ln(s / shat)`.
pub fn kl<F: Scalar>(s: &[F], shat: &[F]) -> Result<F> {
    check_pair(s, shat)?;
    let floor = F::of(PROB_FLOOR);
    Ok(s.iter()
        .zip(shat)
        .filter(|(&p, _)| p > F::zero())
        .fold(F::zero(), |a, (&p, &q)| a + p * (p.ln() - q.max(floor).ln())))
}

/// Per-timestep class distributions, `[batch, K, time]`.
///
/// `time_offset` is the raw-signal index of time step 0, so series produced
/// by networks with different receptive fields can be aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistributionSeries<F> {
    values: Tensor<F>,
    time_offset: isize,
}

impl<F: Scalar> ClassDistributionSeries<F> {
    pub fn new(values: Tensor<F>, time_offset: isize) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(NcgError::shape(
                "class series",
                format!("expected [batch, K, time], got {:?}", values.shape()),
            ));
        }
        let (b, k, t) = (values.shape()[0], values.shape()[1], values.shape()[2]);
        let tol = F::simplex_tolerance();
        let d = values.data();
        if d.iter().any(|&v| !(v >= F::zero() && v <= F::one())) {
            return Err(NcgError::invalid("class probabilities must lie in [0, 1]"));
        }
        for bi in 0..b {
            for ti in 0..t {
                let total = (0..k).fold(F::zero(), |a, ki| a + d[(bi * k + ki) * t + ti]);
                if (total - F::one()).abs() > tol {
                    return Err(NcgError::invalid(format!(
                        "distribution at batch {bi}, time {ti} sums to {total}"
                    )));
                }
            }
        }
        Ok(Self {
            values,
            time_offset,
        })
    }

    pub(crate) fn new_unchecked(values: Tensor<F>, time_offset: isize) -> Self {
        Self {
            values,
            time_offset,
        }
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn time_offset(&self) -> isize {
        self.time_offset
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prob(&self, batch: usize, class: usize, t: usize) -> F {
        self.values.at(&[batch, class, t])
    }

    /// Probability of `class` over time for one batch item.
    pub fn class_track(&self, batch: usize, class: usize) -> Vec<f64> {
        let t = self.len();
        let base = (batch * self.classes() + class) * t;
        self.values.data()[base..base + t]
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect()
    }

    /// Most probable class at each time step (lowest index on ties).
    pub fn argmax_classes(&self, batch: usize) -> Vec<usize> {
        let (k, t) = (self.classes(), self.len());
        let d = self.values.data();
        (0..t)
            .map(|ti| {
                (0..k).fold(0, |best, ki| {
                    if d[(batch * k + ki) * t + ti] > d[(batch * k + best) * t + ti] {
                        ki
                    } else {
                        best
                    }
                })
            })
            .collect()
    }
}

/// Prediction residuals for the continuous objective, `[batch, D, time]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSeries<F> {
    values: Tensor<F>,
}

impl<F: Scalar> ResidualSeries<F> {
    pub fn new(values: Tensor<F>) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(NcgError::shape("residual series", "expected [batch, D, time]"));
        }
        if !values.is_finite() {
            return Err(NcgError::NonFinite { op: "residual series" });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }
}

/// Index ranges pairing predictions with their targets along time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    /// First target index in the transformed series.
    pub target_start: usize,
    /// First prediction index in the predicted series.
    pub pred_start: usize,
    pub len: usize,
}

/// Pairs prediction `j` (raw index `pred_offset + j`) with the target at raw
/// index `pred_offset + j + delta`.
pub fn align(
    target_len: usize,
    target_offset: isize,
    pred_len: usize,
    pred_offset: isize,
    delta: usize,
) -> Result<Alignment> {
    // target index = j + shift
    let shift = pred_offset + delta as isize - target_offset;
    let lo = (-shift).max(0);
    let hi = (pred_len as isize).min(target_len as isize - shift);
    if hi <= lo {
        return Err(NcgError::EmptyOverlap);
    }
    Ok(Alignment {
        target_start: (lo + shift) as usize,
        pred_start: lo as usize,
        len: (hi - lo) as usize,
    })
}

/// Records `Q` on `tape` for transformed series `s` and predictions `shat`,
/// both `[batch, K, time]` with the given raw-index offsets.
pub fn ncg_loss_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    s: Var,
    s_offset: isize,
    shat: Var,
    shat_offset: isize,
    delta: usize,
) -> Result<Var> {
    let (ss, ps) = (tape.value(s).shape().to_vec(), tape.value(shat).shape().to_vec());
    if ss.len() != 3 || ps.len() != 3 || ss[0] != ps[0] || ss[1] != ps[1] {
        return Err(NcgError::shape(
            "ncg_loss",
            format!("transformed {ss:?} vs predicted {ps:?}"),
        ));
    }
    let a = align(ss[2], s_offset, ps[2], shat_offset, delta)?;
    let target = tape.slice(s, 2, a.target_start, a.len)?;
    let pred = tape.slice(shat, 2, a.pred_start, a.len)?;
    let neg_entropy = tape.neg_entropy_of_mean(target)?;
    let ce = tape.cross_entropy(target, pred)?;
    tape.add(neg_entropy, ce)
}

/// Value of `Q` for already-computed series.
pub fn ncg_loss<F: Scalar>(
    s: &ClassDistributionSeries<F>,
    shat: &ClassDistributionSeries<F>,
    delta: usize,
) -> Result<F> {
    if s.classes() != shat.classes() {
        return Err(NcgError::shape(
            "ncg_loss",
            format!("K = {} vs {}", s.classes(), shat.classes()),
        ));
    }
    let mut tape = Tape::new();
    let sv = tape.constant(s.values().clone())?;
    let pv = tape.constant(shat.values().clone())?;
    let q = ncg_loss_on_tape(&mut tape, sv, s.time_offset(), pv, shat.time_offset(), delta)?;
    Ok(tape.value(q).data()[0])
}

/// Records `Q_reg = ln det(cov(y) + lambda I) - ln det(cov(eps) + lambda I)`.
///
/// Larger values mean the residuals carry less entropy than the signal
/// itself, so training maximizes this quantity.
pub fn ncg_loss_continuous_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    y: Var,
    eps: Var,
    lambda: f64,
) -> Result<Var> {
    let (ys, es) = (tape.value(y).shape(), tape.value(eps).shape());
    if ys.len() != 3 || es.len() != 3 || ys[1] != es[1] {
        return Err(NcgError::shape(
            "ncg_loss_continuous",
            format!("y {ys:?} vs residual {es:?}"),
        ));
    }
    let a = tape.log_det_cov(y, lambda)?;
    let b = tape.log_det_cov(eps, lambda)?;
    tape.sub(a, b)
}

pub fn ncg_loss_continuous<F: Scalar>(y: &Tensor<F>, eps: &ResidualSeries<F>, lambda: f64) -> Result<F> {
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone())?;
    let ev = tape.constant(eps.values().clone())?;
    let q = ncg_loss_continuous_on_tape(&mut tape, yv, ev, lambda)?;
    Ok(tape.value(q).data()[0])
}
