//! Reconstruction, focal and dice losses and their sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{CustomOp, Real, Var};

/// Probability clamp applied before the logarithm.
pub const FOCAL_EPS: f64 = 1e-7;
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha_pos: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha_pos: 0.75, gamma: 2.0 }
    }
}

/// Component losses with `l_ref = l_focal + l_dice` and `l_total = l_rec + l_ref`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_focal: f64,
    pub l_dice: f64,
    pub l_ref: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn new(l_rec: f64, l_focal: f64, l_dice: f64) -> Self {
        let l_ref = l_focal + l_dice;
        LossReport { l_rec, l_focal, l_dice, l_ref, l_total: l_rec + l_ref }
    }

    /// Reconstruction-only objective; refinement terms are zero.
    pub fn rec_only(l_rec: f64) -> Self {
        Self::new(l_rec, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        [self.l_rec, self.l_focal, self.l_dice, self.l_ref, self.l_total].iter().all(|v| v.is_finite())
    }
}

fn check_binary<T: Real>(op: &'static str, mask: &[T]) -> Result<()> {
    match mask.iter().find(|&&m| m != T::zero() && m != T::one()) {
        Some(bad) => Err(Error::invalid(op, format!("mask value {bad} is not 0 or 1"))),
        None => Ok(()),
    }
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a} predictions for {b} mask pixels")));
    }
    Ok(())
}

/// Mean over positions of the channel-vector distance `‖f̂ − φ‖₂`, with its gradient w.r.t. `f̂`.
pub fn rec_loss_grad<T: Real>(f_hat: &[T], phi: &[T], channels: usize) -> Result<(T, Vec<T>)> {
    check_len("rec_loss", f_hat.len(), phi.len())?;
    if channels == 0 || f_hat.len() % channels != 0 || f_hat.is_empty() {
        return Err(Error::shape("rec_loss", format!("{} values do not split into {channels} channels", f_hat.len())));
    }
    let plane = f_hat.len() / channels;
    let inv = T::one() / T::from_usize(plane).unwrap();
    let mut total = T::zero();
    let mut grad = vec![T::zero(); f_hat.len()];
    for i in 0..plane {
        let sq: T = (0..channels).map(|c| (f_hat[c * plane + i] - phi[c * plane + i]).powi(2)).sum();
        let norm = sq.sqrt();
        total = total + norm;
        if norm > T::zero() {
            for c in 0..channels {
                let j = c * plane + i;
                grad[j] = (f_hat[j] - phi[j]) / norm * inv;
            }
        }
    }
    Ok((total * inv, grad))
}

/// Per-pixel focal terms averaged, with the gradient w.r.t. the unclamped prediction.
pub fn focal_loss_grad<T: Real>(pred: &[T], mask: &[T], fp: FocalParams) -> Result<(T, Vec<T>)> {
    check_len("focal_loss", pred.len(), mask.len())?;
    check_binary("focal_loss", mask)?;
    if pred.is_empty() {
        return Err(Error::shape("focal_loss", "empty prediction"));
    }
    let eps = T::lit(FOCAL_EPS);
    let hi = T::one() - eps;
    let (ap, gamma) = (T::lit(fp.alpha_pos), T::lit(fp.gamma));
    let inv = T::one() / T::from_usize(pred.len()).unwrap();
    let mut total = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    for (i, (&p, &m)) in pred.iter().zip(mask).enumerate() {
        let pc = p.max(eps).min(hi);
        let positive = m == T::one();
        let (pt, at) = if positive { (pc, ap) } else { (T::one() - pc, T::one() - ap) };
        let q = T::one() - pt;
        let log_pt = pt.ln();
        total = total - at * q.powf(gamma) * log_pt;
        if p > eps && p < hi {
            // d/dpt of −α q^γ log pt
            let mut d = -at * q.powf(gamma) / pt;
            if fp.gamma != 0.0 {
                d = d + at * gamma * q.powf(gamma - T::one()) * log_pt;
            }
            grad[i] = if positive { d } else { -d } * inv;
        }
    }
    Ok((total * inv, grad))
}

/// Soft dice `1 − (2Σpm + ε)/(Σp + Σm + ε)` with its gradient.
pub fn dice_loss_grad<T: Real>(pred: &[T], mask: &[T], eps: f64) -> Result<(T, Vec<T>)> {
    check_len("dice_loss", pred.len(), mask.len())?;
    check_binary("dice_loss", mask)?;
    let e = T::lit(eps);
    let inter: T = pred.iter().zip(mask).map(|(&p, &m)| p * m).sum();
    let sum: T = pred.iter().copied().sum::<T>() + mask.iter().copied().sum::<T>();
    let num = T::lit(2.0) * inter + e;
    let den = sum + e;
    if den == T::zero() {
        return Err(Error::Numerical("dice denominator is zero (empty prediction and mask with ε = 0)".into()));
    }
    let grad = mask.iter().map(|&m| -(T::lit(2.0) * m * den - num) / (den * den)).collect();
    Ok((T::one() - num / den, grad))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum LossKind {
    Rec,
    Focal,
    Dice,
}

struct LossOp<T> {
    kind: LossKind,
    grad: Vec<T>,
}

impl<T: Real> CustomOp<T> for LossOp<T> {
    fn name(&self) -> &'static str {
        match self.kind {
            LossKind::Rec => "rec_loss",
            LossKind::Focal => "focal_loss",
            LossKind::Dice => "dice_loss",
        }
    }

    fn backward(&self, _inputs: &[&[T]], _output: &[T], grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let g = grad_out[0];
        let scaled: Vec<T> = self.grad.iter().map(|&d| d * g).collect();
        let mut out = vec![Some(scaled.clone())];
        if self.kind == LossKind::Rec {
            out.push(needs.get(1).copied().unwrap_or(false).then(|| scaled.iter().map(|&v| -v).collect()));
        } else {
            out.resize(needs.len(), None);
        }
        out
    }
}

/// Reconstruction loss between a `C×H×W` reconstruction and its target.
pub fn rec_loss<'g, T: Real>(f_hat: Var<'g, T>, phi: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = f_hat.shape();
    if s != phi.shape() || s.len() != 3 {
        return Err(Error::shape("rec_loss", format!("{s:?} vs {:?}", phi.shape())));
    }
    let (value, grad) = rec_loss_grad(&f_hat.value(), &phi.value(), s[0])?;
    let op = LossOp { kind: LossKind::Rec, grad };
    f_hat.graph().custom(&[f_hat, phi], vec![], vec![value], Box::new(op))
}

pub fn focal_loss<'g, T: Real>(pred: Var<'g, T>, mask: &[T], fp: FocalParams) -> Result<Var<'g, T>> {
    let (value, grad) = focal_loss_grad(&pred.value(), mask, fp)?;
    pred.graph().custom(&[pred], vec![], vec![value], Box::new(LossOp { kind: LossKind::Focal, grad }))
}

pub fn dice_loss<'g, T: Real>(pred: Var<'g, T>, mask: &[T], eps: f64) -> Result<Var<'g, T>> {
    let (value, grad) = dice_loss_grad(&pred.value(), mask, eps)?;
    pred.graph().custom(&[pred], vec![], vec![value], Box::new(LossOp { kind: LossKind::Dice, grad }))
}

/// Graph node for the summed objective together with its component report.
pub struct TotalLoss<'g, T: Real> {
    pub loss: Var<'g, T>,
    pub report: LossReport,
}

/// `L_rec + (L_focal + L_dice)` on the graph, reported from the component values.
pub fn total_loss<'g, T: Real>(rec: Var<'g, T>, pred: Var<'g, T>, mask: &[T], fp: FocalParams) -> Result<TotalLoss<'g, T>> {
    let focal = focal_loss(pred, mask, fp)?;
    let dice = dice_loss(pred, mask, DICE_EPS)?;
    let loss = rec.add(focal.add(dice)?)?;
    let report = LossReport::new(rec.item().as_f64(), focal.item().as_f64(), dice.item().as_f64());
    Ok(TotalLoss { loss, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_is_additive() {
        let r = LossReport::new(0.5, 0.2, 0.3);
        assert_eq!(r.l_ref, 0.5);
        assert_eq!(r.l_total, 1.0);
    }

    #[test]
    fn single_position_distance() {
        let mut fh = vec![0.0f64; 2 * 4];
        fh[2] = 3.0;
        fh[4 + 2] = 4.0;
        let (v, _) = rec_loss_grad(&fh, &[0.0; 8], 2).unwrap();
        assert_eq!(v, 5.0 / 4.0);
    }

    #[test]
    fn dice_small_cases() {
        let (v, _) = dice_loss_grad(&[1.0, 1.0, 0.0, 0.0], &[0.0, 1.0, 1.0, 0.0], 0.0).unwrap();
        assert_eq!(v, 0.5);
        assert!(focal_loss_grad(&[0.5f64], &[0.5], FocalParams::default()).is_err());
    }
}
