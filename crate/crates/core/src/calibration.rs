//! Segmentation loss, perturbed boundary loss and the Dice metric.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Rng, Tape, Tensor, Var};

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// Smoothing constant of the soft Dice loss.
pub const DICE_SMOOTHING: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibrationError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("target must be binary, found {0}")]
    NonBinaryTarget(f64),
    #[error("mask must be binary, found {0}")]
    NonBinaryInput(f64),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PblConfig {
    pub tau: f64,
    pub lambda: f64,
    pub noise_variance: f64,
}

impl Default for PblConfig {
    fn default() -> Self {
        PblConfig {
            tau: 0.75,
            lambda: 0.1,
            noise_variance: 0.1,
        }
    }
}

impl PblConfig {
    /// `tau ≥ 1` is accepted: it switches the perturbation off entirely.
    pub fn validate(&self) -> Result<(), CalibrationError> {
        let ok = self.tau > 0.0
            && self.tau.is_finite()
            && (0.0..=1.0).contains(&self.lambda)
            && self.noise_variance >= 0.0
            && self.noise_variance.is_finite();
        if ok {
            Ok(())
        } else {
            Err(CalibrationError::InvalidConfig(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg_loss: f64,
    pub perturbed_loss: f64,
    pub composite: f64,
    /// BCE part of `seg_loss`.
    pub bce: f64,
    /// Dice-loss part of `seg_loss`.
    pub dice_term: f64,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<(), CalibrationError> {
    if a.shape() != b.shape() {
        return Err(CalibrationError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_binary(t: &Tensor, err: fn(f64) -> CalibrationError) -> Result<(), CalibrationError> {
    match t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(&v) => Err(err(v)),
        None => Ok(()),
    }
}

/// Handles for the pieces of the segmentation loss recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SegLossVars {
    pub total: Var,
    pub bce: Var,
    pub dice_term: Var,
}

/// `0.5 · mean BCE + (1 − (2Σσ(x)y + s) / (Σσ(x) + Σy + s))`, summed over
/// the whole tensor.
pub fn segmentation_loss_on_tape(tape: &mut Tape, logits: Var, target: Var) -> Result<SegLossVars, CalibrationError> {
    same_shape(tape.value(logits), tape.value(target), "segmentation_loss")?;
    check_binary(tape.value(target), CalibrationError::NonBinaryTarget)?;
    let bce_map = tape.bce_with_logits(logits, target)?;
    let bce = tape.mean(bce_map)?;
    let probs = tape.sigmoid(logits)?;
    let overlap = tape.mul(probs, target)?;
    let overlap = tape.sum(overlap)?;
    let mass = tape.sum(probs)?;
    let target_mass: f64 = tape.value(target).data().iter().sum();
    let num = tape.scale(overlap, 2.0)?;
    let num = tape.add_scalar(num, DICE_SMOOTHING)?;
    let den = tape.add_scalar(mass, target_mass + DICE_SMOOTHING)?;
    let ratio = tape.div(num, den)?;
    let dice_term = tape.scale(ratio, -1.0)?;
    let dice_term = tape.add_scalar(dice_term, 1.0)?;
    let half_bce = tape.scale(bce, 0.5)?;
    let total = tape.add(half_bce, dice_term)?;
    Ok(SegLossVars { total, bce, dice_term })
}

pub fn segmentation_loss(logits: &Tensor, target: &Tensor) -> Result<f64, CalibrationError> {
    let mut tape = Tape::new();
    let (l, t) = (tape.constant(logits.clone()), tape.constant(target.clone()));
    let vars = segmentation_loss_on_tape(&mut tape, l, t)?;
    Ok(scalar(&tape, vars.total))
}

/// `δ = 1` where `|y − σ(x)| > τ`, else 0.
pub fn inconsistency_mask(target: &Tensor, logits: &Tensor, tau: f64) -> Result<Tensor, CalibrationError> {
    same_shape(target, logits, "inconsistency_mask")?;
    check_binary(target, CalibrationError::NonBinaryTarget)?;
    let data = target
        .data()
        .iter()
        .zip(logits.data())
        .map(|(&y, &x)| if (y - crate::autodiff::kernels::sigmoid(x)).abs() > tau { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::new(target.shape().to_vec(), data)?)
}

/// Noise `δ·ε`, `ε ~ N(0, variance)`. Draws are taken only where `δ = 1`,
/// in row-major order.
pub fn perturbation_noise(delta: &Tensor, rng: &mut Rng, variance: f64) -> Result<Tensor, CalibrationError> {
    check_binary(delta, CalibrationError::NonBinaryInput)?;
    let mut noise = Vec::with_capacity(delta.numel());
    for &d in delta.data() {
        noise.push(if d == 1.0 { rng.gaussian(0.0, variance)? } else { 0.0 });
    }
    Ok(Tensor::new(delta.shape().to_vec(), noise)?)
}

/// `x + δ·ε`.
pub fn perturb_logits(logits: &Tensor, delta: &Tensor, rng: &mut Rng, variance: f64) -> Result<Tensor, CalibrationError> {
    same_shape(logits, delta, "perturb_logits")?;
    let noise = perturbation_noise(delta, rng, variance)?;
    let data = logits
        .data()
        .iter()
        .zip(noise.data())
        .zip(delta.data())
        .map(|((&x, &e), &d)| if d == 1.0 { x + e } else { x })
        .collect();
    Ok(Tensor::new(logits.shape().to_vec(), data)?)
}

/// Records `L = (1 − λ)·L_s + λ·L_p` on the tape and returns its handle
/// along with the numeric breakdown. The noise is a constant, so the
/// perturbed branch differentiates through the logits only.
pub fn composite_pbl_on_tape(
    tape: &mut Tape,
    logits: Var,
    target: Var,
    cfg: &PblConfig,
    rng: &mut Rng,
) -> Result<(Var, LossBreakdown), CalibrationError> {
    cfg.validate()?;
    let seg = segmentation_loss_on_tape(tape, logits, target)?;
    let delta = inconsistency_mask(tape.value(target), tape.value(logits), cfg.tau)?;
    let noise = perturbation_noise(&delta, rng, cfg.noise_variance)?;
    let noise = tape.constant(noise);
    let perturbed = tape.add(logits, noise)?;
    let pert = segmentation_loss_on_tape(tape, perturbed, target)?;
    let clean = tape.scale(seg.total, 1.0 - cfg.lambda)?;
    let noisy = tape.scale(pert.total, cfg.lambda)?;
    let composite = tape.add(clean, noisy)?;
    let breakdown = LossBreakdown {
        seg_loss: scalar(tape, seg.total),
        perturbed_loss: scalar(tape, pert.total),
        composite: scalar(tape, composite),
        bce: scalar(tape, seg.bce),
        dice_term: scalar(tape, seg.dice_term),
    };
    Ok((composite, breakdown))
}

pub fn composite_pbl_loss(
    logits: &Tensor,
    target: &Tensor,
    cfg: &PblConfig,
    rng: &mut Rng,
) -> Result<LossBreakdown, CalibrationError> {
    let mut tape = Tape::new();
    let (l, t) = (tape.constant(logits.clone()), tape.constant(target.clone()));
    Ok(composite_pbl_on_tape(&mut tape, l, t, cfg, rng)?.1)
}

/// `2|P ∩ Y| / (|P| + |Y|)`, and 1 when both masks are empty.
pub fn dice_score(pred_mask: &Tensor, target_mask: &Tensor) -> Result<f64, CalibrationError> {
    same_shape(pred_mask, target_mask, "dice_score")?;
    check_binary(pred_mask, CalibrationError::NonBinaryInput)?;
    check_binary(target_mask, CalibrationError::NonBinaryInput)?;
    let (mut both, mut total) = (0usize, 0usize);
    for (&p, &y) in pred_mask.data().iter().zip(target_mask.data()) {
        both += (p == 1.0 && y == 1.0) as usize;
        total += (p == 1.0) as usize + (y == 1.0) as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * both as f64 / total as f64 })
}

/// Hard mask `σ(x) > 0.5`, i.e. `x > 0`.
pub fn binarize_logits(logits: &Tensor) -> Tensor {
    logits
        .map(|x| if x > 0.0 { 1.0 } else { 0.0 })
        .expect("0/1 values are finite")
}

/// Dice of each sample of `[B, ...]` logits against `[B, ...]` masks.
pub fn per_sample_dice(logits: &Tensor, masks: &Tensor) -> Result<Vec<f64>, CalibrationError> {
    same_shape(logits, masks, "per_sample_dice")?;
    let b = logits.shape()[0];
    let per = logits.numel() / b;
    let pred = binarize_logits(logits);
    (0..b)
        .map(|i| {
            let p = Tensor::new(vec![per], pred.data()[i * per..(i + 1) * per].to_vec())?;
            let y = Tensor::new(vec![per], masks.data()[i * per..(i + 1) * per].to_vec())?;
            dice_score(&p, &y)
        })
        .collect()
}
