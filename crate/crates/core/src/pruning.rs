//! Importance scores, masking functions, sparsity schedules and the score
//! regularizer.
//!
//! Two quantities are kept apart throughout: *sparsity* `s` (fraction
//! removed, what the schedules produce) and *remaining ratio* `r = 1 - s`
//! (fraction kept, what the masking functions take).

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::autodiff::{sigmoid, sigmoid_grad};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{MatrixId, MatrixKind};
use crate::optim::{Optimizer, ParamState};
use crate::tensor::Tensor;

/// Slack used when converting a ratio into an entry count, so that
/// `0.3 * 10` rounds to 3 rather than 4.
const COUNT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskingFunction {
    /// Top-k within every matrix at the same remaining ratio.
    Local,
    /// One top-k over the concatenation of every matrix.
    Global,
    /// Per-layer ratios allocated from each matrix's summed sigmoid scores.
    Smp,
    /// Keep `sigmoid(S) > tau`; sparsity is not controlled.
    Threshold(f64),
}

impl MaskingFunction {
    pub fn name(&self) -> &'static str {
        match self {
            MaskingFunction::Local => "local",
            MaskingFunction::Global => "global",
            MaskingFunction::Smp => "smp",
            MaskingFunction::Threshold(_) => "threshold",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SparsitySchedule {
    /// Cubic ramp from 0 at step 0 to `final_sparsity` at `ramp_steps`.
    WarmupFree {
        final_sparsity: f64,
        ramp_steps: usize,
    },
    /// Automated gradual pruning: cubic ramp from `initial_sparsity` starting
    /// at `start_step`, updated every `frequency` steps for `ramp_steps`
    /// pruning steps.
    Background {
        initial_sparsity: f64,
        final_sparsity: f64,
        start_step: usize,
        ramp_steps: usize,
        frequency: usize,
    },
}

impl SparsitySchedule {
    pub fn warmup_free(final_sparsity: f64, ramp_steps: usize) -> Result<Self> {
        let s = SparsitySchedule::WarmupFree {
            final_sparsity,
            ramp_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (vf, n) = (self.final_sparsity(), self.ramp_steps());
        if !(0.0..1.0).contains(&vf) {
            return Err(Error::Config(format!("final sparsity {vf} outside [0, 1)")));
        }
        if n == 0 {
            return Err(Error::Config("ramp steps must be at least 1".into()));
        }
        if let SparsitySchedule::Background {
            initial_sparsity,
            frequency,
            ..
        } = *self
        {
            if !(0.0..=vf).contains(&initial_sparsity) {
                return Err(Error::Config(format!(
                    "initial sparsity {initial_sparsity} must lie in [0, {vf}]"
                )));
            }
            if frequency == 0 {
                return Err(Error::Config("pruning frequency must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn final_sparsity(&self) -> f64 {
        match *self {
            SparsitySchedule::WarmupFree { final_sparsity, .. }
            | SparsitySchedule::Background { final_sparsity, .. } => final_sparsity,
        }
    }

    pub fn ramp_steps(&self) -> usize {
        match *self {
            SparsitySchedule::WarmupFree { ramp_steps, .. }
            | SparsitySchedule::Background { ramp_steps, .. } => ramp_steps,
        }
    }

    /// Target sparsity at training step `t`.
    pub fn sparsity_at(&self, t: usize) -> f64 {
        match *self {
            SparsitySchedule::WarmupFree {
                final_sparsity: vf,
                ramp_steps: n,
            } => {
                if t >= n {
                    vf
                } else {
                    let frac = 1.0 - t as f64 / n as f64;
                    vf - vf * frac * frac * frac
                }
            }
            SparsitySchedule::Background {
                initial_sparsity: v0,
                final_sparsity: vf,
                start_step: t0,
                ramp_steps: n,
                frequency: dt,
            } => {
                let span = n * dt;
                // sparsity only changes on pruning steps t0 + k·dt
                let elapsed = t.saturating_sub(t0) / dt * dt;
                if t < t0 || elapsed == 0 {
                    return v0;
                }
                if elapsed >= span {
                    return vf;
                }
                let frac = 1.0 - elapsed as f64 / span as f64;
                vf + (v0 - vf) * frac * frac * frac
            }
        }
    }
}

/// Entries kept by a remaining ratio `r` over `n` entries: `⌈r·n⌉`, at least 1.
pub fn keep_count(r: f64, n: usize) -> usize {
    ((r * n as f64 - COUNT_EPS).ceil().max(1.0) as usize).min(n)
}

fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("remaining ratio {r} outside (0, 1]")))
    }
}

/// Orders `(score, flat index)` pairs: higher score first, lower index on ties.
fn rank_order(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Flat indices of the `k` best entries of `values` under [`rank_order`].
fn select_top(values: impl Iterator<Item = f64>, k: usize) -> Vec<usize> {
    let mut items: Vec<(f64, usize)> = values.enumerate().map(|(i, v)| (v, i)).collect();
    if k == 0 {
        return vec![];
    }
    if k < items.len() {
        items.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        items.truncate(k);
    }
    items.into_iter().map(|(_, i)| i).collect()
}

/// Keeps the `k` highest-scoring entries of one matrix.
pub fn top_k_mask(scores: &Tensor, k: usize) -> Mask {
    let mut mask = Mask::zeros(scores.rows(), scores.cols());
    let cols = scores.cols();
    for i in select_top(scores.data().iter().copied(), k) {
        mask.set(i / cols, i % cols, true);
    }
    mask
}

pub fn mask_local(scores: &[&Tensor], r: f64) -> Result<Vec<Mask>> {
    check_ratio(r)?;
    Ok(scores
        .iter()
        .map(|s| top_k_mask(s, keep_count(r, s.numel())))
        .collect())
}

pub fn mask_global(scores: &[&Tensor], r: f64) -> Result<Vec<Mask>> {
    check_ratio(r)?;
    let total: usize = scores.iter().map(|s| s.numel()).sum();
    let k = keep_count(r, total);
    let mut masks: Vec<Mask> = scores
        .iter()
        .map(|s| Mask::zeros(s.rows(), s.cols()))
        .collect();
    let starts: Vec<usize> = scores
        .iter()
        .scan(0, |acc, s| {
            let start = *acc;
            *acc += s.numel();
            Some(start)
        })
        .collect();
    let all = scores.iter().flat_map(|s| s.data().iter().copied());
    for flat in select_top(all, k) {
        let m = starts.partition_point(|&s| s <= flat) - 1;
        let local = flat - starts[m];
        let cols = scores[m].cols();
        masks[m].set(local / cols, local % cols, true);
    }
    Ok(masks)
}

/// `R(S) = Σ σ(S_ij)`.
pub fn sigmoid_mass(scores: &Tensor) -> f64 {
    scores.data().iter().map(|&s| sigmoid(s)).sum()
}

/// Per-layer keep ratios for one matrix type: proportional to each layer's
/// sigmoid mass with mean `r`. Ratios above 1 are clamped and the excess is
/// handed to the unclamped layers in proportion to their mass, repeated
/// until no ratio exceeds 1.
pub fn smp_keep_ratios(masses: &[f64], r: f64) -> Vec<f64> {
    let layers = masses.len();
    let mut ratios = vec![0.0; layers];
    let mut clamped = vec![false; layers];
    loop {
        let free_mass: f64 = (0..layers)
            .filter(|&l| !clamped[l])
            .map(|l| masses[l])
            .sum();
        let n_clamped = clamped.iter().filter(|&&c| c).count();
        let budget = r * layers as f64 - n_clamped as f64;
        let n_free = layers - n_clamped;
        let mut changed = false;
        for l in 0..layers {
            if clamped[l] {
                ratios[l] = 1.0;
                continue;
            }
            ratios[l] = if free_mass > 0.0 {
                masses[l] / free_mass * budget
            } else {
                budget / n_free as f64
            };
            if ratios[l] > 1.0 {
                clamped[l] = true;
                changed = true;
            }
        }
        if !changed {
            return ratios;
        }
    }
}

/// Masks using per-(layer, type) keep ratios from [`smp_keep_ratios`].
/// `ids[i]` names the matrix that `scores[i]` belongs to.
pub fn mask_smp(scores: &[&Tensor], ids: &[MatrixId], r: f64) -> Result<Vec<Mask>> {
    let ratios = smp_allocation(scores, ids, r)?;
    Ok(scores
        .iter()
        .zip(&ratios)
        .map(|(s, &v)| top_k_mask(s, keep_count(v, s.numel())))
        .collect())
}

/// Keep ratio assigned to every matrix by the SMP masking function.
pub fn smp_allocation(scores: &[&Tensor], ids: &[MatrixId], r: f64) -> Result<Vec<f64>> {
    check_ratio(r)?;
    if scores.len() != ids.len() {
        return Err(Error::Contract(format!(
            "{} score matrices but {} ids",
            scores.len(),
            ids.len()
        )));
    }
    let mut by_kind: BTreeMap<MatrixKind, Vec<usize>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        by_kind.entry(id.kind).or_default().push(i);
    }
    let mut ratios = vec![0.0; scores.len()];
    for members in by_kind.values() {
        let masses: Vec<f64> = members.iter().map(|&i| sigmoid_mass(scores[i])).collect();
        for (&i, v) in members.iter().zip(smp_keep_ratios(&masses, r)) {
            ratios[i] = v;
        }
    }
    Ok(ratios)
}

/// Keeps entries with `σ(S) > tau`.
pub fn mask_threshold(scores: &Tensor, tau: f64) -> Result<Mask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("threshold {tau} outside (0, 1)")));
    }
    let bits = scores.data().iter().map(|&s| sigmoid(s) > tau).collect();
    Mask::new(scores.rows(), scores.cols(), bits)
}

/// Applies any masking function to a full set of score matrices.
pub fn compute_masks(
    func: MaskingFunction,
    scores: &[&Tensor],
    ids: &[MatrixId],
    r: f64,
) -> Result<Vec<Mask>> {
    match func {
        MaskingFunction::Local => mask_local(scores, r),
        MaskingFunction::Global => mask_global(scores, r),
        MaskingFunction::Smp => mask_smp(scores, ids, r),
        MaskingFunction::Threshold(tau) => scores.iter().map(|s| mask_threshold(s, tau)).collect(),
    }
}

/// Magnitude importance: `|W|`.
pub fn compute_scores_magnitude(weight: &Tensor) -> Tensor {
    weight.map(f64::abs)
}

/// Movement accumulation `S ← S − α·(∂L/∂W′)·W`.
pub fn update_scores_movement(
    scores: &mut Tensor,
    grad: &Tensor,
    weight: &Tensor,
    lr: f64,
) -> Result<()> {
    if scores.shape() != grad.shape() || scores.shape() != weight.shape() {
        return Err(Error::shape(
            "update_scores_movement",
            &[scores.shape(), grad.shape(), weight.shape()],
        ));
    }
    for ((s, g), w) in scores
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(weight.data())
    {
        *s -= lr * g * w;
    }
    Ok(())
}

/// One optimizer step on frozen-weight scores. `ste_grad` is `∂L/∂S`
/// from the tape (`(∂L/∂W′)⊙W`); `reg_grad` is added to it when present.
pub fn update_scores_smp(
    scores: &mut Tensor,
    ste_grad: Option<&Tensor>,
    reg_grad: Option<&Tensor>,
    optimizer: &Optimizer,
    state: &mut ParamState,
) -> Result<()> {
    let ste = ste_grad.ok_or_else(|| {
        Error::Contract("update_scores_smp: missing straight-through gradient".into())
    })?;
    if ste.shape() != scores.shape() || reg_grad.is_some_and(|r| r.shape() != scores.shape()) {
        return Err(Error::shape(
            "update_scores_smp",
            &[scores.shape(), ste.shape()],
        ));
    }
    let grad: Vec<f64> = match reg_grad {
        Some(r) => ste
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| a + b)
            .collect(),
        None => ste.data().to_vec(),
    };
    optimizer.step(scores.data_mut(), &grad, state);
    Ok(())
}

/// Value and per-score gradient of `λ·(s_t/v_f)·Σσ(S)`.
#[derive(Debug, Clone)]
pub struct Regularization {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

pub fn regularizer(
    scores: &[&Tensor],
    lambda: f64,
    sparsity: f64,
    final_sparsity: f64,
) -> Result<Regularization> {
    if !(final_sparsity > 0.0) {
        return Err(Error::Config(format!(
            "regularizer needs a positive final sparsity, got {final_sparsity}"
        )));
    }
    let scale = lambda * sparsity / final_sparsity;
    let value = scale * scores.iter().map(|s| sigmoid_mass(s)).sum::<f64>();
    let grads = scores
        .iter()
        .map(|s| s.map(|v| scale * sigmoid_grad(v)))
        .collect();
    Ok(Regularization { value, grads })
}
