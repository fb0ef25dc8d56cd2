//! Training loops: frozen-weight score learning plus the magnitude,
//! movement and dense baselines that fine-tune weights.

use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analyze::{head_distribution, layer_distribution, DensityTable};
use crate::artifact::MaskArtifact;
use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{EncoderModel, Trainable, ACTIVATION, INIT_SCHEME};
use crate::optim::{Optimizer, ParamState};
use crate::pruning::{
    compute_masks, compute_scores_magnitude, regularizer, update_scores_movement,
    update_scores_smp, MaskingFunction, SparsitySchedule,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Frozen weights; only importance scores learn.
    Smp,
    Magnitude,
    Movement,
    /// Weight fine-tuning without masks (teacher and reference runs).
    Dense,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Smp,
        Method::Magnitude,
        Method::Movement,
        Method::Dense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Smp => "smp",
            Method::Magnitude => "magnitude",
            Method::Movement => "movement",
            Method::Dense => "dense",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    fn trains_weights(self) -> bool {
        self != Method::Smp
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_LAMBDA_R: f64 = 400.0;
pub const DEFAULT_SCORE_LR: f64 = 2e-2;
pub const DEFAULT_WEIGHT_LR: f64 = 1e-3;
/// Fraction of all steps spent ramping sparsity when no ramp length is given.
pub const DEFAULT_RAMP_FRACTION: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub masking: MaskingFunction,
    /// Final remaining ratio `r_f = 1 - v_f`.
    pub remaining: f64,
    pub ramp_steps: Option<usize>,
    pub lambda_r: f64,
    pub score_lr: f64,
    /// Baselines only; must be `None` for `smp`.
    pub weight_lr: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub kd: bool,
    pub teacher: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Smp,
            masking: MaskingFunction::Smp,
            remaining: 0.5,
            ramp_steps: None,
            lambda_r: DEFAULT_LAMBDA_R,
            score_lr: DEFAULT_SCORE_LR,
            weight_lr: None,
            batch_size: 32,
            epochs: 4,
            kd: false,
            teacher: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.remaining > 0.0 && self.remaining <= 1.0) {
            return bad(format!("remaining ratio {} outside (0, 1]", self.remaining));
        }
        if self.method == Method::Smp && self.weight_lr.is_some() {
            return bad("smp keeps weights frozen; weight_lr must be unset".into());
        }
        if self.method == Method::Dense && self.remaining != 1.0 {
            return bad("dense runs keep every weight; remaining must be 1".into());
        }
        if self.kd && self.teacher.is_none() {
            return bad("knowledge distillation requires a teacher checkpoint".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.ramp_steps == Some(0) {
            return bad("ramp_steps must be positive".into());
        }
        if !(self.lambda_r >= 0.0 && self.lambda_r.is_finite()) {
            return bad(format!(
                "lambda_r {} must be finite and non-negative",
                self.lambda_r
            ));
        }
        if !(self.score_lr > 0.0 && self.score_lr.is_finite()) {
            return bad(format!("score lr {} must be positive", self.score_lr));
        }
        if let Some(lr) = self.weight_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("weight lr {lr} must be positive"));
            }
        }
        if let MaskingFunction::Threshold(tau) = self.masking {
            if !(tau > 0.0 && tau < 1.0) {
                return bad(format!("threshold {tau} outside (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        self.epochs * self.steps_per_epoch(train_len)
    }

    pub fn schedule(&self, train_len: usize) -> Result<SparsitySchedule> {
        let total = self.total_steps(train_len);
        let ramp = self
            .ramp_steps
            .unwrap_or(((total as f64 * DEFAULT_RAMP_FRACTION).round() as usize).max(1));
        SparsitySchedule::warmup_free(1.0 - self.remaining, ramp)
    }

    fn weight_optimizer(&self) -> Optimizer {
        Optimizer::adam(self.weight_lr.unwrap_or(DEFAULT_WEIGHT_LR))
    }

    /// Every setting as `key=value` pairs, in a stable order.
    pub fn echo(&self) -> Vec<(String, String)> {
        let masking = match self.masking {
            MaskingFunction::Threshold(t) => format!("threshold:{t}"),
            m => m.name().to_string(),
        };
        [
            ("method", self.method.name().to_string()),
            ("mask_fn", masking),
            ("remaining", self.remaining.to_string()),
            (
                "ramp_steps",
                self.ramp_steps.map(|v| v.to_string()).unwrap_or_default(),
            ),
            ("lambda_r", self.lambda_r.to_string()),
            ("score_lr", self.score_lr.to_string()),
            (
                "weight_lr",
                self.weight_lr.map(|v| v.to_string()).unwrap_or_default(),
            ),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("kd", self.kd.to_string()),
            (
                "teacher",
                self.teacher
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub sparsity: f64,
    /// Training-batch accuracy.
    pub accuracy: f64,
    pub regularizer: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub config_echo: Vec<(String, String)>,
    pub steps: Vec<StepMetrics>,
    pub planned_steps: usize,
    pub ramp_steps: usize,
    pub epoch_dev_accuracy: Vec<f64>,
    pub final_dev_accuracy: Option<f64>,
    pub final_density: Option<f64>,
    pub layer_densities: DensityTable,
    pub head_densities: DensityTable,
    pub trainable_params: usize,
    pub frozen_checksum_before: u64,
    pub frozen_checksum_after: Option<u64>,
    pub weight_checksum_before: u64,
    pub weight_checksum_after: Option<u64>,
    pub activation: String,
    pub init_scheme: String,
    pub aborted: Option<String>,
}

impl RunReport {
    /// `step,loss,sparsity,accuracy` lines followed by a `#`-prefixed
    /// `key=value` summary block.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,sparsity,accuracy\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{:.8},{:.8},{:.6}\n",
                s.step, s.loss, s.sparsity, s.accuracy
            ));
        }
        for (k, v) in self.summary() {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out
    }

    pub fn summary(&self) -> Vec<(String, String)> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into());
        let hex = |v: Option<u64>| {
            v.map(|x| format!("{x:016x}"))
                .unwrap_or_else(|| "NA".into())
        };
        let mut out = self.config_echo.clone();
        out.extend(
            [
                ("steps_run", self.steps.len().to_string()),
                ("planned_steps", self.planned_steps.to_string()),
                ("ramp_steps_effective", self.ramp_steps.to_string()),
                (
                    "epoch_dev_accuracy",
                    self.epoch_dev_accuracy
                        .iter()
                        .map(|a| format!("{a:.6}"))
                        .collect::<Vec<_>>()
                        .join(";"),
                ),
                ("final_dev_accuracy", opt(self.final_dev_accuracy)),
                ("final_density", opt(self.final_density)),
                ("trainable_params", self.trainable_params.to_string()),
                (
                    "frozen_checksum_before",
                    hex(Some(self.frozen_checksum_before)),
                ),
                ("frozen_checksum_after", hex(self.frozen_checksum_after)),
                (
                    "weight_checksum_before",
                    hex(Some(self.weight_checksum_before)),
                ),
                ("weight_checksum_after", hex(self.weight_checksum_after)),
                ("activation", self.activation.clone()),
                ("init_scheme", self.init_scheme.clone()),
                (
                    "aborted",
                    self.aborted.clone().unwrap_or_else(|| "no".into()),
                ),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v)),
        );
        out
    }
}

/// Trainable tensor count for a method: scores, weights, or both.
pub fn trainable_param_count(method: Method, model: &EncoderModel) -> usize {
    let p = model.config.prunable_params();
    match method {
        Method::Smp | Method::Magnitude | Method::Dense => p,
        Method::Movement => 2 * p,
    }
}

/// Mutable training state of one run.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: EncoderModel,
    pub schedule: SparsitySchedule,
    teacher: Option<&'a EncoderModel>,
    score_opt: Optimizer,
    weight_opt: Optimizer,
    score_states: Vec<ParamState>,
    weight_states: Vec<ParamState>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        model: EncoderModel,
        schedule: SparsitySchedule,
        teacher: Option<&'a EncoderModel>,
    ) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        if config.kd {
            let t = teacher.ok_or_else(|| {
                Error::Config("knowledge distillation requires a teacher model".into())
            })?;
            if t.config.num_labels != model.config.num_labels {
                return Err(Error::Config(format!(
                    "teacher has {} labels, student {}",
                    t.config.num_labels, model.config.num_labels
                )));
            }
        }
        let n = model.matrix_ids().len();
        let teacher = if config.kd { teacher } else { None };
        Ok(Trainer {
            score_opt: Optimizer::adam(config.score_lr),
            weight_opt: config.weight_optimizer(),
            score_states: vec![ParamState::default(); n],
            weight_states: vec![ParamState::default(); n],
            config,
            model,
            schedule,
            teacher,
        })
    }

    /// Recomputes every mask for remaining ratio `r` from the current scores.
    pub fn refresh_masks(&mut self, r: f64) -> Result<()> {
        let ids = self.model.matrix_ids();
        let masks = match self.config.method {
            Method::Dense => ids
                .iter()
                .map(|&id| {
                    let m = self.model.matrix(id);
                    Mask::ones(m.weight.rows(), m.weight.cols())
                })
                .collect(),
            Method::Magnitude => {
                let scores: Vec<Tensor> = ids
                    .iter()
                    .map(|&id| compute_scores_magnitude(&self.model.matrix(id).weight))
                    .collect();
                let refs: Vec<&Tensor> = scores.iter().collect();
                compute_masks(self.config.masking, &refs, &ids, r)?
            }
            Method::Smp | Method::Movement => {
                let refs: Vec<&Tensor> = ids
                    .iter()
                    .map(|&id| &self.model.matrix(id).scores)
                    .collect();
                compute_masks(self.config.masking, &refs, &ids, r)?
            }
        };
        self.model.set_masks(&masks)
    }

    pub fn step(&mut self, t: usize, batch: &[&[usize]], labels: &[usize]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let method = self.config.method;
        let sparsity = self.schedule.sparsity_at(t);
        self.refresh_masks(1.0 - sparsity)?;

        let mut tape = Tape::new();
        let mode = if method.trains_weights() {
            Trainable::Weights
        } else {
            Trainable::Scores
        };
        let pass = self.model.forward_batch(&mut tape, batch, mode)?;
        let mut loss = tape.cross_entropy(pass.logits, labels)?;
        if let Some(teacher) = self.teacher {
            let target: Vec<f64> = teacher.forward_many(batch)?.into_iter().flatten().collect();
            let mut target = Tensor::new(vec![batch.len(), self.model.config.num_labels], target)?;
            for row in target.data_mut().chunks_mut(self.model.config.num_labels) {
                let logits = row.to_vec();
                crate::autodiff::softmax_row(&logits, row);
            }
            let p_t = tape.constant(target);
            let p_s = tape.softmax(pass.logits)?;
            let kd = tape.kl_divergence(p_s, p_t)?;
            loss = tape.add(loss, kd)?;
        }
        let logits = tape.value(pass.logits);
        let correct = (0..batch.len())
            .filter(|&i| argmax(logits.row(i)) == labels[i])
            .count();
        let accuracy = correct as f64 / batch.len() as f64;
        let mut loss_value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;

        let ids = self.model.matrix_ids();
        let vf = self.schedule.final_sparsity();
        let mut reg_value = 0.0;
        match method {
            Method::Smp => {
                let reg = if self.config.lambda_r > 0.0 && vf > 0.0 {
                    let refs: Vec<&Tensor> = ids
                        .iter()
                        .map(|&id| &self.model.matrix(id).scores)
                        .collect();
                    Some(regularizer(&refs, self.config.lambda_r, sparsity, vf)?)
                } else {
                    None
                };
                if let Some(r) = &reg {
                    reg_value = r.value;
                    loss_value += r.value;
                }
                check_finite(t, loss_value, &self.score_opt, &self.model)?;
                for (i, b) in pass.bound.iter().enumerate() {
                    let g = b.scores.and_then(|s| grads.take(s));
                    let reg_g = reg.as_ref().map(|r| &r.grads[i]);
                    update_scores_smp(
                        &mut self.model.matrix_mut(b.id).scores,
                        g.as_ref(),
                        reg_g,
                        &self.score_opt,
                        &mut self.score_states[i],
                    )?;
                }
            }
            _ => {
                check_finite(t, loss_value, &self.weight_opt, &self.model)?;
                for (i, b) in pass.bound.iter().enumerate() {
                    if method == Method::Movement {
                        let g_eff = grads.take(b.effective).ok_or_else(|| {
                            Error::Contract("movement: missing masked-weight gradient".into())
                        })?;
                        let m = self.model.matrix_mut(b.id);
                        update_scores_movement(
                            &mut m.scores,
                            &g_eff,
                            &m.weight,
                            self.config.score_lr,
                        )?;
                    }
                    let gw = grads
                        .take(b.weight)
                        .ok_or_else(|| Error::Contract("missing weight gradient".into()))?;
                    let m = self.model.matrix_mut(b.id);
                    self.weight_opt.step(
                        m.weight.data_mut(),
                        gw.data(),
                        &mut self.weight_states[i],
                    );
                }
            }
        }
        debug_assert_eq!(ids.len(), pass.bound.len());
        Ok(StepMetrics {
            step: t,
            loss: loss_value,
            sparsity,
            accuracy,
            regularizer: reg_value,
        })
    }
}

fn check_finite(step: usize, loss: f64, opt: &Optimizer, model: &EncoderModel) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    let (mut lo, mut hi, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for id in model.matrix_ids() {
        for &s in model.matrix(id).scores.data() {
            lo = lo.min(s);
            hi = hi.max(s);
            sum += s;
            n += 1;
        }
    }
    Err(Error::Diverged(format!(
        "non-finite loss {loss} at step {step} (lr {}); scores min {lo:.6e} max {hi:.6e} mean {:.6e}",
        opt.lr(),
        sum / n.max(1) as f64
    )))
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Dev-set accuracy of the model with its current masks.
pub fn evaluate(model: &EncoderModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let mut correct = 0;
    for chunk in data.examples.chunks(256) {
        let batch: Vec<&[usize]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        let logits = model.forward_many(&batch)?;
        correct += chunk
            .iter()
            .zip(&logits)
            .filter(|(e, l)| argmax(l) == e.label)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub model: EncoderModel,
    pub artifact: MaskArtifact,
}

/// A failed run with whatever was recorded before the failure.
#[derive(Debug)]
pub struct RunAbort {
    pub error: Error,
    pub report: Box<RunReport>,
}

impl From<RunAbort> for Error {
    fn from(a: RunAbort) -> Self {
        a.error
    }
}

/// Runs a full training loop. `teacher` is required when `config.kd` is set.
pub fn train_run(
    config: &TrainConfig,
    model: EncoderModel,
    train: &Dataset,
    dev: &Dataset,
    teacher: Option<&EncoderModel>,
) -> std::result::Result<RunOutput, RunAbort> {
    let mut report = RunReport {
        config_echo: config.echo(),
        frozen_checksum_before: model.frozen_checksum(),
        weight_checksum_before: model.weight_checksum(),
        trainable_params: trainable_param_count(config.method, &model),
        activation: ACTIVATION.to_string(),
        init_scheme: INIT_SCHEME.to_string(),
        ..RunReport::default()
    };
    let abort = |error: Error, mut report: RunReport| {
        report.aborted = Some(error.to_string());
        RunAbort {
            error,
            report: Box::new(report),
        }
    };
    let setup = (|| -> Result<Trainer> {
        config.validate()?;
        let c = &model.config;
        if train.is_empty() || dev.is_empty() {
            return Err(Error::Dataset(
                "training and dev sets must be non-empty".into(),
            ));
        }
        if train.num_labels != c.num_labels || dev.num_labels != c.num_labels {
            return Err(Error::Dataset(format!(
                "dataset has {} labels, model {}",
                train.num_labels, c.num_labels
            )));
        }
        train.validate(c.vocab_size, c.max_seq_len, c.cls_token_id)?;
        dev.validate(c.vocab_size, c.max_seq_len, c.cls_token_id)?;
        let teacher = if config.kd {
            Some(teacher.ok_or_else(|| {
                Error::Config("knowledge distillation requires a teacher model".into())
            })?)
        } else {
            None
        };
        let schedule = config.schedule(train.len())?;
        Trainer::new(config.clone(), model.clone(), schedule, teacher)
    })();
    let mut trainer = match setup {
        Ok(t) => t,
        Err(e) => return Err(abort(e, report)),
    };
    report.planned_steps = config.total_steps(train.len());
    report.ramp_steps = trainer.schedule.ramp_steps();

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut t = 0;
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&[usize]> = idx
                .iter()
                .map(|&i| train.examples[i].tokens.as_slice())
                .collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.examples[i].label).collect();
            match trainer.step(t, &batch, &labels) {
                Ok(m) => report.steps.push(m),
                Err(e) => return Err(abort(e, report)),
            }
            t += 1;
        }
        match evaluate(&trainer.model, dev) {
            Ok(a) => report.epoch_dev_accuracy.push(a),
            Err(e) => return Err(abort(e, report)),
        }
    }

    let finish = (|| -> Result<MaskArtifact> {
        let final_r = 1.0 - trainer.schedule.sparsity_at(t);
        trainer.refresh_masks(final_r)?;
        let masks = trainer.model.masks();
        let c = trainer.model.config;
        report.final_dev_accuracy = Some(evaluate(&trainer.model, dev)?);
        let kept: usize = masks.iter().map(Mask::count_ones).sum();
        let total: usize = masks.iter().map(Mask::len).sum();
        report.final_density = Some(kept as f64 / total as f64);
        report.layer_densities = layer_distribution(&masks, &c)?;
        report.head_densities = head_distribution(&masks, &c)?;
        report.frozen_checksum_after = Some(trainer.model.frozen_checksum());
        report.weight_checksum_after = Some(trainer.model.weight_checksum());
        MaskArtifact::from_masks(&c, &masks, false)
    })();
    match finish {
        Ok(artifact) => Ok(RunOutput {
            report,
            model: trainer.model,
            artifact,
        }),
        Err(e) => Err(abort(e, report)),
    }
}
