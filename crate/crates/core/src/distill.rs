//! Distillation objective of one model: cross-entropy plus KD and hint terms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeWeighting {
    /// `CE + lambda_kd * KD`
    #[default]
    Unweighted,
    /// `(1 - lambda_kd) * CE + lambda_kd * KD`
    OneMinusKd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub tau: f64,
    pub lambda_kd: f64,
    pub lambda_hint: f64,
    /// Conv ordinals whose outputs are matched; `None` means the last three convs.
    pub hint_layers: Option<Vec<usize>>,
    pub ce_weighting: CeWeighting,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 15.0,
            lambda_kd: 0.4,
            lambda_hint: 0.001,
            hint_layers: None,
            ce_weighting: CeWeighting::Unweighted,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config("distill.tau", "must be positive"));
        }
        if !(self.lambda_kd >= 0.0) || !(self.lambda_hint >= 0.0) {
            return Err(Error::config("distill.lambda_kd", "loss weights must be non-negative"));
        }
        if self.ce_weighting == CeWeighting::OneMinusKd && self.lambda_kd > 1.0 {
            return Err(Error::config("distill.lambda_kd", "must be at most 1 with one_minus_kd weighting"));
        }
        Ok(())
    }

    fn ce_weight(&self) -> f64 {
        match self.ce_weighting {
            CeWeighting::Unweighted => 1.0,
            CeWeighting::OneMinusKd => 1.0 - self.lambda_kd,
        }
    }
}

/// `tau^2 * mean_n KL(softmax(t_n / tau) || softmax(s_n / tau))`, evaluated in f64.
pub fn kd_loss<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>, tau: f64) -> Result<f64> {
    let [n, k] = student.dims2("kd_loss")?;
    if teacher.shape() != student.shape() {
        return Err(Error::shape(
            "kd_loss",
            format!("teacher {:?} vs student {:?}", teacher.shape(), student.shape()),
        ));
    }
    let soften = |z: &Tensor<T>| -> Vec<f64> {
        let scaled: Vec<f64> = z.data().iter().map(|v| v.f64() / tau).collect();
        kernels::log_softmax_rows(&scaled, k)
    };
    let (ls, lt) = (soften(student), soften(teacher));
    let kl: f64 = lt.iter().zip(&ls).map(|(&t, &s)| t.exp() * (t - s)).sum();
    Ok(tau * tau * kl / n as f64)
}

/// Mean over pairs of the per-pair mean squared error.
pub fn hint_loss<T: Scalar>(student: &[Tensor<T>], teacher: &[Tensor<T>]) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::shape(
            "hint_loss",
            format!("{} student maps vs {} teacher maps", student.len(), teacher.len()),
        ));
    }
    if student.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        if s.shape() != t.shape() {
            return Err(Error::shape("hint_loss", format!("{:?} vs {:?}", s.shape(), t.shape())));
        }
        let se: f64 = s.data().iter().zip(t.data()).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum();
        total += se / s.len() as f64;
    }
    Ok(total / student.len() as f64)
}

/// Loss components of one model for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub task: f64,
    pub kd: f64,
    pub hint: f64,
}

/// Teacher outputs a model is distilled from.
#[derive(Debug, Clone, Copy)]
pub struct TeacherOutputs<'a, T> {
    pub logits: &'a Tensor<T>,
    pub maps: &'a [Tensor<T>],
}

pub fn slot_loss<T: Scalar>(
    logits: &Tensor<T>,
    maps: &[Tensor<T>],
    labels: &Tensor<T>,
    teacher: Option<TeacherOutputs<'_, T>>,
    cfg: &DistillConfig,
) -> Result<LossParts> {
    let mut tape = Tape::new();
    let lv = tape.param(logits.clone());
    let mv: Vec<Var> = maps.iter().map(|m| tape.param(m.clone())).collect();
    let v = slot_loss_on_tape(&mut tape, lv, &mv, labels, teacher, cfg)?;
    Ok(v.values(&tape))
}

/// Loss nodes of one model on a tape. Teacher tensors enter as constants.
#[derive(Debug, Clone, Copy)]
pub struct SlotLossVars {
    pub total: Var,
    pub task: Var,
    pub kd: Option<Var>,
    pub hint: Option<Var>,
}

impl SlotLossVars {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossParts {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().f64());
        LossParts {
            total: tape.value(self.total).item().f64(),
            task: tape.value(self.task).item().f64(),
            kd: get(self.kd),
            hint: get(self.hint),
        }
    }
}

pub fn slot_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    maps: &[Var],
    labels: &Tensor<T>,
    teacher: Option<TeacherOutputs<'_, T>>,
    cfg: &DistillConfig,
) -> Result<SlotLossVars> {
    cfg.validate()?;
    let task = tape.softmax_cross_entropy(logits, labels)?;
    let mut total = match cfg.ce_weighting {
        CeWeighting::Unweighted => task,
        CeWeighting::OneMinusKd => tape.scale(task, T::of(cfg.ce_weight())),
    };
    let (mut kd, mut hint) = (None, None);
    if let Some(t) = teacher {
        if cfg.lambda_kd > 0.0 {
            let k = tape.kd_loss(logits, t.logits, T::of(cfg.tau))?;
            let w = tape.scale(k, T::of(cfg.lambda_kd));
            total = tape.add(total, w)?;
            kd = Some(k);
        }
        if cfg.lambda_hint > 0.0 && !maps.is_empty() {
            if maps.len() != t.maps.len() {
                return Err(Error::shape(
                    "hint_loss",
                    format!("{} student maps vs {} teacher maps", maps.len(), t.maps.len()),
                ));
            }
            let mut acc = None;
            for (&m, target) in maps.iter().zip(t.maps) {
                let e = tape.mse_const(m, target)?;
                acc = Some(match acc {
                    None => e,
                    Some(a) => tape.add(a, e)?,
                });
            }
            let h = tape.scale(acc.expect("non-empty"), T::of(1.0 / maps.len() as f64));
            let w = tape.scale(h, T::of(cfg.lambda_hint));
            total = tape.add(total, w)?;
            hint = Some(h);
        }
    }
    Ok(SlotLossVars { total, task, kd, hint })
}
