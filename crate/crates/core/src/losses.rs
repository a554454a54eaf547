//! Training objectives: soft dice, the label-complement convention, the
//! MIL teacher loss, fusion-knowledge distillation and the weighted
//! cross-entropy regularizer.
//!
//! Every loss has a value-only form and a `*_grad` form that also returns
//! the gradient with respect to the prediction maps. Targets coming from a
//! teacher are plain maps, so no gradient can reach the teacher.

use crate::error::{Error, Result};
use crate::model::{MultiScaleOutput, OutputGrad};
use crate::scalar::Scalar;
use crate::tensor::{check_same_shape, ProbMap};
use serde::{Deserialize, Serialize};

/// Image-level label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    /// Normal tissue only (y = 0).
    Normal,
    /// Contains lesion pixels (y = 1).
    Tumor,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Tumor => 1,
        }
    }

    pub fn is_tumor(self) -> bool {
        self == Label::Tumor
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.as_u8()
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Tumor),
            other => Err(Error::Precondition(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub dice_epsilon: f64,
    pub log_epsilon: f64,
    /// Scale of the weighted cross-entropy term in the student loss. Set
    /// through the training config, never parsed from the loss section.
    #[serde(skip)]
    pub a: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_epsilon: 1e-6,
            log_epsilon: 1e-8,
            a: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dice_epsilon > 0.0 && self.dice_epsilon.is_finite()) {
            return Err(Error::Config("dice_epsilon must be > 0".into()));
        }
        if !(self.log_epsilon > 0.0 && self.log_epsilon.is_finite()) {
            return Err(Error::Config("log_epsilon must be > 0".into()));
        }
        if !(self.a >= 0.0 && self.a.is_finite()) {
            return Err(Error::Config("a must be >= 0".into()));
        }
        Ok(())
    }
}

/// `1 - (2 * sum(p t) + eps) / (sum(p) + sum(t) + eps)`.
pub fn soft_dice_loss<T: Scalar>(pred: &ProbMap<T>, target: &ProbMap<T>, eps: T) -> Result<T> {
    check_same_shape("soft_dice_loss", pred, target)?;
    let (inter, sp, st) = dice_sums(pred, target);
    let two = T::lit(2.0);
    Ok(T::one() - (two * inter + eps) / (sp + st + eps))
}

/// Soft dice loss and its gradient with respect to `pred`.
pub fn soft_dice_grad<T: Scalar>(pred: &ProbMap<T>, target: &ProbMap<T>, eps: T) -> Result<(T, Vec<T>)> {
    check_same_shape("soft_dice_grad", pred, target)?;
    let (inter, sp, st) = dice_sums(pred, target);
    let two = T::lit(2.0);
    let num = two * inter + eps;
    let den = sp + st + eps;
    let den2 = den * den;
    let grad = target
        .values
        .iter()
        .map(|&t| -(two * t * den - num) / den2)
        .collect();
    Ok((T::one() - num / den, grad))
}

fn dice_sums<T: Scalar>(pred: &ProbMap<T>, target: &ProbMap<T>) -> (T, T, T) {
    let mut inter = T::zero();
    let mut sp = T::zero();
    let mut st = T::zero();
    for (&p, &t) in pred.values.iter().zip(&target.values) {
        inter += p * t;
        sp += p;
        st += t;
    }
    (inter, sp, st)
}

/// Identity for tumor images; for normal images every map and the target
/// are replaced by their complements.
pub fn apply_label_complement<T: Scalar>(
    maps: &[ProbMap<T>],
    target: &ProbMap<T>,
    y: Label,
) -> Result<(Vec<ProbMap<T>>, ProbMap<T>)> {
    for m in maps {
        check_same_shape("apply_label_complement", target, m)?;
    }
    Ok(match y {
        Label::Tumor => (maps.to_vec(), target.clone()),
        Label::Normal => (
            maps.iter().map(ProbMap::complement).collect(),
            target.complement(),
        ),
    })
}

/// The naive MIL mask: all zeros for normal images, all ones otherwise.
pub fn naive_mask<T: Scalar>(y: Label, height: usize, width: usize) -> ProbMap<T> {
    match y {
        Label::Normal => ProbMap::zeros(height, width),
        Label::Tumor => ProbMap::ones(height, width),
    }
}

fn check_naive_mask<T: Scalar>(mask: &ProbMap<T>, y: Label) -> Result<()> {
    let expected = if y.is_tumor() { T::one() } else { T::zero() };
    if mask.values.iter().all(|&v| v == expected) {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "naive mask for label {} must be all {}",
            y.as_u8(),
            if y.is_tumor() { "ones" } else { "zeros" }
        )))
    }
}

/// Sum of dice terms of several predictions against per-term targets under
/// the complement convention, with gradients mapped back to the
/// uncomplemented predictions.
fn complemented_dice_terms<T: Scalar>(
    terms: &[(&ProbMap<T>, &ProbMap<T>)],
    y: Label,
    eps: T,
) -> Result<(T, Vec<Vec<T>>)> {
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(terms.len());
    for &(pred, target) in terms {
        let (loss, mut g) = match y {
            Label::Tumor => soft_dice_grad(pred, target, eps)?,
            Label::Normal => soft_dice_grad(&pred.complement(), &target.complement(), eps)?,
        };
        if y == Label::Normal {
            g.iter_mut().for_each(|v| *v = -*v);
        }
        total += loss;
        grads.push(g);
    }
    Ok((total, grads))
}

fn check_output<T: Scalar>(out: &MultiScaleOutput<T>, target: &ProbMap<T>, context: &'static str) -> Result<()> {
    check_same_shape(context, target, &out.fused)?;
    for m in &out.per_block {
        check_same_shape(context, target, m)?;
    }
    Ok(())
}

/// MIL teacher loss: `Dice(f_w, l) + sum_i Dice(f_i, l)` after the
/// complement convention.
pub fn teacher_loss<T: Scalar>(
    out: &MultiScaleOutput<T>,
    naive: &ProbMap<T>,
    y: Label,
    cfg: &LossConfig,
) -> Result<T> {
    teacher_loss_grad(out, naive, y, cfg).map(|(v, _)| v)
}

pub fn teacher_loss_grad<T: Scalar>(
    out: &MultiScaleOutput<T>,
    naive: &ProbMap<T>,
    y: Label,
    cfg: &LossConfig,
) -> Result<(T, OutputGrad<T>)> {
    check_output(out, naive, "teacher_loss")?;
    check_naive_mask(naive, y)?;
    let mut terms = vec![(&out.fused, naive)];
    terms.extend(out.per_block.iter().map(|m| (m, naive)));
    let (loss, mut grads) = complemented_dice_terms(&terms, y, T::lit(cfg.dice_epsilon))?;
    let fused = grads.remove(0);
    Ok((loss, OutputGrad { per_block: grads, fused }))
}

/// Knowledge-distillation layout, mirroring the three compared variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KdStructure {
    /// Every student block and the student fusion learn the teacher fusion.
    #[default]
    Fusion,
    /// Block-to-block: student block i learns teacher block i; fused learns fused.
    A,
    /// Output-to-output: only the student fusion learns the teacher fusion.
    B,
}

impl std::fmt::Display for KdStructure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KdStructure::Fusion => "fusion",
            KdStructure::A => "a",
            KdStructure::B => "b",
        })
    }
}

impl std::str::FromStr for KdStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(KdStructure::Fusion),
            "a" => Ok(KdStructure::A),
            "b" => Ok(KdStructure::B),
            other => Err(Error::Config(format!("unknown distillation structure `{other}`"))),
        }
    }
}

/// Fusion-knowledge distillation loss against the frozen teacher's fused
/// map. Normal images are supervised by the all-zero ground truth instead.
pub fn kd_loss<T: Scalar>(
    student: &MultiScaleOutput<T>,
    teacher_fused: &ProbMap<T>,
    y: Label,
    cfg: &LossConfig,
) -> Result<T> {
    kd_loss_grad(student, teacher_fused, y, cfg).map(|(v, _)| v)
}

pub fn kd_loss_grad<T: Scalar>(
    student: &MultiScaleOutput<T>,
    teacher_fused: &ProbMap<T>,
    y: Label,
    cfg: &LossConfig,
) -> Result<(T, OutputGrad<T>)> {
    check_output(student, teacher_fused, "kd_loss")?;
    let zero = ProbMap::zeros(teacher_fused.height, teacher_fused.width);
    let target = if y.is_tumor() { teacher_fused } else { &zero };
    let mut terms = vec![(&student.fused, target)];
    terms.extend(student.per_block.iter().map(|m| (m, target)));
    let (loss, mut grads) = complemented_dice_terms(&terms, y, T::lit(cfg.dice_epsilon))?;
    let fused = grads.remove(0);
    Ok((loss, OutputGrad { per_block: grads, fused }))
}

/// Distillation loss for any [`KdStructure`]; `Fusion` equals [`kd_loss_grad`].
pub fn structured_kd_loss_grad<T: Scalar>(
    student: &MultiScaleOutput<T>,
    teacher: &MultiScaleOutput<T>,
    y: Label,
    structure: KdStructure,
    cfg: &LossConfig,
) -> Result<(T, OutputGrad<T>)> {
    if structure == KdStructure::Fusion {
        return kd_loss_grad(student, &teacher.fused, y, cfg);
    }
    check_output(student, &teacher.fused, "kd_loss")?;
    if student.per_block.len() != teacher.per_block.len() {
        return Err(Error::shape(
            "kd_loss",
            format!("{} teacher blocks", student.per_block.len()),
            teacher.per_block.len(),
        ));
    }
    let (h, w) = (teacher.fused.height, teacher.fused.width);
    let zero = ProbMap::zeros(h, w);
    let pick = |m: &'_ ProbMap<T>| -> ProbMap<T> {
        if y.is_tumor() {
            m.clone()
        } else {
            zero.clone()
        }
    };
    let fused_target = pick(&teacher.fused);
    let eps = T::lit(cfg.dice_epsilon);
    let (mut loss, mut g) = complemented_dice_terms(&[(&student.fused, &fused_target)], y, eps)?;
    let fused = g.remove(0);
    let mut per_block = vec![vec![T::zero(); h * w]; student.per_block.len()];
    if structure == KdStructure::A {
        let targets: Vec<ProbMap<T>> = teacher.per_block.iter().map(pick).collect();
        let terms: Vec<_> = student.per_block.iter().zip(&targets).collect();
        let (l, grads) = complemented_dice_terms(&terms, y, eps)?;
        loss += l;
        per_block = grads;
    }
    Ok((loss, OutputGrad { per_block, fused }))
}

/// Weighted cross-entropy: `sum_i ce_i * softmax(-ce)_i` with
/// `ce_i = -t_i * ln(s_i + log_epsilon)`.
pub fn wce_loss<T: Scalar>(student_fused: &ProbMap<T>, teacher_fused: &ProbMap<T>, cfg: &LossConfig) -> Result<T> {
    check_same_shape("wce_loss", student_fused, teacher_fused)?;
    let ce = pixel_ce(student_fused, teacher_fused, T::lit(cfg.log_epsilon));
    let w = wce_weights_from_ce(&ce);
    Ok(ce.iter().zip(&w).map(|(&c, &wi)| c * wi).sum())
}

/// Gradient of [`wce_loss`] with respect to the student map.
pub fn wce_loss_grad<T: Scalar>(
    student_fused: &ProbMap<T>,
    teacher_fused: &ProbMap<T>,
    cfg: &LossConfig,
) -> Result<(T, Vec<T>)> {
    check_same_shape("wce_loss", student_fused, teacher_fused)?;
    let le = T::lit(cfg.log_epsilon);
    let ce = pixel_ce(student_fused, teacher_fused, le);
    let w = wce_weights_from_ce(&ce);
    let loss: T = ce.iter().zip(&w).map(|(&c, &wi)| c * wi).sum();
    // dL/dce_k = w_k (1 - ce_k + L);  dce_k/ds_k = -t_k / (s_k + eps)
    let grad = student_fused
        .values
        .iter()
        .zip(&teacher_fused.values)
        .zip(ce.iter().zip(&w))
        .map(|((&s, &t), (&c, &wk))| -(wk * (T::one() - c + loss)) * t / (s + le))
        .collect();
    Ok((loss, grad))
}

/// Per-pixel weights `softmax(-ce)` used by [`wce_loss`].
pub fn wce_weights<T: Scalar>(student_fused: &ProbMap<T>, teacher_fused: &ProbMap<T>, cfg: &LossConfig) -> Result<Vec<T>> {
    check_same_shape("wce_weights", student_fused, teacher_fused)?;
    Ok(wce_weights_from_ce(&pixel_ce(student_fused, teacher_fused, T::lit(cfg.log_epsilon))))
}

fn pixel_ce<T: Scalar>(s: &ProbMap<T>, t: &ProbMap<T>, le: T) -> Vec<T> {
    s.values
        .iter()
        .zip(&t.values)
        .map(|(&si, &ti)| -(ti * (si + le).ln()))
        .collect()
}

fn wce_weights_from_ce<T: Scalar>(ce: &[T]) -> Vec<T> {
    let neg: Vec<T> = ce.iter().map(|&c| -c).collect();
    crate::model::softmax(&neg)
}

/// Components of the student objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentLoss<T> {
    pub kd: T,
    pub wce: T,
    pub total: T,
}

/// `kd_loss + a * wce_loss`; normal images use the zero target for both.
pub fn student_total_loss<T: Scalar>(
    student: &MultiScaleOutput<T>,
    teacher_fused: &ProbMap<T>,
    y: Label,
    cfg: &LossConfig,
) -> Result<T> {
    let kd = kd_loss(student, teacher_fused, y, cfg)?;
    let target = wce_target(teacher_fused, y);
    let wce = wce_loss(&student.fused, &target, cfg)?;
    Ok(kd + T::lit(cfg.a) * wce)
}

fn wce_target<T: Scalar>(teacher_fused: &ProbMap<T>, y: Label) -> ProbMap<T> {
    if y.is_tumor() {
        teacher_fused.clone()
    } else {
        ProbMap::zeros(teacher_fused.height, teacher_fused.width)
    }
}

/// Student objective for any structure, with gradients.
pub fn student_loss_grad<T: Scalar>(
    student: &MultiScaleOutput<T>,
    teacher: &MultiScaleOutput<T>,
    y: Label,
    structure: KdStructure,
    cfg: &LossConfig,
) -> Result<(StudentLoss<T>, OutputGrad<T>)> {
    let (kd, mut grad) = structured_kd_loss_grad(student, teacher, y, structure, cfg)?;
    let a = T::lit(cfg.a);
    let mut wce = T::zero();
    if y.is_tumor() && a > T::zero() {
        let (value, g) = wce_loss_grad(&student.fused, &teacher.fused, cfg)?;
        wce = value;
        for (acc, gi) in grad.fused.iter_mut().zip(g) {
            *acc += a * gi;
        }
    } else if y.is_tumor() {
        wce = wce_loss(&student.fused, &teacher.fused, cfg)?;
    }
    Ok((
        StudentLoss {
            kd,
            wce,
            total: kd + a * wce,
        },
        grad,
    ))
}
