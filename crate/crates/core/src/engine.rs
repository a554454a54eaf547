//! Two-stage training: MIL teacher training with naive masks, fusion-weight
//! fitting, then iterative fusion-knowledge distillation with a frozen
//! teacher and periodic teacher/student parameter switches.

use crate::checkpoint::{Checkpoint, StageTag};
use crate::data::{make_batches, Dataset};
use crate::error::{Error, Result};
use crate::losses::{naive_mask, student_loss_grad, teacher_loss_grad, KdStructure, LossConfig};
use crate::metrics::{evaluate_dataset, MetricsOptions, MetricsReport};
use crate::losses::Label;
use crate::model::{fuse_maps, fusion_logit_grad, swap_parameters, BackboneSpec, FusionWeights, MultiScaleOutput, SegModel, Trainable};
use crate::tensor::ProbMap;
use crate::optim::{Adam, AdamConfig, AdamState};
use crate::scalar::Scalar;
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// When the teacher and student exchange parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SwitchTrigger {
    /// After every `switch_period_epochs`.
    #[default]
    Fixed,
    /// As soon as the student's validation F1 exceeds the teacher's, or
    /// after `switch_period_epochs`, whichever comes first.
    OnImprovement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Fusion-fit learning rate; `learning_rate` when unset.
    pub fusion_learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub mil_epochs: usize,
    pub fusion_fit_epochs: usize,
    pub switch_period_epochs: usize,
    pub total_distill_epochs: usize,
    /// Scale of the weighted cross-entropy term.
    pub a: f64,
    pub seed: u64,
    pub distill_structure: KdStructure,
    pub role_switch: bool,
    pub switch_trigger: SwitchTrigger,
    /// Fraction of the training data held out for checkpoint selection.
    pub val_fraction: f64,
    pub eval_every_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            fusion_learning_rate: None,
            weight_decay: 5e-4,
            batch_size: 16,
            mil_epochs: 30,
            fusion_fit_epochs: 10,
            switch_period_epochs: 30,
            total_distill_epochs: 450,
            a: 0.25,
            seed: 0,
            distill_structure: KdStructure::Fusion,
            role_switch: true,
            switch_trigger: SwitchTrigger::Fixed,
            val_fraction: 0.1,
            eval_every_epochs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::Parse { key: format!("train.{k}"), message: m.to_string() });
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be > 0");
        }
        if let Some(lr) = self.fusion_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("fusion_learning_rate", "must be > 0");
            }
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay", "must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.a >= 0.0 && self.a.is_finite()) {
            return bad("a", "must be >= 0");
        }
        if self.switch_period_epochs == 0 && self.total_distill_epochs > 0 {
            return bad("switch_period_epochs", "must be >= 1 when distilling");
        }
        if self.eval_every_epochs == 0 {
            return bad("eval_every_epochs", "must be >= 1");
        }
        if !self.switch_period_epochs.is_multiple_of(self.eval_every_epochs) {
            return bad("eval_every_epochs", "must divide switch_period_epochs");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", "must be in [0, 1)");
        }
        Ok(())
    }

    fn fusion_lr(&self) -> f64 {
        self.fusion_learning_rate.unwrap_or(self.learning_rate)
    }
}

/// Everything the training functions need besides data and models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub metrics: MetricsOptions,
}

impl Settings {
    /// The wce scale always comes from `train.a`.
    pub fn new(train: TrainConfig, loss: LossConfig, metrics: MetricsOptions) -> Self {
        let loss = LossConfig { a: train.a, ..loss };
        Self { train, loss, metrics }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.metrics.validate()
    }

    fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("settings serialize");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

impl Default for Settings {
    fn default() -> Self {
        Self::new(TrainConfig::default(), LossConfig::default(), MetricsOptions::default())
    }
}

/// One row of the training history CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub cycle: usize,
    pub role: String,
    pub loss_teacher: Option<f64>,
    pub loss_kd: Option<f64>,
    pub loss_wce: Option<f64>,
    pub loss_total: f64,
    pub val_f1: Option<f64>,
    pub val_iou: Option<f64>,
    pub val_hd: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(Self { records })
    }

    pub fn stage<'a>(&'a self, stage: &'a str) -> impl Iterator<Item = &'a EpochRecord> + 'a {
        self.records.iter().filter(move |r| r.stage == stage)
    }
}

/// Validation scores of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub f1: f64,
    pub iou: f64,
    pub hd: Option<f64>,
}

impl From<(usize, &MetricsReport)> for EpochMetrics {
    fn from((epoch, r): (usize, &MetricsReport)) -> Self {
        Self {
            epoch,
            f1: r.mean_f1,
            iou: r.mean_iou,
            hd: r.mean_hd_pos,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    pub epoch_metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_f1: f64,
    /// Epochs actually trained in this cycle.
    pub epochs_trained: usize,
    pub teacher_checksum: String,
    pub student_checksum: String,
    pub switched: bool,
    pub best_checkpoint: Option<PathBuf>,
}

fn mix_seed(seed: u64, stage: u64, cycle: u64, epoch: u64) -> u64 {
    // splitmix64 over the packed tuple
    let mut z = seed
        ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ cycle.wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ epoch.wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STAGE_MIL: u64 = 1;
const STAGE_FUSION: u64 = 2;
const STAGE_DISTILL: u64 = 3;

fn check_finite(value: f64, epoch: usize, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { epoch, batch, value })
    }
}

fn validation<T: Scalar>(model: &SegModel<T>, val: Option<&Dataset<T>>, opts: &MetricsOptions) -> Result<Option<MetricsReport>> {
    match val {
        Some(v) if !v.is_empty() => evaluate_dataset(model, v, opts).map(Some),
        _ => Ok(None),
    }
}

/// Runs `epochs` epochs of MIL training under the teacher loss with naive
/// masks. Returns one mean loss per epoch.
#[allow(clippy::too_many_arguments)]
fn mil_epochs<T: Scalar>(
    model: &mut SegModel<T>,
    data: &Dataset<T>,
    settings: &Settings,
    trainable: Trainable,
    stage: u64,
    epochs: usize,
    lr: f64,
    mut on_epoch: impl FnMut(usize, f64, &SegModel<T>) -> Result<()>,
) -> Result<()> {
    let cfg = &settings.train;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let view = data.training_view();
    let mask = trainable.mask(model);
    let mut opt = Adam::new(AdamConfig::new(lr, cfg.weight_decay));
    for epoch in 1..=epochs {
        let batches = make_batches(view.len(), cfg.batch_size, mix_seed(cfg.seed, stage, 0, epoch as u64), true)?;
        let mut epoch_loss = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let samples = view.batch(batch);
            let scale = T::one() / T::lit(samples.len() as f64);
            let mut grads = model.params().zeros_like();
            let mut batch_loss = 0.0;
            for s in &samples {
                let (out, cache) = model.forward_train(s.pixels)?;
                let target = naive_mask(s.label, out.fused.height, out.fused.width);
                let (loss, mut g) = teacher_loss_grad(&out, &target, s.label, &settings.loss)?;
                g.scale(scale);
                model.backward(&out, &cache, &g, trainable, &mut grads)?;
                batch_loss += loss.as_f64();
            }
            batch_loss /= samples.len() as f64;
            check_finite(batch_loss, epoch, bi)?;
            opt.step(model.param_values_mut(), &grads, &mask)?;
            epoch_loss += batch_loss * samples.len() as f64;
        }
        on_epoch(epoch, epoch_loss / view.len() as f64, model)?;
    }
    Ok(())
}

/// Stage one: optimizes backbone and heads under the teacher loss for
/// `mil_epochs` with the fusion logits held fixed. `val`, when given, is
/// scored after every `eval_every_epochs` for the history.
pub fn train_mil_stage<T: Scalar>(
    model: &mut SegModel<T>,
    data: &Dataset<T>,
    val: Option<&Dataset<T>>,
    settings: &Settings,
    history: &mut History,
) -> Result<Checkpoint> {
    settings.validate()?;
    let every = settings.train.eval_every_epochs;
    let opts = settings.metrics.clone();
    mil_epochs(
        model,
        data,
        settings,
        Trainable::BackboneAndHeads,
        STAGE_MIL,
        settings.train.mil_epochs,
        settings.train.learning_rate,
        |epoch, loss, m| {
            let report = if epoch % every == 0 { validation(m, val, &opts)? } else { None };
            info!("mil epoch {epoch}: loss {loss:.5}");
            history.records.push(EpochRecord {
                stage: "mil".into(),
                epoch,
                cycle: 0,
                role: "teacher".into(),
                loss_teacher: Some(loss),
                loss_kd: None,
                loss_wce: None,
                loss_total: loss,
                val_f1: report.as_ref().map(|r| r.mean_f1),
                val_iou: report.as_ref().map(|r| r.mean_iou),
                val_hd: report.as_ref().and_then(|r| r.mean_hd_pos),
            });
            Ok(())
        },
    )?;
    Ok(Checkpoint::from_model(model, StageTag::Mil))
}

/// Fits only the fusion logits under the teacher loss for
/// `fusion_fit_epochs`; backbone and heads stay bit-identical.
pub fn fit_fusion_weights<T: Scalar>(
    model: &mut SegModel<T>,
    data: &Dataset<T>,
    settings: &Settings,
    history: &mut History,
) -> Result<FusionWeights<T>> {
    settings.validate()?;
    let before = model.backbone_checksum();
    let view = data.training_view();
    let frozen = model.clone();
    let weights = fit_fusion_on_maps(
        view.len(),
        |i| {
            let s = view.get(i);
            Ok((frozen.forward(s.pixels)?.per_block, s.label))
        },
        &model.fusion(),
        settings,
        |epoch, loss| {
            history.records.push(EpochRecord {
                stage: "fusion".into(),
                epoch,
                cycle: 0,
                role: "teacher".into(),
                loss_teacher: Some(loss),
                loss_kd: None,
                loss_wce: None,
                loss_total: loss,
                val_f1: None,
                val_iou: None,
                val_hd: None,
            })
        },
    )?;
    model.set_fusion(&weights)?;
    if model.backbone_checksum() != before {
        return Err(Error::Invariant("backbone changed while fitting fusion weights".into()));
    }
    Ok(weights)
}

/// Fusion-logit fitting on fixed block maps: `maps(i)` yields the block
/// maps and label of sample `i`. Optimizes the teacher loss with naive
/// masks, starting from `init`; `on_epoch` receives the mean loss.
pub fn fit_fusion_on_maps<T: Scalar>(
    n: usize,
    mut maps: impl FnMut(usize) -> Result<(Vec<ProbMap<T>>, Label)>,
    init: &FusionWeights<T>,
    settings: &Settings,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<FusionWeights<T>> {
    let cfg = &settings.train;
    if n == 0 {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut fusion = init.clone();
    let mut logits = [fusion.logits.clone()];
    let mut opt = Adam::new(AdamConfig::new(cfg.fusion_lr(), cfg.weight_decay));
    for epoch in 1..=cfg.fusion_fit_epochs {
        let batches = make_batches(n, cfg.batch_size, mix_seed(cfg.seed, STAGE_FUSION, 0, epoch as u64), true)?;
        let mut epoch_loss = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let weights = fusion.weights();
            let scale = T::one() / T::lit(batch.indices.len() as f64);
            let mut grad = vec![vec![T::zero(); fusion.len()]];
            let mut batch_loss = 0.0;
            for &i in &batch.indices {
                let (per_block, label) = maps(i)?;
                let fused = fuse_maps(&per_block, &fusion)?;
                let out = MultiScaleOutput { per_block, fused };
                let target = naive_mask(label, out.fused.height, out.fused.width);
                let (loss, g) = teacher_loss_grad(&out, &target, label, &settings.loss)?;
                for (acc, d) in grad[0].iter_mut().zip(fusion_logit_grad(&out.per_block, &weights, &g.fused)) {
                    *acc += d * scale;
                }
                batch_loss += loss.as_f64();
            }
            check_finite(batch_loss, epoch, bi)?;
            opt.step(logits.iter_mut(), &grad, &[true])?;
            fusion.logits.clone_from(&logits[0]);
            epoch_loss += batch_loss;
        }
        on_epoch(epoch, epoch_loss / n as f64);
    }
    Ok(fusion)
}

/// Result of one distillation cycle.
#[derive(Debug, Clone)]
pub struct CycleOutcome<T> {
    pub report: CycleReport,
    /// Student parameters at the cycle's best validation epoch.
    pub best_student: SegModel<T>,
}

/// Trains `student` against the frozen `teacher` for up to `epochs`
/// epochs. `first_epoch` is the global epoch number of the first epoch.
#[allow(clippy::too_many_arguments)]
pub fn distillation_cycle<T: Scalar>(
    teacher: &SegModel<T>,
    student: &mut SegModel<T>,
    data: &Dataset<T>,
    val: &Dataset<T>,
    settings: &Settings,
    optimizer: &mut Adam<T>,
    cycle: usize,
    first_epoch: usize,
    epochs: usize,
    history: &mut History,
) -> Result<CycleOutcome<T>> {
    settings.validate()?;
    let cfg = &settings.train;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("distillation needs a non-empty validation split".into()));
    }
    if let Some(name) = teacher.params().first_mismatch(student.params()) {
        return Err(Error::Incompatible(name));
    }
    let teacher_checksum = teacher.checksum();
    let teacher_f1 = match cfg.switch_trigger {
        SwitchTrigger::OnImprovement => Some(evaluate_dataset(teacher, val, &settings.metrics)?.mean_f1),
        SwitchTrigger::Fixed => None,
    };
    let view = data.training_view();
    let mask = Trainable::BackboneAndHeads.mask(student);
    let mut metrics = Vec::new();
    let mut best: Option<(usize, f64, SegModel<T>)> = None;
    let mut trained = 0;
    for local in 0..epochs {
        let epoch = first_epoch + local;
        let batches = make_batches(
            view.len(),
            cfg.batch_size,
            mix_seed(cfg.seed, STAGE_DISTILL, cycle as u64, epoch as u64),
            true,
        )?;
        let (mut kd_sum, mut wce_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for (bi, batch) in batches.iter().enumerate() {
            let samples = view.batch(batch);
            let scale = T::one() / T::lit(samples.len() as f64);
            let mut grads = student.params().zeros_like();
            let mut batch_total = 0.0;
            for s in &samples {
                // teacher first, from frozen parameters
                let t_out = teacher.forward(s.pixels)?;
                let (s_out, cache) = student.forward_train(s.pixels)?;
                let (parts, mut g) = student_loss_grad(&s_out, &t_out, s.label, cfg.distill_structure, &settings.loss)?;
                g.scale(scale);
                student.backward(&s_out, &cache, &g, Trainable::BackboneAndHeads, &mut grads)?;
                kd_sum += parts.kd.as_f64();
                wce_sum += parts.wce.as_f64();
                batch_total += parts.total.as_f64();
            }
            check_finite(batch_total / samples.len() as f64, epoch, bi)?;
            total_sum += batch_total;
            optimizer.step(student.param_values_mut(), &grads, &mask)?;
        }
        trained += 1;
        if teacher.checksum() != teacher_checksum {
            return Err(Error::Invariant(format!("teacher parameters changed during cycle {cycle}")));
        }
        let n = view.len() as f64;
        let report = if (local + 1) % cfg.eval_every_epochs == 0 || local + 1 == epochs {
            Some(evaluate_dataset(student, val, &settings.metrics)?)
        } else {
            None
        };
        if let Some(r) = &report {
            let m = EpochMetrics::from((epoch, r));
            if best.as_ref().is_none_or(|(_, f, _)| m.f1 > *f) {
                best = Some((epoch, m.f1, student.clone()));
            }
            metrics.push(m);
        }
        info!("distill cycle {cycle} epoch {epoch}: loss {:.5} val f1 {:?}", total_sum / n, report.as_ref().map(|r| r.mean_f1));
        history.records.push(EpochRecord {
            stage: "distill".into(),
            epoch,
            cycle,
            role: "student".into(),
            loss_teacher: None,
            loss_kd: Some(kd_sum / n),
            loss_wce: Some(wce_sum / n),
            loss_total: total_sum / n,
            val_f1: report.as_ref().map(|r| r.mean_f1),
            val_iou: report.as_ref().map(|r| r.mean_iou),
            val_hd: report.as_ref().and_then(|r| r.mean_hd_pos),
        });
        if let (Some(tf1), Some(r)) = (teacher_f1, &report) {
            if r.mean_f1 > tf1 {
                break;
            }
        }
    }
    let (best_epoch, best_f1, best_student) = match best {
        Some(b) => b,
        None => {
            // zero-epoch cycle: score the untouched student
            let r = evaluate_dataset(student, val, &settings.metrics)?;
            (first_epoch, r.mean_f1, student.clone())
        }
    };
    Ok(CycleOutcome {
        report: CycleReport {
            cycle,
            epoch_metrics: metrics,
            best_epoch,
            best_f1,
            epochs_trained: trained,
            teacher_checksum,
            student_checksum: student.checksum(),
            switched: false,
            best_checkpoint: None,
        },
        best_student,
    })
}

/// Outcome of the whole second stage.
#[derive(Debug, Clone)]
pub struct DistillOutcome<T> {
    /// Student with the highest validation F1 seen in any cycle.
    pub best_model: SegModel<T>,
    pub best_f1: f64,
    pub best_cycle: usize,
    pub best_epoch: usize,
    pub reports: Vec<CycleReport>,
    pub teacher: SegModel<T>,
    pub student: SegModel<T>,
}

/// On-disk state written after each cycle so an interrupted run resumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DistillState {
    settings_hash: String,
    initial_teacher: String,
    consumed: usize,
    reports: Vec<CycleReport>,
    teacher: Checkpoint,
    student: Checkpoint,
    best: Checkpoint,
    best_f1: f64,
    best_cycle: usize,
    best_epoch: usize,
    optimizer: AdamState,
    history: Vec<EpochRecord>,
}

pub const STATE_FILE: &str = "distill_state.json";

/// Repeats distillation cycles until `total_distill_epochs` are consumed,
/// switching teacher and student parameters between cycles when
/// `role_switch` is set (optimizer state is reset at every switch). The
/// student starts as a copy of the stage-one teacher.
///
/// With `run_dir`, per-cycle checkpoints and a resume state are written
/// there, and a matching state from an interrupted run is picked up.
pub fn run_iterative_distillation<T: Scalar>(
    initial_teacher: &SegModel<T>,
    data: &Dataset<T>,
    val: &Dataset<T>,
    settings: &Settings,
    run_dir: Option<&Path>,
    history: &mut History,
) -> Result<DistillOutcome<T>> {
    settings.validate()?;
    let cfg = &settings.train;
    let adam_cfg = AdamConfig::new(cfg.learning_rate, cfg.weight_decay);
    let settings_hash = settings.hash();
    let initial_checksum = initial_teacher.checksum();

    let mut teacher = initial_teacher.clone();
    let mut student = initial_teacher.clone();
    let mut optimizer = Adam::new(adam_cfg);
    let mut consumed = 0;
    let mut reports: Vec<CycleReport> = Vec::new();
    let mut best: Option<(f64, usize, usize, SegModel<T>)> = None;

    if let Some(state) = run_dir.and_then(|d| load_state(d, &settings_hash, &initial_checksum)) {
        info!("resuming distillation after {} epochs", state.consumed);
        teacher = state.teacher.to_model()?;
        student = state.student.to_model()?;
        optimizer = Adam::restore(adam_cfg, &state.optimizer);
        consumed = state.consumed;
        reports = state.reports;
        best = Some((state.best_f1, state.best_cycle, state.best_epoch, state.best.to_model()?));
        history.records = state.history;
    }

    while consumed < cfg.total_distill_epochs {
        let cycle = reports.len() + 1;
        let budget = cfg.switch_period_epochs.min(cfg.total_distill_epochs - consumed);
        let outcome = distillation_cycle(
            &teacher,
            &mut student,
            data,
            val,
            settings,
            &mut optimizer,
            cycle,
            consumed + 1,
            budget,
            history,
        )?;
        let mut report = outcome.report;
        consumed += report.epochs_trained.max(1);
        if best.as_ref().is_none_or(|(f, ..)| report.best_f1 > *f) {
            best = Some((report.best_f1, cycle, report.best_epoch, outcome.best_student.clone()));
        }
        if let Some(dir) = run_dir {
            let cdir = dir.join(format!("cycle-{cycle:03}"));
            let tag = StageTag::DistillCycle(cycle);
            Checkpoint::from_model(&teacher, tag).save(&cdir.join("teacher.json"))?;
            Checkpoint::from_model(&student, tag).save(&cdir.join("student.json"))?;
            let best_path = cdir.join("best_student.json");
            Checkpoint::from_model(&outcome.best_student, tag).save(&best_path)?;
            report.best_checkpoint = Some(best_path);
        }
        if cfg.role_switch && consumed < cfg.total_distill_epochs {
            let prior_student = student.checksum();
            let prior_teacher = teacher.checksum();
            swap_parameters(&mut teacher, &mut student)?;
            if teacher.checksum() != prior_student || student.checksum() != prior_teacher {
                return Err(Error::Invariant("parameter switch did not exchange models exactly".into()));
            }
            optimizer.reset();
            report.switched = true;
        }
        reports.push(report);
        if let Some(dir) = run_dir {
            let (bf, bc, be, bm) = best.as_ref().expect("set after first cycle");
            let state = DistillState {
                settings_hash: settings_hash.clone(),
                initial_teacher: initial_checksum.clone(),
                consumed,
                reports: reports.clone(),
                teacher: Checkpoint::from_model(&teacher, StageTag::DistillCycle(cycle)),
                student: Checkpoint::from_model(&student, StageTag::DistillCycle(cycle)),
                best: Checkpoint::from_model(bm, StageTag::DistillCycle(*bc)),
                best_f1: *bf,
                best_cycle: *bc,
                best_epoch: *be,
                optimizer: optimizer.state(),
                history: history.records.clone(),
            };
            let path = dir.join(STATE_FILE);
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::to_writer(std::io::BufWriter::new(file), &state)?;
        }
    }

    let (best_f1, best_cycle, best_epoch, best_model) = match best {
        Some(b) => b,
        None => {
            let f1 = evaluate_dataset(&student, val, &settings.metrics)?.mean_f1;
            (f1, 0, 0, student.clone())
        }
    };
    Ok(DistillOutcome {
        best_model,
        best_f1,
        best_cycle,
        best_epoch,
        reports,
        teacher,
        student,
    })
}

fn load_state(dir: &Path, settings_hash: &str, initial: &str) -> Option<DistillState> {
    let file = std::fs::File::open(dir.join(STATE_FILE)).ok()?;
    let state: DistillState = serde_json::from_reader(std::io::BufReader::new(file)).ok()?;
    (state.settings_hash == settings_hash && state.initial_teacher == initial).then_some(state)
}

/// Stage-one result: MIL-trained teacher with fitted fusion weights.
#[derive(Debug, Clone)]
pub struct StageOne<T> {
    pub teacher: SegModel<T>,
    pub history: History,
}

/// Builds the backbone and runs MIL training plus fusion fitting.
pub fn run_stage_one<T: Scalar>(
    backbone: &BackboneSpec,
    train: &Dataset<T>,
    val: Option<&Dataset<T>>,
    settings: &Settings,
) -> Result<StageOne<T>> {
    let mut model = SegModel::build(backbone, settings.train.seed)?;
    let mut history = History::default();
    train_mil_stage(&mut model, train, val, settings, &mut history)?;
    fit_fusion_weights(&mut model, train, settings, &mut history)?;
    Ok(StageOne { teacher: model, history })
}

/// Test-set comparison of the stage-one teacher with the distilled student.
#[derive(Debug, Clone)]
pub struct TwoStageOutcome<T> {
    pub teacher_test: MetricsReport,
    pub student_test: MetricsReport,
    pub distill: DistillOutcome<T>,
    pub history: History,
}

/// Runs stage two from a stage-one teacher and scores both on `test`.
pub fn run_stage_two<T: Scalar>(
    stage_one: &StageOne<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    test: &Dataset<T>,
    settings: &Settings,
    run_dir: Option<&Path>,
) -> Result<TwoStageOutcome<T>> {
    let mut history = History::default();
    let distill = run_iterative_distillation(&stage_one.teacher, train, val, settings, run_dir, &mut history)?;
    let teacher_test = evaluate_dataset(&stage_one.teacher, test, &settings.metrics)?;
    let student_test = evaluate_dataset(&distill.best_model, test, &settings.metrics)?;
    let mut all = stage_one.history.clone();
    all.records.extend(history.records);
    Ok(TwoStageOutcome {
        teacher_test,
        student_test,
        distill,
        history: all,
    })
}
