//! Staged training: optional pre-training, joint training of the hierarchy with mask
//! learning, an optional intermediate stage with frozen masks, and student fine-tuning
//! with teacher promotion.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::arch::{compression_report, ArchSpec, InputShape, CompressionReport, Totals};
use crate::autodiff::{Parameter, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{self, AugmentConfig, Batch, CropMode, Dataset};
use crate::distill::{slot_loss_on_tape, DistillConfig, LossParts, TeacherOutputs};
use crate::error::{Error, Result};
use crate::hierarchy::{derive_ta_keep_ratios, route_gamma_gradients, save_contexts, ModelHierarchy};
use crate::mask::{apply_gamma_update, FilterMask, ImportanceScores, PruneConfig, ScoreOptimizer, ScoreOptimizerKind};
use crate::model::{correct_count, BnMode, Bound, ModelParams, Network, RunningStats};
use crate::optim::{LrSchedule, OptimizerConfig, OptimizerKind, OptimizerState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Mnist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// Dataset directory for `cifar10` and `mnist`; defaults to `cifar-10-batches-bin` and
    /// `mnist`.
    pub path: Option<PathBuf>,
    /// Synthetic only: sample count and classes. Images take the architecture's input shape.
    pub samples: usize,
    pub classes: usize,
    pub test_fraction: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub flip_prob: f64,
    pub crop: CropMode,
    pub pad: usize,
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DatasetKind::Cifar10,
            path: None,
            samples: 5000,
            classes: 10,
            test_fraction: 0.2,
            batch_size: 128,
            eval_batch_size: 500,
            flip_prob: 0.5,
            crop: CropMode::Random,
            pad: 4,
            normalize: true,
        }
    }
}

impl DataConfig {
    /// Directory of a file-backed dataset; `None` for synthetic data.
    pub fn dir(&self) -> Option<PathBuf> {
        let fallback = match self.kind {
            DatasetKind::Synthetic => return None,
            DatasetKind::Cifar10 => "cifar-10-batches-bin",
            DatasetKind::Mnist => "mnist",
        };
        Some(self.path.clone().unwrap_or_else(|| PathBuf::from(fallback)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    /// Fraction of filters the student keeps. Exactly one of `keep_ratio` and
    /// `prune_ratio` must be set.
    pub keep_ratio: Option<f64>,
    pub prune_ratio: Option<f64>,
    pub ta_divisors: Vec<f64>,
    /// Explicit keep ratios for every slot, overriding the divisors.
    pub ratios: Option<Vec<f64>>,
    pub min_filters_per_layer: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            keep_ratio: None,
            prune_ratio: None,
            ta_divisors: vec![1.5, 2.5],
            ratios: None,
            min_filters_per_layer: 1,
        }
    }
}

impl PruneSection {
    pub fn student_keep(&self) -> Result<f64> {
        let r = match (self.keep_ratio, self.prune_ratio) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "prune.keep_ratio",
                    "keep_ratio and prune_ratio are mutually exclusive",
                ))
            }
            (Some(r), None) => r,
            (None, Some(p)) => 1.0 - p,
            (None, None) => match &self.ratios {
                Some(r) if !r.is_empty() => r[0],
                _ => return Err(Error::config("prune.keep_ratio", "one of keep_ratio or prune_ratio is required")),
            },
        };
        PruneConfig::keep(r)?;
        Ok(r)
    }

    pub fn keep_ratios(&self) -> Result<Vec<f64>> {
        let r0 = self.student_keep()?;
        match &self.ratios {
            Some(list) => {
                crate::hierarchy::check_ratios(list)?;
                if (list[0] - r0).abs() > 1e-12 {
                    return Err(Error::config(
                        "prune.ratios",
                        format!("first ratio {} disagrees with the student keep ratio {r0}", list[0]),
                    ));
                }
                Ok(list.clone())
            }
            None => derive_ta_keep_ratios(r0, &self.ta_divisors),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub cycle_len_epochs: usize,
    pub cycle_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub bn_momentum: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            lr: 0.008,
            cycle_len_epochs: 5,
            cycle_decay: 0.9,
            momentum: 0.9,
            weight_decay: 0.0004,
            bn_momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    pub optimizer: ScoreOptimizerKind,
    /// Score step size at the top of the learning-rate schedule.
    pub lr: f64,
    /// Scale the score step with the weight learning-rate schedule.
    pub follow_schedule: bool,
    pub rms_decay: f64,
    pub rms_eps: f64,
    /// Add each slot's own reduction to the one routed from the slot above.
    pub own_gradient: bool,
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection {
            optimizer: ScoreOptimizerKind::Sgd,
            lr: 0.5,
            follow_schedule: true,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            own_gradient: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    /// Bootstrap epochs for the pre-trained teacher when no checkpoint is supplied.
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub intermediate_epochs: usize,
    pub finetune_epochs: usize,
    pub promotion_patience: usize,
}

impl Default for StageSection {
    fn default() -> Self {
        StageSection {
            pretrain_epochs: 0,
            joint_epochs: 80,
            intermediate_epochs: 0,
            finetune_epochs: 80,
            promotion_patience: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Builtin architecture name or path to an arch file.
    pub arch: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Checkpoint holding the pre-trained model.
    pub pretrained: Option<PathBuf>,
    pub data: DataConfig,
    pub prune: PruneSection,
    pub distill: DistillConfig,
    pub optim: OptimSection,
    pub scores: ScoreSection,
    pub stages: StageSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: "vgg16-cifar10".into(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            pretrained: None,
            data: DataConfig::default(),
            prune: PruneSection::default(),
            distill: DistillConfig::default(),
            optim: OptimSection::default(),
            scores: ScoreSection::default(),
            stages: StageSection::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.prune.keep_ratios()?;
        if self.prune.min_filters_per_layer == 0 {
            return Err(Error::config("prune.min_filters_per_layer", "must be at least 1"));
        }
        self.distill.validate()?;
        if self.pretrained.is_none() && self.stages.pretrain_epochs == 0 {
            return Err(Error::config(
                "pretrained",
                "a pre-trained checkpoint or pretrain_epochs > 0 is required",
            ));
        }
        if let Some(p) = &self.pretrained {
            if !p.exists() {
                return Err(Error::config("pretrained", format!("{} does not exist", p.display())));
            }
        }
        if self.data.batch_size == 0 || self.data.eval_batch_size == 0 {
            return Err(Error::config("data.batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.data.flip_prob) {
            return Err(Error::config("data.flip_prob", "must lie in [0, 1]"));
        }
        if let Some(path) = self.data.dir() {
            if !data::resolve_path(&path).exists() {
                return Err(Error::config(
                    "data.path",
                    format!("{} does not exist", data::resolve_path(&path).display()),
                ));
            }
        }
        if !(self.optim.bn_momentum >= 0.0 && self.optim.bn_momentum < 1.0) {
            return Err(Error::config("optim.bn_momentum", "must lie in [0, 1)"));
        }
        if self.stages.promotion_patience == 0 {
            return Err(Error::config("stages.promotion_patience", "must be at least 1"));
        }
        if !(self.scores.lr >= 0.0) {
            return Err(Error::config("scores.lr", "must be non-negative"));
        }
        LrSchedule {
            base_lr: self.optim.lr,
            cycle_len_epochs: self.optim.cycle_len_epochs,
            cycle_decay: self.optim.cycle_decay,
            steps_per_epoch: 1,
        }
        .validate()
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::SgdNesterov,
            momentum: self.optim.momentum,
            weight_decay: self.optim.weight_decay,
            ..Default::default()
        }
    }

    fn score_optimizer(&self) -> ScoreOptimizer {
        match self.scores.optimizer {
            ScoreOptimizerKind::Sgd => ScoreOptimizer::sgd(),
            ScoreOptimizerKind::Rmsprop => ScoreOptimizer::rmsprop(self.scores.rms_decay, self.scores.rms_eps),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Joint,
    IntermediateFinetune,
    StudentFinetune,
    Done,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Joint => "joint",
            Stage::IntermediateFinetune => "intermediate",
            Stage::StudentFinetune => "finetune",
            Stage::Done => "done",
        })
    }
}

/// Teacher promotion during fine-tuning. Teacher indices run over the slots above the
/// student and end at `frozen`, the index standing for the pre-trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Promotion {
    pub teacher: usize,
    pub frozen: usize,
    pub patience: usize,
    pub streak: usize,
}

impl Promotion {
    pub fn new(slots: usize, patience: usize) -> Self {
        Promotion {
            teacher: 1.min(slots),
            frozen: slots,
            patience,
            streak: 0,
        }
    }

    /// Records one epoch's validation accuracies; returns whether the teacher advanced.
    pub fn observe(&mut self, student_acc: f64, teacher_acc: f64) -> bool {
        if self.teacher >= self.frozen {
            return false;
        }
        if student_acc > teacher_acc {
            self.streak += 1;
            if self.streak >= self.patience {
                self.teacher += 1;
                self.streak = 0;
                return true;
            }
        } else {
            self.streak = 0;
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    /// Completed epochs within the current stage.
    pub stage_epoch: usize,
    /// Completed epochs over the whole run; keys the data stream.
    pub epoch: u64,
    pub step: u64,
    pub promotion: Option<Promotion>,
    /// Last validation accuracy of every slot.
    pub val_accuracy: Vec<f64>,
    /// Student mask at the end of the previous joint epoch.
    pub last_student_mask: Option<FilterMask>,
}

impl TrainState {
    fn advance(&mut self, to: Stage) -> Result<()> {
        if to <= self.stage {
            return Err(Error::StageTransition {
                from: self.stage.to_string(),
                to: to.to_string(),
            });
        }
        self.stage = to;
        self.stage_epoch = 0;
        Ok(())
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub stage: Stage,
    /// Slot index, or `None` for the pre-training model.
    pub slot: Option<usize>,
    pub loss: LossParts,
    pub accuracy: f64,
    pub lr: f64,
    pub kept_filters: usize,
    pub totals: Totals,
}

pub const METRICS_HEADER: &str = "step,epoch,stage,slot,loss,task_loss,kd_loss,hint_loss,accuracy,lr,kept_filters_total,flops,params";
pub const EVAL_HEADER: &str = "epoch,stage,slot,keep_ratio,test_accuracy,teacher,mask_change";

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let slot = self.slot.map_or_else(|| "pretrain".to_string(), |s| s.to_string());
        write!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.stage,
            slot,
            self.loss.total,
            self.loss.task,
            self.loss.kd,
            self.loss.hint,
            self.accuracy,
            self.lr,
            self.kept_filters,
            self.totals.flops,
            self.totals.params
        )
    }
}

/// Per-epoch evaluation record, one per evaluated slot.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub epoch: u64,
    pub stage: Stage,
    pub slot: Option<usize>,
    pub keep_ratio: f64,
    pub accuracy: f64,
    pub teacher: Option<usize>,
    pub mask_change: Option<usize>,
}

impl fmt::Display for EvalRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<usize>| v.map_or_else(String::new, |v| v.to_string());
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.stage,
            self.slot.map_or_else(|| "pretrain".to_string(), |s| s.to_string()),
            self.keep_ratio,
            self.accuracy,
            opt(self.teacher),
            opt(self.mask_change)
        )
    }
}

/// Final per-slot results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotSummary {
    pub slot: usize,
    pub keep_ratio: f64,
    pub test_accuracy: f64,
    pub kept_filters: usize,
    pub total_filters: usize,
    pub params: u64,
    pub flops: u64,
    pub report: CompressionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub baseline: Totals,
    pub pretrained_accuracy: f64,
    pub slots: Vec<SlotSummary>,
}

fn arch_from_source(source: &str) -> Result<ArchSpec> {
    ArchSpec::load(source)
}

/// Train and test splits for a data config.
pub fn load_data(cfg: &DataConfig, seed: u64, input: InputShape) -> Result<(Dataset, Dataset)> {
    match cfg.kind {
        DatasetKind::Synthetic => {
            let all = data::synthetic_dataset(seed, cfg.samples, cfg.classes, (input.c, input.h, input.w))?;
            data::train_test_split(&all, cfg.test_fraction, seed)
        }
        DatasetKind::Cifar10 => data::load_cifar10(&cfg.dir().expect("file dataset")),
        DatasetKind::Mnist => data::load_mnist_idx(&cfg.dir().expect("file dataset")),
    }
}

pub fn augment_configs(cfg: &DataConfig, train: &Dataset) -> (AugmentConfig, AugmentConfig) {
    let normalize = cfg.normalize.then(|| train.channel_stats());
    let train_aug = AugmentConfig {
        flip_prob: cfg.flip_prob,
        crop: cfg.crop,
        pad: cfg.pad,
        normalize: normalize.clone(),
    };
    let eval_aug = AugmentConfig {
        normalize,
        ..AugmentConfig::none()
    };
    (train_aug, eval_aug)
}

/// Top-1 accuracy of one model in eval mode.
pub fn evaluate(net: &Network, params: &ModelParams<f32>, mask: &FilterMask, ds: &Dataset, batch_size: usize, augment: &AugmentConfig) -> Result<f64> {
    let mut correct = 0;
    for b in data::batches(ds, batch_size, 0, 0, augment, false) {
        let logits = net.predict(params, mask, &b.images)?;
        correct += correct_count(&logits, &b.labels);
    }
    Ok(correct as f64 / ds.len().max(1) as f64)
}

fn rename(params: &mut [Parameter<f32>], prefix: &str) {
    for p in params {
        let base = p.name.rsplit('/').next().unwrap_or(&p.name).to_string();
        p.name = format!("{prefix}/{base}");
    }
}

fn step_params(opt: &mut OptimizerState<f32>, params: &mut [Parameter<f32>], vars: &[Var], grads: &crate::autodiff::Grads<f32>, lr: f64) -> Result<()> {
    for (p, &v) in params.iter_mut().zip(vars) {
        if let Some(g) = grads.get(v) {
            opt.step(p, g, lr)?;
        }
    }
    Ok(())
}

fn put_params(ck: &mut Checkpoint, params: &[Parameter<f32>]) {
    for p in params {
        ck.put(p.name.clone(), p.value.clone());
    }
}

fn take_params(ck: &Checkpoint, params: &mut [Parameter<f32>]) -> Result<()> {
    for p in params {
        let t = ck.get::<f32>(&p.name)?;
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "`{}` has shape {:?}, network expects {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(())
}

fn put_running(ck: &mut Checkpoint, prefix: &str, running: &[RunningStats<f32>]) {
    for (i, r) in running.iter().enumerate() {
        ck.put(format!("{prefix}/bn{i}.running_mean"), Tensor::new([r.mean.len()], r.mean.clone()).expect("non-empty"));
        ck.put(format!("{prefix}/bn{i}.running_var"), Tensor::new([r.var.len()], r.var.clone()).expect("non-empty"));
    }
}

fn take_running(ck: &Checkpoint, prefix: &str, running: &mut [RunningStats<f32>]) -> Result<()> {
    for (i, r) in running.iter_mut().enumerate() {
        r.mean = ck.get::<f32>(&format!("{prefix}/bn{i}.running_mean"))?.data().to_vec();
        r.var = ck.get::<f32>(&format!("{prefix}/bn{i}.running_var"))?.data().to_vec();
    }
    Ok(())
}

fn put_model(ck: &mut Checkpoint, prefix: &str, m: &ModelParams<f32>) {
    put_params(ck, &m.shared);
    put_params(ck, &m.slot.params);
    put_running(ck, prefix, &m.slot.running);
}

fn take_model(ck: &Checkpoint, prefix: &str, m: &mut ModelParams<f32>) -> Result<()> {
    take_params(ck, &mut m.shared)?;
    take_params(ck, &mut m.slot.params)?;
    take_running(ck, prefix, &mut m.slot.running)
}

fn put_vecs(ck: &mut Checkpoint, prefix: &str, v: &[Vec<f64>]) {
    for (l, xs) in v.iter().enumerate() {
        if !xs.is_empty() {
            ck.put(format!("{prefix}/{l}"), Tensor::new([xs.len()], xs.clone()).expect("non-empty"));
        }
    }
}

fn take_vecs(ck: &Checkpoint, prefix: &str, sizes: &[usize]) -> Result<Vec<Vec<f64>>> {
    sizes
        .iter()
        .enumerate()
        .map(|(l, _)| Ok(ck.get::<f64>(&format!("{prefix}/{l}"))?.data().to_vec()))
        .collect()
}

/// A standalone model with fresh initialization and `model/` parameter names.
pub fn fresh_model(net: &Network, seed: u64) -> ModelParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = net.init::<f32, _>(&mut rng);
    rename(&mut m.shared, "model");
    rename(&mut m.slot.params, "model");
    m
}

/// Saves a standalone model (for example the pre-trained teacher).
pub fn save_model(path: &Path, net: &Network, model: &ModelParams<f32>, accuracy: Option<f64>) -> Result<()> {
    let mut m = model.clone();
    rename(&mut m.shared, "model");
    rename(&mut m.slot.params, "model");
    let mut ck = Checkpoint::new(json!({
        "kind": "model",
        "arch": net.arch.to_text(),
        "test_accuracy": accuracy,
    }));
    put_model(&mut ck, "model", &m);
    ck.save(path)
}

pub fn load_model(ck: &Checkpoint, net: &Network) -> Result<ModelParams<f32>> {
    let mut m = fresh_model(net, 0);
    take_model(ck, "model", &mut m)?;
    Ok(m)
}

fn checkpoint_arch(ck: &Checkpoint) -> Result<ArchSpec> {
    let text = ck.meta["arch"]
        .as_str()
        .ok_or_else(|| Error::Checkpoint("metadata has no architecture".into()))?;
    ArchSpec::parse(text)
}

/// A model and mask recovered from any checkpoint kind, for evaluation and analysis.
pub struct LoadedModel {
    pub net: Network,
    pub params: ModelParams<f32>,
    pub mask: FilterMask,
    pub keep_ratio: f64,
    pub config: Option<TrainConfig>,
}

/// `slot` selects a hierarchy slot; it is ignored for standalone model checkpoints.
pub fn load_for_eval(path: &Path, slot: usize) -> Result<LoadedModel> {
    let ck = Checkpoint::load(path)?;
    let arch = checkpoint_arch(&ck)?;
    let mut net = Network::new(&arch)?;
    match ck.meta["kind"].as_str() {
        Some("model") => {
            let params = load_model(&ck, &net)?;
            Ok(LoadedModel {
                mask: net.full_mask(),
                net,
                params,
                keep_ratio: 1.0,
                config: None,
            })
        }
        Some("train") => {
            let config: TrainConfig = serde_json::from_value(ck.meta["config"].clone())
                .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
            if let Some(h) = &config.distill.hint_layers {
                net.set_hint_convs(h.clone())?;
            }
            let t = Trainer::restore(config.clone(), &ck, net.clone())?;
            let h = t
                .hierarchy
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("checkpoint was taken before the hierarchy existed".into()))?;
            if slot >= h.len() {
                return Err(Error::config("slot", format!("checkpoint has {} slots", h.len())));
            }
            Ok(LoadedModel {
                params: h.slot_params(slot),
                mask: h.slots[slot].mask.clone(),
                keep_ratio: h.slots[slot].keep_ratio,
                net,
                config: Some(config),
            })
        }
        other => Err(Error::Checkpoint(format!("unknown checkpoint kind {other:?}"))),
    }
}

/// All masks stored in a training checkpoint, by slot.
pub fn checkpoint_masks(path: &Path) -> Result<(ArchSpec, Vec<(f64, FilterMask)>)> {
    let ck = Checkpoint::load(path)?;
    let arch = checkpoint_arch(&ck)?;
    let masks: Vec<FilterMask> = match ck.meta.get("masks") {
        Some(m) => serde_json::from_value(m.clone()).map_err(|e| Error::Checkpoint(format!("masks: {e}")))?,
        None => vec![FilterMask::all_ones(&arch.maskable_filters())],
    };
    let ratios: Vec<f64> = match ck.meta.get("keep_ratios") {
        Some(r) => serde_json::from_value(r.clone()).map_err(|e| Error::Checkpoint(format!("keep_ratios: {e}")))?,
        None => vec![1.0],
    };
    Ok((arch, ratios.into_iter().zip(masks).collect()))
}

pub struct Trainer {
    pub config: TrainConfig,
    pub net: Network,
    pub train: Dataset,
    pub test: Dataset,
    train_aug: AugmentConfig,
    eval_aug: AugmentConfig,
    pub state: TrainState,
    /// Model being pre-trained; becomes the frozen teacher.
    pub pretrain: Option<ModelParams<f32>>,
    pub pretrained_accuracy: f64,
    pub hierarchy: Option<ModelHierarchy<f32>>,
    pub optimizer: OptimizerState<f32>,
    pub score_opts: Vec<ScoreOptimizer>,
    baseline: Totals,
    /// Suppresses file output (used when a trainer is rebuilt only for inspection).
    write_files: bool,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let arch = arch_from_source(&config.arch)?;
        let mut net = Network::new(&arch)?;
        net.bn_momentum = config.optim.bn_momentum;
        if let Some(h) = &config.distill.hint_layers {
            net.set_hint_convs(h.clone())?;
        }
        let mut t = Self::skeleton(config, net)?;
        match &t.config.pretrained {
            Some(path) => {
                let ck = Checkpoint::load(path)?;
                let arch = checkpoint_arch(&ck)?;
                if arch.layers != t.net.arch.layers || arch.input != t.net.arch.input {
                    return Err(Error::config("pretrained", "checkpoint architecture differs from `arch`"));
                }
                let model = load_model(&ck, &t.net)?;
                t.pretrained_accuracy = evaluate(&t.net, &model, &t.net.full_mask(), &t.test, t.config.data.eval_batch_size, &t.eval_aug)?;
                t.build_hierarchy(&model)?;
                t.state.stage = Stage::Joint;
            }
            None => {
                t.pretrain = Some(fresh_model(&t.net, t.config.seed));
            }
        }
        t.write_files = true;
        t.start_files()?;
        Ok(t)
    }

    fn skeleton(config: TrainConfig, net: Network) -> Result<Self> {
        let (train, test) = load_data(&config.data, config.seed, net.arch.input)?;
        let (c, h, w) = train.image_shape();
        let input = net.arch.input;
        if (c, h, w) != (input.c, input.h, input.w) {
            return Err(Error::config(
                "arch",
                format!(
                    "input {}x{}x{} does not match data {c}x{h}x{w}",
                    input.c, input.h, input.w
                ),
            ));
        }
        if net.classes != train.classes {
            return Err(Error::config(
                "arch",
                format!("classifier has {} outputs for {} classes", net.classes, train.classes),
            ));
        }
        let (train_aug, eval_aug) = augment_configs(&config.data, &train);
        let baseline = net.arch.stats(None)?.totals;
        Ok(Trainer {
            optimizer: OptimizerState::new(config.optimizer()),
            state: TrainState {
                stage: Stage::Pretrain,
                stage_epoch: 0,
                epoch: 0,
                step: 0,
                promotion: None,
                val_accuracy: Vec::new(),
                last_student_mask: None,
            },
            config,
            net,
            train,
            test,
            train_aug,
            eval_aug,
            pretrain: None,
            pretrained_accuracy: 0.0,
            hierarchy: None,
            score_opts: Vec::new(),
            baseline,
            write_files: false,
        })
    }

    fn build_hierarchy(&mut self, pretrained: &ModelParams<f32>) -> Result<()> {
        let ratios = self.config.prune.keep_ratios()?;
        let mut h = ModelHierarchy::from_pretrained(&self.net, pretrained, &ratios, self.config.prune.min_filters_per_layer)?;
        rename(&mut h.shared, "shared");
        for s in &mut h.slots {
            rename(&mut s.state.params, &format!("slot{}", s.index));
        }
        rename(&mut h.frozen.shared, "frozen");
        rename(&mut h.frozen.slot.params, "frozen");
        self.score_opts = (0..h.len().saturating_sub(1)).map(|_| self.config.score_optimizer()).collect();
        self.state.val_accuracy = vec![0.0; h.len()];
        self.state.last_student_mask = Some(h.slots[0].mask.clone());
        self.hierarchy = Some(h);
        Ok(())
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out_dir
    }

    fn start_files(&self) -> Result<()> {
        fs::create_dir_all(self.out_dir().join("checkpoints"))?;
        fs::write(self.out_dir().join("config.toml"), self.config.to_toml())?;
        fs::write(self.out_dir().join("metrics.csv"), format!("{METRICS_HEADER}\n"))?;
        fs::write(self.out_dir().join("eval.csv"), format!("{EVAL_HEADER}\n"))?;
        Ok(())
    }

    fn append(&self, file: &str, rows: &[String]) -> Result<()> {
        if !self.write_files || rows.is_empty() {
            return Ok(());
        }
        let mut f = fs::OpenOptions::new().append(true).open(self.out_dir().join(file))?;
        let mut buf = String::new();
        for r in rows {
            buf.push_str(r);
            buf.push('\n');
        }
        f.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.config.data.batch_size)
    }

    fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.config.optim.lr,
            cycle_len_epochs: self.config.optim.cycle_len_epochs,
            cycle_decay: self.config.optim.cycle_decay,
            steps_per_epoch: self.steps_per_epoch(),
        }
    }

    fn stage_epochs(&self, stage: Stage) -> usize {
        let s = &self.config.stages;
        match stage {
            Stage::Pretrain => s.pretrain_epochs,
            Stage::Joint => s.joint_epochs,
            Stage::IntermediateFinetune => s.intermediate_epochs,
            Stage::StudentFinetune => s.finetune_epochs,
            Stage::Done => 0,
        }
    }

    fn next_stage(stage: Stage) -> Stage {
        match stage {
            Stage::Pretrain => Stage::Joint,
            Stage::Joint => Stage::IntermediateFinetune,
            Stage::IntermediateFinetune => Stage::StudentFinetune,
            Stage::StudentFinetune | Stage::Done => Stage::Done,
        }
    }

    /// Moves past finished (or empty) stages, setting up the next one.
    fn settle_stage(&mut self) -> Result<()> {
        while self.state.stage != Stage::Done && self.state.stage_epoch >= self.stage_epochs(self.state.stage) {
            let next = Self::next_stage(self.state.stage);
            if self.state.stage == Stage::Pretrain {
                let model = self.pretrain.take().expect("pre-training model");
                self.pretrained_accuracy = self.pretrain_accuracy(&model)?;
                if self.write_files {
                    save_model(&self.out_dir().join("pretrained.ckpt"), &self.net, &model, Some(self.pretrained_accuracy))?;
                }
                self.build_hierarchy(&model)?;
            }
            if next == Stage::StudentFinetune {
                let n = self.hierarchy.as_ref().map_or(0, |h| h.len());
                self.state.promotion = Some(Promotion::new(n, self.config.stages.promotion_patience));
            }
            self.state.advance(next)?;
            self.optimizer = OptimizerState::new(self.config.optimizer());
        }
        Ok(())
    }

    fn pretrain_accuracy(&self, model: &ModelParams<f32>) -> Result<f64> {
        evaluate(&self.net, model, &self.net.full_mask(), &self.test, self.config.data.eval_batch_size, &self.eval_aug)
    }

    /// Runs every remaining epoch.
    pub fn run(&mut self) -> Result<RunSummary> {
        self.run_epochs(usize::MAX)?;
        self.summary()
    }

    /// Runs at most `limit` epochs; returns how many ran.
    pub fn run_epochs(&mut self, limit: usize) -> Result<usize> {
        let mut done = 0;
        self.settle_stage()?;
        while self.state.stage != Stage::Done && done < limit {
            self.run_epoch()?;
            done += 1;
            self.settle_stage()?;
        }
        Ok(done)
    }

    fn run_epoch(&mut self) -> Result<()> {
        let stage = self.state.stage;
        let sched = self.schedule();
        let stage_step0 = self.state.stage_epoch * self.steps_per_epoch();
        let batches: Vec<Batch> = data::batches(
            &self.train,
            self.config.data.batch_size,
            self.config.seed,
            self.state.epoch,
            &self.train_aug,
            true,
        )
        .collect();
        let mut rows = Vec::new();
        for (i, batch) in batches.iter().enumerate() {
            let lr = sched.lr_at(stage_step0 + i);
            let r = match stage {
                Stage::Pretrain => self.pretrain_step(batch, lr)?,
                Stage::Joint => self.joint_step(batch, lr, true)?,
                Stage::IntermediateFinetune => self.joint_step(batch, lr, false)?,
                Stage::StudentFinetune => self.finetune_step(batch, lr)?,
                Stage::Done => unreachable!("no epochs run after the last stage"),
            };
            rows.extend(r.iter().map(|r| r.to_string()));
            self.state.step += 1;
        }
        self.append("metrics.csv", &rows)?;
        let evals = self.end_of_epoch(stage)?;
        self.append("eval.csv", &evals.iter().map(|r| r.to_string()).collect::<Vec<_>>())?;
        self.state.stage_epoch += 1;
        self.state.epoch += 1;
        if self.write_files {
            let path = self.out_dir().join("checkpoints").join(format!("epoch-{:04}.ckpt", self.state.epoch));
            self.checkpoint()?.save(&path)?;
        }
        Ok(())
    }

    fn row(&self, stage: Stage, slot: Option<usize>, loss: LossParts, correct: usize, n: usize, lr: f64, mask: &FilterMask) -> Result<MetricsRow> {
        Ok(MetricsRow {
            step: self.state.step,
            epoch: self.state.epoch,
            stage,
            slot,
            loss,
            accuracy: correct as f64 / n as f64,
            lr,
            kept_filters: mask.kept(),
            totals: self.net.arch.stats(Some(mask))?.totals,
        })
    }

    fn pretrain_step(&mut self, batch: &Batch, lr: f64) -> Result<Vec<MetricsRow>> {
        let model = self.pretrain.as_mut().expect("pre-training model");
        let mut tape = Tape::new();
        let x = tape.constant(batch.images.clone());
        let bound = Bound {
            shared: Network::bind(&mut tape, &model.shared, true),
            slot: Network::bind(&mut tape, &model.slot.params, true),
        };
        let full = self.net.full_mask();
        let f = self.net.forward(&mut tape, &bound, &model.slot.running, &full, x, BnMode::Train)?;
        let loss = tape.softmax_cross_entropy(f.logits, &batch.targets)?;
        let grads = tape.backward(loss)?;
        step_params(&mut self.optimizer, &mut model.shared, &bound.shared, &grads, lr)?;
        step_params(&mut self.optimizer, &mut model.slot.params, &bound.slot, &grads, lr)?;
        model.slot.update_running(&f.batch_stats, self.net.bn_momentum)?;
        let task = tape.value(loss).item() as f64;
        let correct = correct_count(tape.value(f.logits), &batch.labels);
        let parts = LossParts {
            total: task,
            task,
            kd: 0.0,
            hint: 0.0,
        };
        Ok(vec![self.row(Stage::Pretrain, None, parts, correct, batch.labels.len(), lr, &full)?])
    }

    /// One joint step over every slot. With `learn_masks`, scores are updated from the
    /// routed gradients and masks rebuilt afterwards.
    fn joint_step(&mut self, batch: &Batch, lr: f64, learn_masks: bool) -> Result<Vec<MetricsRow>> {
        let stage = self.state.stage;
        let h = self.hierarchy.as_ref().expect("hierarchy");
        let n = h.len();
        let mut tape = Tape::new();
        let plan: Vec<_> = (0..n).map(|i| (i, BnMode::Train, true)).collect();
        let fwd = h.forward_all(&self.net, &mut tape, &batch.images, &plan, true)?;
        let frozen = fwd.frozen.as_ref().expect("frozen teacher");
        let mut parts = Vec::with_capacity(n);
        let mut total = None;
        for i in 0..n {
            let teacher = if i + 1 < n { &fwd.slots[i + 1] } else { frozen };
            let t_logits = tape.value(teacher.logits).clone();
            let t_maps: Vec<Tensor<f32>> = teacher.hints.iter().map(|&v| tape.value(v).clone()).collect();
            let s = &fwd.slots[i];
            let lv = slot_loss_on_tape(
                &mut tape,
                s.logits,
                &s.hints,
                &batch.targets,
                Some(TeacherOutputs {
                    logits: &t_logits,
                    maps: &t_maps,
                }),
                &self.config.distill,
            )?;
            total = Some(match total {
                None => lv.total,
                Some(t) => tape.add(t, lv.total)?,
            });
            parts.push(lv);
        }
        let grads = tape.backward(total.expect("at least one slot"))?;

        let gamma_grads = if learn_masks {
            let contexts: Vec<_> = fwd.slots.iter().map(|f| Some(save_contexts(&tape, f, &grads))).collect();
            Some(route_gamma_gradients(&contexts, self.config.scores.own_gradient)?)
        } else {
            None
        };

        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let correct = correct_count(tape.value(fwd.slots[i].logits), &batch.labels);
            let mask = &self.hierarchy.as_ref().expect("hierarchy").slots[i].mask;
            rows.push(self.row(stage, Some(i), parts[i].values(&tape), correct, batch.labels.len(), lr, mask)?);
        }

        let h = self.hierarchy.as_mut().expect("hierarchy");
        step_params(&mut self.optimizer, &mut h.shared, &fwd.shared, &grads, lr)?;
        for (i, slot) in h.slots.iter_mut().enumerate() {
            step_params(&mut self.optimizer, &mut slot.state.params, &fwd.slot_vars[i], &grads, lr)?;
            slot.state.update_running(&fwd.slots[i].batch_stats, self.net.bn_momentum)?;
        }
        if let Some(gg) = gamma_grads {
            let score_lr = if self.config.scores.follow_schedule {
                self.config.scores.lr * lr / self.config.optim.lr
            } else {
                self.config.scores.lr
            };
            for (i, g) in gg.iter().enumerate() {
                let slot = &mut h.slots[i];
                let scores = slot.scores.as_ref().expect("scored slot");
                slot.scores = Some(apply_gamma_update(scores, g, &mut self.score_opts[i], score_lr)?);
            }
            h.refresh_masks()?;
        }
        Ok(rows)
    }

    fn finetune_step(&mut self, batch: &Batch, lr: f64) -> Result<Vec<MetricsRow>> {
        let h = self.hierarchy.as_ref().expect("hierarchy");
        let teacher = self.state.promotion.expect("promotion state").teacher;
        let to_frozen = teacher >= h.len();
        let mut plan = vec![(0, BnMode::Train, true)];
        if !to_frozen {
            plan.push((teacher, BnMode::Train, false));
        }
        let mut tape = Tape::new();
        let fwd = h.forward_all(&self.net, &mut tape, &batch.images, &plan, to_frozen)?;
        let t = if to_frozen { fwd.frozen.as_ref().expect("frozen") } else { &fwd.slots[1] };
        let t_logits = tape.value(t.logits).clone();
        let t_maps: Vec<Tensor<f32>> = t.hints.iter().map(|&v| tape.value(v).clone()).collect();
        let s = &fwd.slots[0];
        let lv = slot_loss_on_tape(
            &mut tape,
            s.logits,
            &s.hints,
            &batch.targets,
            Some(TeacherOutputs {
                logits: &t_logits,
                maps: &t_maps,
            }),
            &self.config.distill,
        )?;
        let grads = tape.backward(lv.total)?;
        let correct = correct_count(tape.value(s.logits), &batch.labels);
        let row = self.row(
            Stage::StudentFinetune,
            Some(0),
            lv.values(&tape),
            correct,
            batch.labels.len(),
            lr,
            &h.slots[0].mask,
        )?;
        let h = self.hierarchy.as_mut().expect("hierarchy");
        step_params(&mut self.optimizer, &mut h.shared, &fwd.shared, &grads, lr)?;
        let student = &mut h.slots[0];
        step_params(&mut self.optimizer, &mut student.state.params, &fwd.slot_vars[0], &grads, lr)?;
        student.state.update_running(&fwd.slots[0].batch_stats, self.net.bn_momentum)?;
        Ok(vec![row])
    }

    /// Test accuracy of slot `i` (or of the frozen teacher for `i == N`).
    pub fn slot_accuracy(&self, i: usize) -> Result<f64> {
        let h = self.hierarchy.as_ref().expect("hierarchy");
        let bs = self.config.data.eval_batch_size;
        if i >= h.len() {
            return self.pretrain_accuracy(&h.frozen);
        }
        evaluate(&self.net, &h.slot_params(i), &h.slots[i].mask, &self.test, bs, &self.eval_aug)
    }

    fn end_of_epoch(&mut self, stage: Stage) -> Result<Vec<EvalRow>> {
        let epoch = self.state.epoch;
        let mut rows = Vec::new();
        match stage {
            Stage::Pretrain => {
                let model = self.pretrain.as_ref().expect("pre-training model");
                rows.push(EvalRow {
                    epoch,
                    stage,
                    slot: None,
                    keep_ratio: 1.0,
                    accuracy: self.pretrain_accuracy(model)?,
                    teacher: None,
                    mask_change: None,
                });
            }
            Stage::Joint | Stage::IntermediateFinetune => {
                let n = self.hierarchy.as_ref().expect("hierarchy").len();
                let student_mask = self.hierarchy.as_ref().expect("hierarchy").slots[0].mask.clone();
                let change = self.state.last_student_mask.as_ref().map(|m| m.hamming(&student_mask));
                self.state.last_student_mask = Some(student_mask);
                for i in 0..n {
                    let acc = self.slot_accuracy(i)?;
                    self.state.val_accuracy[i] = acc;
                    rows.push(EvalRow {
                        epoch,
                        stage,
                        slot: Some(i),
                        keep_ratio: self.hierarchy.as_ref().expect("hierarchy").slots[i].keep_ratio,
                        accuracy: acc,
                        teacher: None,
                        mask_change: if i == 0 { change } else { None },
                    });
                }
            }
            Stage::StudentFinetune => {
                let mut promo = self.state.promotion.expect("promotion state");
                let teacher = promo.teacher;
                let student_acc = self.slot_accuracy(0)?;
                let teacher_acc = self.slot_accuracy(teacher)?;
                self.state.val_accuracy[0] = student_acc;
                if teacher < self.state.val_accuracy.len() {
                    self.state.val_accuracy[teacher] = teacher_acc;
                }
                promo.observe(student_acc, teacher_acc);
                self.state.promotion = Some(promo);
                let h = self.hierarchy.as_ref().expect("hierarchy");
                rows.push(EvalRow {
                    epoch,
                    stage,
                    slot: Some(0),
                    keep_ratio: h.slots[0].keep_ratio,
                    accuracy: student_acc,
                    teacher: Some(teacher),
                    mask_change: Some(0),
                });
            }
            Stage::Done => {}
        }
        Ok(rows)
    }

    pub fn summary(&self) -> Result<RunSummary> {
        let h = self
            .hierarchy
            .as_ref()
            .ok_or_else(|| Error::config("stages", "training ended before the hierarchy was built"))?;
        let mut slots = Vec::with_capacity(h.len());
        for (i, s) in h.slots.iter().enumerate() {
            let totals = self.net.arch.stats(Some(&s.mask))?.totals;
            slots.push(SlotSummary {
                slot: i,
                keep_ratio: s.keep_ratio,
                test_accuracy: self.slot_accuracy(i)?,
                kept_filters: s.mask.kept(),
                total_filters: s.mask.total(),
                params: totals.params,
                flops: totals.flops,
                report: compression_report(self.baseline, totals)?,
            });
        }
        Ok(RunSummary {
            baseline: self.baseline,
            pretrained_accuracy: self.pretrained_accuracy,
            slots,
        })
    }

    /// Snapshot of everything needed to continue bitwise-identically.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = json!({
            "kind": "train",
            "arch": self.net.arch.to_text(),
            "config": self.config,
            "state": self.state,
            "pretrained_accuracy": self.pretrained_accuracy,
        });
        let mut ck = Checkpoint::new(serde_json::Value::Null);
        if let Some(m) = &self.pretrain {
            put_model(&mut ck, "model", m);
        }
        if let Some(h) = &self.hierarchy {
            meta["keep_ratios"] = json!(h.keep_ratios());
            meta["masks"] = json!(h.slots.iter().map(|s| &s.mask).collect::<Vec<_>>());
            put_params(&mut ck, &h.shared);
            for s in &h.slots {
                put_params(&mut ck, &s.state.params);
                put_running(&mut ck, &format!("slot{}", s.index), &s.state.running);
                if let Some(sc) = &s.scores {
                    put_vecs(&mut ck, &format!("slot{}/scores", s.index), &sc.gamma);
                }
            }
            for (i, o) in self.score_opts.iter().enumerate() {
                put_vecs(&mut ck, &format!("slot{i}/score_rms"), &o.second_moment);
            }
            put_params(&mut ck, &h.frozen.shared);
            put_params(&mut ck, &h.frozen.slot.params);
            put_running(&mut ck, "frozen", &h.frozen.slot.running);
        }
        meta["optimizer_buffers"] = json!(self.optimizer.buffers.keys().collect::<Vec<_>>());
        for (name, buf) in &self.optimizer.buffers {
            ck.put(format!("optim/{name}"), buf.clone());
        }
        ck.meta = meta;
        Ok(ck)
    }

    /// Rebuilds a trainer from a checkpoint without touching the output directory.
    fn restore(config: TrainConfig, ck: &Checkpoint, net: Network) -> Result<Self> {
        let mut t = Self::skeleton(config, net)?;
        t.state = serde_json::from_value(ck.meta["state"].clone()).map_err(|e| Error::Checkpoint(format!("state: {e}")))?;
        t.pretrained_accuracy = ck.meta["pretrained_accuracy"].as_f64().unwrap_or(0.0);
        if t.state.stage == Stage::Pretrain {
            let mut m = fresh_model(&t.net, 0);
            take_model(ck, "model", &mut m)?;
            t.pretrain = Some(m);
        } else {
            let ratios: Vec<f64> = serde_json::from_value(ck.meta["keep_ratios"].clone())
                .map_err(|e| Error::Checkpoint(format!("keep_ratios: {e}")))?;
            let masks: Vec<FilterMask> =
                serde_json::from_value(ck.meta["masks"].clone()).map_err(|e| Error::Checkpoint(format!("masks: {e}")))?;
            if masks.len() != ratios.len() {
                return Err(Error::Checkpoint("mask and keep-ratio counts differ".into()));
            }
            let template = fresh_model(&t.net, 0);
            let saved_state = t.state.clone();
            let min = t.config.prune.min_filters_per_layer;
            let mut h = ModelHierarchy::from_pretrained(&t.net, &template, &ratios, min)?;
            rename(&mut h.shared, "shared");
            take_params(ck, &mut h.shared)?;
            for (s, mask) in h.slots.iter_mut().zip(masks) {
                rename(&mut s.state.params, &format!("slot{}", s.index));
                take_params(ck, &mut s.state.params)?;
                take_running(ck, &format!("slot{}", s.index), &mut s.state.running)?;
                if s.scores.is_some() {
                    s.scores = Some(ImportanceScores {
                        gamma: take_vecs(ck, &format!("slot{}/scores", s.index), &t.net.mask_sizes)?,
                    });
                }
                if mask.layers.iter().map(Vec::len).collect::<Vec<_>>() != t.net.mask_sizes {
                    return Err(Error::Checkpoint("mask does not fit the architecture".into()));
                }
                s.mask = mask;
            }
            rename(&mut h.frozen.shared, "frozen");
            rename(&mut h.frozen.slot.params, "frozen");
            take_params(ck, &mut h.frozen.shared)?;
            take_params(ck, &mut h.frozen.slot.params)?;
            take_running(ck, "frozen", &mut h.frozen.slot.running)?;
            t.score_opts = (0..h.len().saturating_sub(1)).map(|_| t.config.score_optimizer()).collect();
            for (i, o) in t.score_opts.iter_mut().enumerate() {
                if o.kind == ScoreOptimizerKind::Rmsprop && ck.get::<f64>(&format!("slot{i}/score_rms/0")).is_ok() {
                    o.second_moment = take_vecs(ck, &format!("slot{i}/score_rms"), &t.net.mask_sizes)?;
                }
            }
            t.hierarchy = Some(h);
            t.state = saved_state;
        }
        let names: Vec<String> = serde_json::from_value(ck.meta["optimizer_buffers"].clone()).unwrap_or_default();
        for name in names {
            t.optimizer.buffers.insert(name.clone(), ck.get::<f32>(&format!("optim/{name}"))?.clone());
        }
        Ok(t)
    }

    /// Continues a run from a checkpoint. Metrics files are cut back to the checkpoint
    /// so that the resumed run's files match an uninterrupted one.
    pub fn resume(path: &Path, out_dir: Option<PathBuf>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.meta["kind"].as_str() != Some("train") {
            return Err(Error::Checkpoint("not a training checkpoint".into()));
        }
        let mut config: TrainConfig =
            serde_json::from_value(ck.meta["config"].clone()).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        if let Some(dir) = out_dir {
            config.out_dir = dir;
        }
        let arch = checkpoint_arch(&ck)?;
        let mut net = Network::new(&arch)?;
        net.bn_momentum = config.optim.bn_momentum;
        if let Some(h) = &config.distill.hint_layers {
            net.set_hint_convs(h.clone())?;
        }
        let mut t = Self::restore(config, &ck, net)?;
        t.write_files = true;
        fs::create_dir_all(t.out_dir().join("checkpoints"))?;
        fs::write(t.out_dir().join("config.toml"), t.config.to_toml())?;
        truncate_csv(&t.out_dir().join("metrics.csv"), METRICS_HEADER, |step| step < t.state.step)?;
        truncate_csv(&t.out_dir().join("eval.csv"), EVAL_HEADER, |epoch| epoch < t.state.epoch)?;
        Ok(t)
    }

    /// Abandons the remaining joint and intermediate epochs and starts fine-tuning.
    pub fn enter_finetune(&mut self) -> Result<()> {
        if self.hierarchy.is_none() || self.state.stage > Stage::StudentFinetune {
            return Err(Error::StageTransition {
                from: self.state.stage.to_string(),
                to: Stage::StudentFinetune.to_string(),
            });
        }
        if self.state.stage < Stage::StudentFinetune {
            self.state.stage = Stage::IntermediateFinetune;
            self.state.stage_epoch = usize::MAX;
            self.settle_stage()?;
        }
        Ok(())
    }
}

/// Keeps the header and the rows whose first column satisfies `keep`.
fn truncate_csv(path: &Path, header: &str, keep: impl Fn(u64) -> bool) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = format!("{header}\n");
    for line in text.lines().skip(1) {
        let first = line.split(',').next().and_then(|v| v.parse::<u64>().ok());
        if first.is_some_and(&keep) {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Trains one standalone model with cross-entropy only.
pub fn train_plain(
    net: &Network,
    model: &mut ModelParams<f32>,
    train: &Dataset,
    test: &Dataset,
    data: &DataConfig,
    optim: &OptimSection,
    epochs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (train_aug, eval_aug) = augment_configs(data, train);
    let sched = LrSchedule {
        base_lr: optim.lr,
        cycle_len_epochs: optim.cycle_len_epochs,
        cycle_decay: optim.cycle_decay,
        steps_per_epoch: train.len().div_ceil(data.batch_size),
    };
    sched.validate()?;
    let mut opt = OptimizerState::new(OptimizerConfig {
        kind: OptimizerKind::SgdNesterov,
        momentum: optim.momentum,
        weight_decay: optim.weight_decay,
        ..Default::default()
    });
    let full = net.full_mask();
    let mut accs = Vec::with_capacity(epochs);
    let mut step = 0;
    for epoch in 0..epochs {
        for batch in data::batches(train, data.batch_size, seed, epoch as u64, &train_aug, true) {
            let lr = sched.lr_at(step);
            step += 1;
            let mut tape = Tape::new();
            let x = tape.constant(batch.images.clone());
            let bound = Bound {
                shared: Network::bind(&mut tape, &model.shared, true),
                slot: Network::bind(&mut tape, &model.slot.params, true),
            };
            let f = net.forward(&mut tape, &bound, &model.slot.running, &full, x, BnMode::Train)?;
            let loss = tape.softmax_cross_entropy(f.logits, &batch.targets)?;
            let grads = tape.backward(loss)?;
            step_params(&mut opt, &mut model.shared, &bound.shared, &grads, lr)?;
            step_params(&mut opt, &mut model.slot.params, &bound.slot, &grads, lr)?;
            model.slot.update_running(&f.batch_stats, net.bn_momentum)?;
        }
        accs.push(evaluate(net, model, &full, test, data.eval_batch_size, &eval_aug)?);
    }
    Ok(accs)
}
