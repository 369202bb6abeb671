//! Pretraining: per-batch mask-ratio draws, view construction, loss
//! assembly, Adam updates, plateau scheduling, early stopping and
//! checkpointing. Also the single-modal variant and warm starts from it.

mod audit;
mod optim;
mod schedule;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};

pub use audit::{gradcheck, relative_error, BlockReport, GradcheckConfig, GradcheckReport};
pub use optim::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use schedule::{early_stop_check, scheduler_step, SchedulerState};

use crate::augment::{make_views, AugmentConfig, AugmentedViews};
use crate::error::{Error, Result};
use crate::losses::{contrastive_node, recon_cross_nodes, recon_single_node, LossWeights};
use crate::model::network::{self, CrossModalNodes};
use crate::model::{
    sample_mask_plan, sample_single_modal_plan, save_checkpoint, Checkpoint, MaskPlan, ModelConfig, ModelParams,
    MASK_RATIO_RANGE, SINGLE_MODAL_RATIO,
};
use crate::numeric::{Array, Bindings, Evaluation, Graph, Mode, NodeId};
use crate::rng::{mix_seed, stream, tag};
use crate::signals::{Dataset, Modality, PairedSegment, Split};

/// Which objective a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMode {
    CrossModal,
    SingleModal(Modality),
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::CrossModal => "cross_modal",
            TrainMode::SingleModal(Modality::Ecg) => "single_modal_ecg",
            TrainMode::SingleModal(Modality::Ppg) => "single_modal_ppg",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_modal" => Ok(TrainMode::CrossModal),
            "single_modal_ecg" => Ok(TrainMode::SingleModal(Modality::Ecg)),
            "single_modal_ppg" => Ok(TrainMode::SingleModal(Modality::Ppg)),
            _ => Err(Error::InvalidValue { key: "train.mode".into(), reason: format!("unknown mode `{s}`") }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub mask_ratio_range: (f64, f64),
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-4,
            scheduler_factor: 0.5,
            scheduler_patience: 2,
            early_stop_patience: 5,
            max_epochs: 30,
            mask_ratio_range: MASK_RATIO_RANGE,
            seed: 0,
            mode: TrainMode::CrossModal,
        }
    }
}

impl TrainConfig {
    /// Full-scale batch of 256.
    pub fn full_scale() -> Self {
        Self { batch_size: 256, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, reason: String| Err(Error::InvalidValue { key: format!("train.{key}"), reason });
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning_rate", format!("{} is negative or non-finite", self.learning_rate));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor < 1.0) {
            return invalid("scheduler_factor", format!("{} is outside (0, 1)", self.scheduler_factor));
        }
        if self.scheduler_patience == 0 {
            return invalid("scheduler_patience", "must be positive".into());
        }
        if self.max_epochs == 0 {
            return invalid("max_epochs", "must be positive".into());
        }
        let (lo, hi) = self.mask_ratio_range;
        if !(MASK_RATIO_RANGE.0 <= lo && lo <= hi && hi <= MASK_RATIO_RANGE.1) {
            return invalid(
                "mask_ratio_range",
                format!("[{lo}, {hi}] is not inside [{}, {}]", MASK_RATIO_RANGE.0, MASK_RATIO_RANGE.1),
            );
        }
        Ok(())
    }
}

/// Uniform draw of the ECG masking ratio for one batch.
pub fn draw_mask_ratio(range: (f64, f64), seed: u64, batch_index: u64) -> Result<f64> {
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::InvalidValue {
            key: "train.mask_ratio_range".into(),
            reason: format!("[{lo}, {hi}] is not inside (0, 1)"),
        });
    }
    if lo == hi {
        return Ok(lo);
    }
    let dist = Uniform::new_inclusive(lo, hi).expect("bounds checked above");
    Ok(dist.sample(&mut stream(seed, &[tag::MASK_RATIO, batch_index])))
}

/// Shuffles `indices` and packs them greedily into batches of at most
/// `batch_size` pairs in which no subject appears twice. Batches with fewer
/// than two pairs are dropped.
pub fn epoch_batches(dataset: &Dataset, indices: &[usize], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(&mut stream(seed, &[tag::BATCH_ORDER]));
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut first_open = 0;
    for idx in order {
        let subject = dataset.pairs[idx].subject_id();
        let slot = batches[first_open..]
            .iter()
            .position(|b| b.len() < batch_size && b.iter().all(|&j| dataset.pairs[j].subject_id() != subject));
        match slot {
            Some(pos) => batches[first_open + pos].push(idx),
            None => batches.push(vec![idx]),
        }
        while first_open < batches.len() && batches[first_open].len() == batch_size {
            first_open += 1;
        }
    }
    batches.retain(|b| b.len() >= 2);
    batches
}

/// Anchor pairs of one batch and, for the cross-modal objective, their
/// augmented views.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub anchors: Vec<PairedSegment>,
    pub views: Vec<AugmentedViews>,
}

impl TrainBatch {
    /// Gathers `indices` from `dataset`; views are built when `with_views`
    /// holds, the view seed of sample `j` being `mix(seed, [j])`.
    pub fn assemble(
        dataset: &Dataset,
        indices: &[usize],
        augment: &AugmentConfig,
        seed: u64,
        with_views: bool,
    ) -> Result<Self> {
        let anchors: Vec<PairedSegment> = indices.iter().map(|&i| dataset.pairs[i].clone()).collect();
        let views = if with_views {
            anchors
                .iter()
                .enumerate()
                .map(|(j, pair)| {
                    let cfg = AugmentConfig { seed: mix_seed(seed, &[j as u64]), ..*augment };
                    make_views(pair, dataset, &cfg)
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self { anchors, views })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn patches(&self, modality: Modality, with_views: bool, cfg: &ModelConfig) -> Result<Array> {
        let mut data = Vec::new();
        let mut rows = 0;
        let segments = self
            .anchors
            .iter()
            .map(|p| p.get(modality))
            .chain(self.views.iter().filter(|_| with_views).map(|v| v.get(modality)));
        for seg in segments {
            if seg.len() != cfg.segment_len {
                return Err(Error::PlanMismatch(format!(
                    "segment of length {} does not match model length {}",
                    seg.len(),
                    cfg.segment_len
                )));
            }
            data.extend(seg.samples.iter().map(|&v| f64::from(v)));
            rows += cfg.k();
        }
        Array::matrix(rows, cfg.patch_size, data)
    }
}

/// Loss values of one step or one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub contrast: f64,
    pub recon_ecg: f64,
    pub recon_ppg: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn scaled(self, w: f64) -> Self {
        Self {
            contrast: self.contrast * w,
            recon_ecg: self.recon_ecg * w,
            recon_ppg: self.recon_ppg * w,
            total: self.total * w,
        }
    }

    fn plus(self, o: Self) -> Self {
        Self {
            contrast: self.contrast + o.contrast,
            recon_ecg: self.recon_ecg + o.recon_ecg,
            recon_ppg: self.recon_ppg + o.recon_ppg,
            total: self.total + o.total,
        }
    }
}

/// A loss graph over one batch with handles to its components.
pub struct Objective {
    pub graph: Graph,
    pub total: NodeId,
    contrast: Option<NodeId>,
    recon_ecg: Option<NodeId>,
    recon_ppg: Option<NodeId>,
}

impl Objective {
    pub fn breakdown(&self, eval: &Evaluation<'_>) -> LossBreakdown {
        let get = |n: Option<NodeId>| n.map_or(0.0, |id| eval.value(id).data()[0]);
        LossBreakdown {
            contrast: get(self.contrast),
            recon_ecg: get(self.recon_ecg),
            recon_ppg: get(self.recon_ppg),
            total: eval.root_value().data()[0],
        }
    }
}

/// Builds the scalar training loss for `batch` under `plan`.
///
/// Cross-modal: the anchors and their views go through one encoder pass per
/// modality; anchors are merged per `plan` and decoded, and the four pooled
/// view embeddings feed the contrastive term. Single-modal: masked-position
/// reconstruction of one modality.
pub fn build_objective(
    cfg: &ModelConfig,
    mode: TrainMode,
    batch: &TrainBatch,
    plan: &MaskPlan,
    weights: &LossWeights,
    graph_mode: Mode,
    graph_seed: u64,
) -> Result<Objective> {
    weights.validate()?;
    if plan.k() != cfg.k() {
        return Err(Error::PlanMismatch(format!("plan covers {} patches, model uses {}", plan.k(), cfg.k())));
    }
    let b = batch.len();
    let mut g = Graph::new(graph_mode, graph_seed);
    match mode {
        TrainMode::CrossModal => {
            if b < 2 {
                return Err(Error::BatchTooSmall(b));
            }
            if batch.views.len() != b {
                return Err(Error::InvalidInput(format!("{} views for {b} anchors", batch.views.len())));
            }
            let ecg_in = g.constant(batch.patches(Modality::Ecg, true, cfg)?);
            let ppg_in = g.constant(batch.patches(Modality::Ppg, true, cfg)?);
            let ecg_target = g.constant(batch.patches(Modality::Ecg, false, cfg)?);
            let ppg_target = g.constant(batch.patches(Modality::Ppg, false, cfg)?);
            let CrossModalNodes { z_ecg, z_ppg, recon_ecg, recon_ppg, .. } =
                network::cross_modal(&mut g, cfg, ecg_in, ppg_in, plan, b, b);
            let (re, rp) = recon_cross_nodes(&mut g, recon_ecg, ecg_target, recon_ppg, ppg_target, plan, b)?;
            let k = cfg.k();
            let pooled_e = network::pool(&mut g, z_ecg, 2 * b, k);
            let pooled_p = network::pool(&mut g, z_ppg, 2 * b, k);
            let first: Vec<usize> = (0..b).collect();
            let second: Vec<usize> = (b..2 * b).collect();
            let views = [
                g.gather_rows(pooled_e, first.clone()),
                g.gather_rows(pooled_p, first),
                g.gather_rows(pooled_e, second.clone()),
                g.gather_rows(pooled_p, second),
            ];
            let contrast = contrastive_node(&mut g, views, b, weights.tau)?;
            let recon = g.add(re, rp);
            let weighted = g.scale(recon, weights.lambda);
            let total = g.add(contrast, weighted);
            Ok(Objective { graph: g, total, contrast: Some(contrast), recon_ecg: Some(re), recon_ppg: Some(rp) })
        }
        TrainMode::SingleModal(m) => {
            if b == 0 {
                return Err(Error::BatchTooSmall(0));
            }
            let x = g.constant(batch.patches(m, false, cfg)?);
            let nodes = network::single_modal(&mut g, cfg, m, x, plan, b);
            let loss = recon_single_node(&mut g, nodes.reconstruction, x, plan, b)?;
            let total = g.scale(loss, 1.0);
            let (recon_ecg, recon_ppg) = match m {
                Modality::Ecg => (Some(loss), None),
                Modality::Ppg => (None, Some(loss)),
            };
            Ok(Objective { graph: g, total, contrast: None, recon_ecg, recon_ppg })
        }
    }
}

/// Everything a step needs besides the parameters, data and plan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub mode: TrainMode,
    pub weights: LossWeights,
    pub learning_rate: f64,
    /// Seed of the dropout masks.
    pub graph_seed: u64,
    /// Index reported if the loss turns non-finite.
    pub step: usize,
}

fn non_finite(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } | Error::NonFiniteData { .. } => Error::NonFiniteLoss { step },
        other => other,
    }
}

/// Forward pass in train mode, backward pass, and one Adam update of every
/// parameter managed by `optim`.
pub fn train_step(
    params: &mut ModelParams,
    optim: &mut AdamState,
    batch: &TrainBatch,
    plan: &MaskPlan,
    settings: &StepSettings,
) -> Result<LossBreakdown> {
    let objective = build_objective(
        params.config(),
        settings.mode,
        batch,
        plan,
        &settings.weights,
        Mode::Train,
        settings.graph_seed,
    )?;
    let (breakdown, grads) = {
        let eval = objective.graph.forward(objective.total, params.bindings()).map_err(non_finite(settings.step))?;
        let breakdown = objective.breakdown(&eval);
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss { step: settings.step });
        }
        let names = optim.names();
        let grads = eval.backward(&names).map_err(non_finite(settings.step))?;
        if grads.values().any(|g| !g.all_finite()) {
            return Err(Error::NonFiniteLoss { step: settings.step });
        }
        (breakdown, grads)
    };
    optim.update(params, &grads, settings.learning_rate)?;
    Ok(breakdown)
}

/// Loss of `batch` in eval mode, without gradients.
pub fn evaluate_batch(
    params: &ModelParams,
    mode: TrainMode,
    batch: &TrainBatch,
    plan: &MaskPlan,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let objective = build_objective(params.config(), mode, batch, plan, weights, Mode::Eval, 0)?;
    let eval = objective.graph.forward(objective.total, params.bindings())?;
    Ok(objective.breakdown(&eval))
}

fn plan_for(mode: TrainMode, k: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    match mode {
        TrainMode::CrossModal => sample_mask_plan(k, ratio, seed),
        TrainMode::SingleModal(_) => sample_single_modal_plan(k, SINGLE_MODAL_RATIO, seed),
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val_total: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_total,train_contrast,train_recon_ecg,train_recon_ppg,val_total";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let t = &self.train;
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.lr, t.total, t.contrast, t.recon_ecg, t.recon_ppg, self.val_total
        )
    }

    fn to_row(self) -> [f64; 7] {
        let t = self.train;
        [self.epoch as f64, self.lr, t.total, t.contrast, t.recon_ecg, t.recon_ppg, self.val_total]
    }

    fn from_row(r: &[f64]) -> Self {
        Self {
            epoch: r[0] as usize,
            lr: r[1],
            train: LossBreakdown { total: r[2], contrast: r[3], recon_ecg: r[4], recon_ppg: r[5] },
            val_total: r[6],
        }
    }
}

/// The metrics log as CSV text, header included.
pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

fn check_mode(params: &ModelParams, mode: TrainMode) -> Result<()> {
    let ok = match mode {
        TrainMode::CrossModal => params.is_cross_modal(),
        TrainMode::SingleModal(m) => params.modalities() == [m],
    };
    if !ok {
        return Err(Error::ModalityMismatch(format!("parameters do not fit a {mode} run")));
    }
    Ok(())
}

fn scalar(v: f64) -> Array {
    Array::scalar(v).expect("finite training state")
}

/// Resumable training state over a split dataset.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    train_indices: Vec<usize>,
    valid_indices: Vec<usize>,
    params: ModelParams,
    optim: AdamState,
    scheduler: SchedulerState,
    config: TrainConfig,
    weights: LossWeights,
    augment: AugmentConfig,
    epoch: usize,
    global_step: usize,
    val_history: Vec<f64>,
    best: Option<(f64, ModelParams)>,
    log: Vec<EpochRecord>,
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct PretrainOutput {
    /// Parameters of the epoch with the lowest validation loss.
    pub best: ModelParams,
    /// Parameters after the last epoch.
    pub last: ModelParams,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl<'a> Trainer<'a> {
    /// Starts a run from `params` with fresh optimizer and scheduler state.
    pub fn new(
        dataset: &'a Dataset,
        params: ModelParams,
        config: TrainConfig,
        weights: LossWeights,
        augment: AugmentConfig,
    ) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        augment.validate()?;
        params.config().validate()?;
        check_mode(&params, config.mode)?;
        if dataset.split.is_none() {
            return Err(Error::InvalidInput("dataset has no subject split".into()));
        }
        if dataset.segment_len != params.config().segment_len {
            return Err(Error::PlanMismatch(format!(
                "dataset segments have length {}, model expects {}",
                dataset.segment_len,
                params.config().segment_len
            )));
        }
        let train_indices = dataset.indices_in(Split::Train);
        let valid_indices = dataset.indices_in(Split::Valid);
        if valid_indices.is_empty() {
            return Err(Error::TooFewSubjects { subjects: dataset.subjects().len(), split: "valid" });
        }
        let optim = AdamState::for_all(&params);
        let scheduler = SchedulerState::new(config.learning_rate, config.scheduler_factor, config.scheduler_patience);
        Ok(Self {
            dataset,
            train_indices,
            valid_indices,
            params,
            optim,
            scheduler,
            config,
            weights,
            augment,
            epoch: 0,
            global_step: 0,
            val_history: Vec::new(),
            best: None,
            log: Vec::new(),
        })
    }

    /// Restores a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        dataset: &'a Dataset,
        checkpoint: &Checkpoint,
        config: TrainConfig,
        weights: LossWeights,
        augment: AugmentConfig,
    ) -> Result<Self> {
        let mut t = Self::new(dataset, checkpoint.params.clone(), config, weights, augment)?;
        let state = &checkpoint.state;
        let get = |name: &str| {
            state.get(name).and_then(Array::scalar_value).ok_or_else(|| Error::MissingParameter(name.to_string()))
        };
        t.optim = AdamState::import(state)?;
        if t.optim.names() != t.params.names().collect::<Vec<_>>() {
            return Err(Error::Malformed("optimizer state does not cover the model parameters".into()));
        }
        t.scheduler = SchedulerState::import(state, config.scheduler_factor, config.scheduler_patience)?;
        t.epoch = get("state.epoch")? as usize;
        t.global_step = get("state.global_step")? as usize;
        t.val_history = state.get("state.val_history").map(|a| a.data().to_vec()).unwrap_or_default();
        t.log = match state.get("state.log") {
            Some(a) if a.is_matrix() && a.cols() == 7 => {
                (0..a.rows()).map(|r| EpochRecord::from_row(a.row(r))).collect()
            }
            Some(_) => return Err(Error::Malformed("state.log must have seven columns".into())),
            None => Vec::new(),
        };
        if let Ok(best_val) = get("state.best_val") {
            let mut best = Bindings::new();
            for name in t.params.names() {
                let key = format!("state.best.{name}");
                let a = state.get(&key).ok_or_else(|| Error::MissingParameter(key.clone()))?;
                best.insert(name, a.clone());
            }
            t.best = Some((best_val, ModelParams::from_bindings(*t.params.config(), best)?));
        }
        Ok(t)
    }

    fn subject_count(&self, indices: &[usize]) -> usize {
        indices.iter().map(|&i| self.dataset.pairs[i].subject_id()).collect::<BTreeSet<_>>().len()
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> usize {
        self.global_step
    }

    pub fn learning_rate(&self) -> f64 {
        self.scheduler.lr
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.log
    }

    pub fn best(&self) -> Option<&ModelParams> {
        self.best.as_ref().map(|(_, p)| p)
    }

    /// True once the epoch budget is spent or validation has stalled.
    pub fn should_stop(&self) -> bool {
        self.epoch >= self.config.max_epochs || self.stalled()
    }

    fn stalled(&self) -> bool {
        early_stop_check(&self.val_history, self.config.early_stop_patience)
    }

    /// Validation loss in eval mode with a fixed plan (ratio 0.5) and fixed
    /// views, so epochs are comparable.
    pub fn validate(&self) -> Result<LossBreakdown> {
        let seed = mix_seed(self.config.seed, &[tag::VALIDATION]);
        let batches = epoch_batches(self.dataset, &self.valid_indices, self.config.batch_size, seed);
        if batches.is_empty() {
            return Err(Error::TooFewSubjects { subjects: self.subject_count(&self.valid_indices), split: "valid" });
        }
        let plan = plan_for(self.config.mode, self.params.config().k(), 0.5, seed)?;
        let with_views = self.config.mode == TrainMode::CrossModal;
        let mut sum = LossBreakdown::default();
        let mut count = 0;
        for (i, idx) in batches.iter().enumerate() {
            let batch =
                TrainBatch::assemble(self.dataset, idx, &self.augment, mix_seed(seed, &[i as u64]), with_views)?;
            let l = evaluate_batch(&self.params, self.config.mode, &batch, &plan, &self.weights)?;
            sum = sum.plus(l.scaled(batch.len() as f64));
            count += batch.len();
        }
        Ok(sum.scaled(1.0 / count as f64))
    }

    /// One pass over the training split followed by validation, scheduling
    /// and best-model tracking.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let seed = self.config.seed;
        let lr = self.scheduler.lr;
        let batches = epoch_batches(
            self.dataset,
            &self.train_indices,
            self.config.batch_size,
            mix_seed(seed, &[tag::BATCH_ORDER, self.epoch as u64]),
        );
        if batches.is_empty() {
            return Err(Error::TooFewSubjects { subjects: self.subject_count(&self.train_indices), split: "train" });
        }
        let with_views = self.config.mode == TrainMode::CrossModal;
        let k = self.params.config().k();
        let mut sum = LossBreakdown::default();
        let mut count = 0;
        for idx in &batches {
            let step = self.global_step as u64;
            let ratio = draw_mask_ratio(self.config.mask_ratio_range, seed, step)?;
            let plan = plan_for(self.config.mode, k, ratio, mix_seed(seed, &[tag::MASK_PLAN, step]))?;
            let batch = TrainBatch::assemble(
                self.dataset,
                idx,
                &self.augment,
                mix_seed(seed, &[tag::VIEWS, step]),
                with_views,
            )?;
            let settings = StepSettings {
                mode: self.config.mode,
                weights: self.weights,
                learning_rate: lr,
                graph_seed: mix_seed(seed, &[tag::DROPOUT, step]),
                step: self.global_step,
            };
            let l = train_step(&mut self.params, &mut self.optim, &batch, &plan, &settings)?;
            sum = sum.plus(l.scaled(batch.len() as f64));
            count += batch.len();
            self.global_step += 1;
        }
        let train = sum.scaled(1.0 / count as f64);
        let val_total = self.validate()?.total;
        if !val_total.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.global_step });
        }
        self.scheduler.step(val_total);
        self.val_history.push(val_total);
        if self.best.as_ref().is_none_or(|(b, _)| val_total < *b) {
            self.best = Some((val_total, self.params.clone()));
        }
        self.epoch += 1;
        let record = EpochRecord { epoch: self.epoch, lr, train, val_total };
        self.log.push(record);
        Ok(record)
    }

    /// Current parameters plus everything needed to resume.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = Bindings::new();
        self.optim.export(&mut state);
        self.scheduler.export(&mut state);
        state.insert("state.epoch", scalar(self.epoch as f64));
        state.insert("state.global_step", scalar(self.global_step as f64));
        if !self.val_history.is_empty() {
            state.insert("state.val_history", Array::row_vector(self.val_history.clone()).expect("finite losses"));
        }
        if !self.log.is_empty() {
            let data = self.log.iter().flat_map(|r| r.to_row()).collect();
            state.insert("state.log", Array::matrix(self.log.len(), 7, data).expect("finite losses"));
        }
        if let Some((v, p)) = &self.best {
            state.insert("state.best_val", scalar(*v));
            for (name, a) in p.iter() {
                state.insert(format!("state.best.{name}"), a.clone());
            }
        }
        Checkpoint { params: self.params.clone(), state }
    }

    /// Runs epochs until [`Trainer::should_stop`]. With `out_dir`, writes
    /// `metrics.csv`, `best.m2ck` and `last.m2ck` after every epoch.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<PretrainOutput> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        while !self.should_stop() {
            self.run_epoch()?;
            if let Some(dir) = out_dir {
                self.write_outputs(dir)?;
            }
        }
        let best = self.best.as_ref().map_or_else(|| self.params.clone(), |(_, p)| p.clone());
        Ok(PretrainOutput { best, last: self.params.clone(), log: self.log.clone(), stopped_early: self.stalled() })
    }

    fn write_outputs(&self, dir: &Path) -> Result<()> {
        let mut f = fs::File::create(dir.join(METRICS_FILE))?;
        f.write_all(metrics_csv(&self.log).as_bytes())?;
        if let Some((_, p)) = &self.best {
            save_checkpoint(&Checkpoint::new(p.clone()), dir.join(BEST_CHECKPOINT))?;
        }
        save_checkpoint(&self.checkpoint(), dir.join(LAST_CHECKPOINT))
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.m2ck";
pub const LAST_CHECKPOINT: &str = "last.m2ck";

/// Paths of the files [`Trainer::run`] writes into `dir`.
pub fn output_paths(dir: &Path) -> [PathBuf; 3] {
    [dir.join(METRICS_FILE), dir.join(BEST_CHECKPOINT), dir.join(LAST_CHECKPOINT)]
}

/// Initializes parameters for `train.mode` and trains to completion.
pub fn pretrain(
    dataset: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    weights: &LossWeights,
    augment: &AugmentConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainOutput> {
    model.validate()?;
    let params = match train.mode {
        TrainMode::CrossModal => ModelParams::init_cross_modal(*model, train.seed)?,
        TrainMode::SingleModal(m) => ModelParams::init_single_modal(*model, m, train.seed)?,
    };
    Trainer::new(dataset, params, *train, *weights, *augment)?.run(out_dir)
}

/// Copies every encoder and decoder block of the single-modal models into a
/// cross-modal parameter set, by name. The single-modal mask tokens have no
/// cross-modal counterpart and are left out.
pub fn warm_start_init(cross: &ModelParams, ecg: &ModelParams, ppg: &ModelParams) -> Result<ModelParams> {
    check_mode(cross, TrainMode::CrossModal)?;
    let mut out = cross.clone();
    let names: Vec<String> = cross.names().map(str::to_string).collect();
    for name in names {
        let source = if name.starts_with("ecg.") { ecg } else { ppg };
        let value = source.get(&name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
        out.set(&name, value.clone())?;
    }
    Ok(out)
}

/// Per-element squared error on the scored patches (ECG on M, PPG on U) of
/// a cross-modal model, in eval mode, averaged over `indices`. Returns
/// `(ecg, ppg)`.
pub fn reconstruction_mse(
    params: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
    plan: &MaskPlan,
) -> Result<(f64, f64)> {
    check_mode(params, TrainMode::CrossModal)?;
    let cfg = *params.config();
    if indices.is_empty() {
        return Err(Error::InvalidInput("no segments to reconstruct".into()));
    }
    let (mut e_sum, mut p_sum) = (0.0, 0.0);
    for chunk in indices.chunks(16) {
        let batch = TrainBatch::assemble(dataset, chunk, &AugmentConfig::default(), 0, false)?;
        let b = batch.len();
        let mut g = Graph::new(Mode::Eval, 0);
        let ecg = g.constant(batch.patches(Modality::Ecg, false, &cfg)?);
        let ppg = g.constant(batch.patches(Modality::Ppg, false, &cfg)?);
        let nodes = network::cross_modal(&mut g, &cfg, ecg, ppg, plan, b, 0);
        let (re, rp) = recon_cross_nodes(&mut g, nodes.recon_ecg, ecg, nodes.recon_ppg, ppg, plan, b)?;
        let both = g.concat_rows(&[re, rp]);
        let v = g.evaluate(both, params.bindings())?;
        e_sum += v.data()[0] * b as f64;
        p_sum += v.data()[1] * b as f64;
    }
    let n = indices.len() as f64 * cfg.patch_size as f64;
    Ok((e_sum / n, p_sum / n))
}
