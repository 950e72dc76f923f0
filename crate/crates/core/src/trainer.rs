//! The dual-branch training loop, SGD with momentum, and evaluation.
//!
//! Per step: one instance-balanced batch and (with the contrastive branch on)
//! one tail episode are pushed through the shared backbone together. The
//! imbalanced loss uses the batch rows; the metric loss uses support
//! prototypes in embedding space; both contrastive losses use projected
//! support prototypes, and the inter-branch one contrasts against the
//! projected Many-split members of the same batch. The branch weight α is
//! fixed within an epoch.

use serde::{Deserialize, Serialize};

use crate::data::{LongTailDataset, ShotSplits, Split};
use crate::diffcore::{Tape, Tensor, Var};
use crate::losses::{
    alpha_schedule, colb_loss, drw_class_weights, inter_cl, intra_cl, ldam_margins, metric_loss, prototypes,
    total_loss, LossBreakdown,
};
use crate::model::{init_params, BoundModel, ModelConfig, ModelParams};
use crate::registry::{imbalanced_losses, lr_schedules, ImbalancedContext, ImbalancedLoss, LrParams};
use crate::sampling::{head_instances, uniform_batches, Episode, TailPool, TailSampler};
use crate::{Error, Result};

/// Every hyper-parameter of a run. Serialized with flat keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: String,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_biases: bool,
    /// Registered imbalanced-branch objective, `ldam` or `ce`.
    pub imbalanced_loss: String,
    /// LDAM margin scale H.
    pub margin_scale: f64,
    /// Contrastive branch on/off. Off means α ≡ 1 and no episodes.
    pub colb: bool,
    pub use_metric: bool,
    pub use_intra: bool,
    pub use_inter: bool,
    pub temperature: f64,
    /// Weight λ of the inter-branch loss.
    pub inter_weight: f64,
    pub n_way: usize,
    pub n_support: usize,
    pub n_query: usize,
    pub tail_pool: TailPool,
    pub drw: bool,
    /// First epoch with class-balanced weights; `None` means ⌈0.8·epochs⌉.
    pub drw_epoch: Option<usize>,
    pub drw_beta: f64,
    /// Replaces the parabolic schedule with a constant α.
    pub alpha_override: Option<f64>,
    pub include_positive_intra: bool,
    pub include_positive_inter: bool,
    pub backbone_widths: Vec<usize>,
    /// `None` means half the embedding width (at least 1).
    pub projection_dim: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr_schedule: "step".into(),
            base_lr: 0.1,
            warmup_epochs: 5,
            milestones: vec![160, 180],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_biases: true,
            imbalanced_loss: "ldam".into(),
            margin_scale: 0.5,
            colb: true,
            use_metric: true,
            use_intra: true,
            use_inter: true,
            temperature: 0.6,
            inter_weight: 0.3,
            n_way: 5,
            n_support: 4,
            n_query: 1,
            tail_pool: TailPool::MediumFew,
            drw: false,
            drw_epoch: None,
            drw_beta: 0.9999,
            alpha_override: None,
            include_positive_intra: false,
            include_positive_inter: false,
            backbone_widths: vec![64, 32],
            projection_dim: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the warmup and LR milestones rescaled from a 200-epoch
    /// budget (5 warmup epochs, decays at 80% and 90%) to `epochs`.
    pub fn with_epochs(epochs: usize) -> Self {
        let mut c = Self::default();
        c.rescale_epochs(epochs);
        c
    }

    /// Sets `epochs` and rescales `warmup_epochs` and `milestones` to match.
    pub fn rescale_epochs(&mut self, epochs: usize) {
        let at = |frac: f64| (frac * epochs as f64).ceil() as usize;
        self.epochs = epochs;
        self.warmup_epochs = at(5.0 / 200.0).min(epochs);
        self.milestones = vec![at(0.8), at(0.9)];
        self.milestones.retain(|&m| m > 0 && m < epochs);
        self.milestones.dedup();
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("lr_decay", self.lr_decay),
            ("temperature", self.temperature),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("margin_scale", self.margin_scale),
            ("inter_weight", self.inter_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.warmup_epochs > self.epochs {
            return fail(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.milestones.windows(2).any(|w| w[1] <= w[0]) {
            return fail(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        if self.milestones.iter().any(|&m| m >= self.epochs) {
            return fail(format!(
                "milestones {:?} must be < epochs {}",
                self.milestones, self.epochs
            ));
        }
        if !lr_schedules().contains(&self.lr_schedule) {
            return fail(format!(
                "unknown lr_schedule `{}` (available: {})",
                self.lr_schedule,
                lr_schedules().names().join(", ")
            ));
        }
        if !imbalanced_losses().contains(&self.imbalanced_loss) {
            return fail(format!(
                "unknown imbalanced_loss `{}` (available: {})",
                self.imbalanced_loss,
                imbalanced_losses().names().join(", ")
            ));
        }
        if !(0.0..1.0).contains(&self.drw_beta) {
            return fail(format!("drw_beta must be in [0, 1), got {}", self.drw_beta));
        }
        if let Some(a) = self.alpha_override {
            if !(0.0..=1.0).contains(&a) {
                return fail(format!("alpha_override must be in [0, 1], got {a}"));
            }
        }
        if self.colb {
            if self.n_way == 0 || self.n_support == 0 || self.n_query == 0 {
                return fail("n_way, n_support and n_query must be >= 1".into());
            }
            if self.use_intra && self.n_way < 2 {
                return fail("intra-branch loss needs n_way >= 2".into());
            }
        }
        if self.backbone_widths.contains(&0) || self.projection_dim == Some(0) {
            return fail("layer widths must be >= 1".into());
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize, classes: usize) -> ModelConfig {
        let e = self.backbone_widths.last().copied().unwrap_or(input_dim);
        ModelConfig {
            input_dim,
            backbone_widths: self.backbone_widths.clone(),
            classes,
            projection_dim: self.projection_dim.unwrap_or((e / 2).max(1)),
        }
    }

    pub fn lr_params(&self) -> LrParams {
        LrParams {
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            milestones: self.milestones.clone(),
            decay: self.lr_decay,
            epochs: self.epochs,
        }
    }

    pub fn drw_start(&self) -> usize {
        self.drw_epoch
            .unwrap_or_else(|| (0.8 * self.epochs as f64).ceil() as usize)
    }

    /// Branch weight for a 1-based epoch.
    pub fn alpha_at(&self, epoch: usize) -> Result<f64> {
        match (self.alpha_override, self.colb) {
            (Some(a), _) => Ok(a),
            (None, false) => Ok(1.0),
            (None, true) => alpha_schedule(epoch, self.epochs),
        }
    }
}

/// Learning rate at a 1-based epoch under the configured schedule.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch == 0 || epoch > config.epochs {
        return Err(Error::Invalid(format!("epoch {epoch} outside 1..={}", config.epochs)));
    }
    Ok(lr_schedules().get(&config.lr_schedule)?.lr(epoch, &config.lr_params()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// `v ← μ·v + g + wd·p`, `p ← p − lr·v`. Tensors with `decay[i] == false`
/// skip the weight-decay term. Nothing is written if any result is non-finite.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    hp: SgdParams,
    decay: &[bool],
    state: &mut SgdState,
) -> Result<()> {
    if grads.len() != params.len() || decay.len() != params.len() {
        return Err(Error::Invalid(format!(
            "{} parameters, {} gradients, {} decay flags",
            params.len(),
            grads.len(),
            decay.len()
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    let mut next_v = Vec::with_capacity(params.len());
    let mut next_p = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Invalid(format!(
                "gradient {i} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Invalid(format!("gradient {i} is not finite")));
        }
        let wd = if decay[i] { hp.weight_decay } else { 0.0 };
        let v: Vec<f64> = state.velocity[i]
            .iter()
            .zip(g.data())
            .zip(p.data())
            .map(|((v, g), p)| hp.momentum * v + g + wd * p)
            .collect();
        let np: Vec<f64> = p.data().iter().zip(&v).map(|(p, v)| p - hp.lr * v).collect();
        if np.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::Invalid(format!("update of parameter {i} is not finite")));
        }
        next_v.push(v);
        next_p.push(np);
    }
    for ((p, np), (v, nv)) in params.iter_mut().zip(next_p).zip(state.velocity.iter_mut().zip(next_v)) {
        p.data_mut().copy_from_slice(&np);
        *v = nv;
    }
    Ok(())
}

/// Loss terms of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub head_count: usize,
    pub episode_resampled: bool,
    pub breakdown: LossBreakdown,
}

/// Per-epoch means of the step records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean: LossBreakdown,
}

fn summarize(epoch: usize, lr: f64, records: &[StepRecord]) -> EpochSummary {
    let n = records.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| records.iter().map(|r| f(&r.breakdown)).sum::<f64>() / n;
    EpochSummary {
        epoch,
        lr,
        steps: records.len(),
        mean: LossBreakdown {
            l_imb: avg(|b| b.l_imb),
            l_m: avg(|b| b.l_m),
            l_intra: avg(|b| b.l_intra),
            l_inter: avg(|b| b.l_inter),
            l_con: avg(|b| b.l_con),
            alpha: records.first().map_or(1.0, |r| r.breakdown.alpha),
            total: avg(|b| b.total),
            inter_skipped: records.iter().any(|r| r.breakdown.inter_skipped),
        },
    }
}

/// Top-1 accuracy overall, per shot split, and per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub correct: usize,
    pub total: usize,
    /// (correct, total) per split, in Many/Medium/Few order.
    pub split_counts: [(usize, usize); 3],
}

impl EvalReport {
    pub fn split(&self, split: Split) -> Option<f64> {
        match split {
            Split::Many => self.many,
            Split::Medium => self.medium,
            Split::Few => self.few,
        }
    }
}

/// Index of the largest value; the first one wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluates with the dataset's own shot splits.
pub fn evaluate(params: &ModelParams, dataset: &LongTailDataset) -> Result<EvalReport> {
    evaluate_with_splits(params, dataset, dataset.splits())
}

/// Evaluates with externally supplied splits, e.g. a balanced test set scored
/// by the training set's Many/Medium/Few partition.
pub fn evaluate_with_splits(
    params: &ModelParams,
    dataset: &LongTailDataset,
    splits: &ShotSplits,
) -> Result<EvalReport> {
    let classes = params.config.classes;
    if dataset.num_classes() != classes || splits.num_classes() != classes {
        return Err(Error::Invalid(format!(
            "model has {classes} classes, dataset {} and splits {}",
            dataset.num_classes(),
            splits.num_classes()
        )));
    }
    let logits = params.logits(dataset.features(), dataset.len())?;
    let lookup = splits.lookup();
    let mut class_hits = vec![(0usize, 0usize); classes];
    for i in 0..dataset.len() {
        let y = dataset.label(i);
        class_hits[y].1 += 1;
        if argmax(logits.row(i)) == y {
            class_hits[y].0 += 1;
        }
    }
    let mut split_counts = [(0usize, 0usize); 3];
    for (c, &(hit, n)) in class_hits.iter().enumerate() {
        let slot = match lookup[c] {
            Split::Many => 0,
            Split::Medium => 1,
            Split::Few => 2,
        };
        split_counts[slot].0 += hit;
        split_counts[slot].1 += n;
    }
    let ratio = |(hit, n): (usize, usize)| (n > 0).then(|| hit as f64 / n as f64);
    let correct = class_hits.iter().map(|h| h.0).sum();
    Ok(EvalReport {
        overall: correct as f64 / dataset.len().max(1) as f64,
        many: ratio(split_counts[0]),
        medium: ratio(split_counts[1]),
        few: ratio(split_counts[2]),
        per_class: class_hits.into_iter().map(ratio).collect(),
        correct,
        total: dataset.len(),
        split_counts,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub report: EvalReport,
}

/// A run stopped by a non-finite loss or update, with what had been recorded.
#[derive(Debug, Clone)]
pub struct Aborted {
    pub epoch: usize,
    pub step: usize,
    pub breakdown: Option<LossBreakdown>,
    pub reason: String,
    pub history: Vec<StepRecord>,
}

impl std::fmt::Display for Aborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "training aborted at epoch {} step {}: {}",
            self.epoch, self.step, self.reason
        )?;
        if let Some(b) = &self.breakdown {
            write!(f, " ({b:?})")?;
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent RNG streams from one seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG stream ids passed to [`derive_seed`] with the run seed.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_BATCHES: u64 = 2;
pub const STREAM_EPISODES: u64 = 3;

/// Trains on `dataset` and reports accuracy on the same data.
pub fn train(dataset: &LongTailDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_and_evaluate(dataset, None, config)
}

/// Trains on `train_set`; the final report is on `eval_set` (scored with the
/// training split partition) when given, otherwise on `train_set`.
pub fn train_and_evaluate(
    train_set: &LongTailDataset,
    eval_set: Option<&LongTailDataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model_config = config.model_config(train_set.dim(), train_set.num_classes());
    let mut params = init_params(&model_config, derive_seed(config.seed, STREAM_INIT))?;
    let objective = imbalanced_losses().get(&config.imbalanced_loss)?;
    let schedule = lr_schedules().get(&config.lr_schedule)?;
    let lr_params = config.lr_params();
    let counts = train_set.profile().counts();
    let margins = ldam_margins(counts, config.margin_scale);
    let drw_weights = drw_class_weights(counts, config.drw_beta)?;

    let mut batches = uniform_batches(train_set, config.batch_size, derive_seed(config.seed, STREAM_BATCHES))?;
    let mut tail = if config.colb {
        let pool = config.tail_pool.classes(train_set.splits());
        if pool.len() < config.n_way {
            return Err(Error::Config(format!(
                "tail pool {:?} has {} classes, episodes need {}",
                config.tail_pool,
                pool.len(),
                config.n_way
            )));
        }
        Some(TailSampler::new(
            train_set,
            &pool,
            derive_seed(config.seed, STREAM_EPISODES),
        )?)
    } else {
        None
    };

    let decay_mask: Vec<bool> = params
        .bias_mask()
        .into_iter()
        .map(|is_bias| config.decay_biases || !is_bias)
        .collect();
    let mut sgd = SgdState::default();
    let mut history = Vec::new();
    let mut summaries = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let lr = schedule.lr(epoch, &lr_params);
        let alpha = config.alpha_at(epoch)?;
        let ctx = ImbalancedContext {
            margins: margins.clone(),
            class_weights: (config.drw && epoch >= config.drw_start()).then(|| drw_weights.clone()),
        };
        let epoch_start = history.len();
        for batch in batches.epoch() {
            let episode = match tail.as_mut() {
                Some(t) => Some(t.sample(config.n_way, config.n_support, config.n_query)?),
                None => None,
            };
            let outcome = train_step(
                &mut params,
                &mut sgd,
                &decay_mask,
                lr,
                StepInputs {
                    dataset: train_set,
                    batch: &batch,
                    episode: episode.as_ref(),
                    objective: objective.as_ref(),
                    ctx: &ctx,
                    alpha,
                    config,
                },
            );
            let (breakdown, head_count) = match outcome {
                Ok(v) => v,
                Err(StepFailure { breakdown, reason }) => {
                    return Err(Error::Aborted(Box::new(Aborted {
                        epoch,
                        step,
                        breakdown,
                        reason,
                        history,
                    })))
                }
            };
            history.push(StepRecord {
                epoch,
                step,
                lr,
                head_count,
                episode_resampled: episode.as_ref().is_some_and(|e| e.with_replacement),
                breakdown,
            });
            step += 1;
        }
        summaries.push(summarize(epoch, lr, &history[epoch_start..]));
    }

    let report = match eval_set {
        Some(eval) => evaluate_with_splits(&params, eval, train_set.splits())?,
        None => evaluate(&params, train_set)?,
    };
    Ok(TrainOutcome {
        params,
        history,
        epochs: summaries,
        report,
    })
}

/// Everything one step's loss depends on apart from the parameters.
pub struct StepInputs<'a> {
    pub dataset: &'a LongTailDataset,
    pub batch: &'a [usize],
    pub episode: Option<&'a Episode>,
    pub objective: &'a dyn ImbalancedLoss,
    pub ctx: &'a ImbalancedContext,
    pub alpha: f64,
    pub config: &'a TrainConfig,
}

/// Graph handles for every loss term of one step.
pub struct StepLosses<'t> {
    pub l_imb: Var<'t>,
    pub l_m: Var<'t>,
    pub l_intra: Var<'t>,
    pub l_inter: Var<'t>,
    pub l_con: Var<'t>,
    pub total: Var<'t>,
    pub head_count: usize,
    pub breakdown: LossBreakdown,
}

/// Forward pass of both branches for one batch and (optionally) one episode.
///
/// Rows go through the backbone together: batch first, then support, then
/// query. Head instances are the Many-split members of the batch, so their
/// embeddings are taken from the batch rows. Without an episode the result is
/// the imbalanced loss alone.
pub fn step_losses<'t>(model: &BoundModel<'t>, tape: &'t Tape, inp: &StepInputs<'_>) -> Result<StepLosses<'t>> {
    let cfg = inp.config;
    let ds = inp.dataset;
    let b = inp.batch.len();

    let mut rows: Vec<usize> = inp.batch.to_vec();
    let (support_pos, query_pos) = match inp.episode {
        Some(ep) => {
            let s = ep.support_indices();
            let q = ep.query_indices();
            let sp: Vec<usize> = (rows.len()..rows.len() + s.len()).collect();
            rows.extend(&s);
            let qp: Vec<usize> = (rows.len()..rows.len() + q.len()).collect();
            rows.extend(&q);
            (sp, qp)
        }
        None => (Vec::new(), Vec::new()),
    };

    let x = tape.constant(Tensor::new(&[rows.len(), ds.dim()], ds.gather_features(&rows))?);
    let h = model.backbone_forward(x)?;
    let batch_pos: Vec<usize> = (0..b).collect();
    let logits = model.classifier_forward(h.select_rows(&batch_pos)?)?;
    let labels: Vec<usize> = inp.batch.iter().map(|&i| ds.label(i)).collect();
    let l_imb = inp.objective.loss(logits, &labels, inp.ctx)?;

    let zero = tape.scalar(0.0);
    let mut head_count = 0;
    let mut inter_skipped = false;
    let (l_m, l_intra, l_inter, l_con, total, alpha) = match inp.episode {
        None => (zero, zero, zero, zero, l_imb, 1.0),
        Some(ep) => {
            let n = ep.n_way();
            let s_labels = ep.support_labels();
            let q_labels = ep.query_labels();
            let hs = h.select_rows(&support_pos)?;
            let hq = h.select_rows(&query_pos)?;
            let l_m = if cfg.use_metric {
                metric_loss(hq, prototypes(hs, &s_labels, n)?, &q_labels)?
            } else {
                zero
            };
            let (mut l_intra, mut l_inter) = (zero, zero);
            if cfg.use_intra || cfg.use_inter {
                let zs = model.projection_forward(hs)?;
                let zq = model.projection_forward(hq)?;
                let proto_proj = prototypes(zs, &s_labels, n)?;
                if cfg.use_intra {
                    l_intra = intra_cl(zq, &q_labels, proto_proj, cfg.temperature, cfg.include_positive_intra)?;
                }
                if cfg.use_inter {
                    let heads = head_instances(inp.batch, ds);
                    head_count = heads.len();
                    let head_pos: Vec<usize> = inp
                        .batch
                        .iter()
                        .enumerate()
                        .filter(|(_, i)| heads.contains(i))
                        .map(|(p, _)| p)
                        .collect();
                    let zh = if head_pos.is_empty() {
                        None
                    } else {
                        Some(model.projection_forward(h.select_rows(&head_pos)?)?)
                    };
                    let out = inter_cl(
                        zq,
                        &q_labels,
                        proto_proj,
                        zh,
                        cfg.temperature,
                        cfg.include_positive_inter,
                    )?;
                    l_inter = out.loss;
                    inter_skipped = out.skipped;
                }
            }
            let l_con = colb_loss(l_m, l_intra, l_inter, cfg.inter_weight)?;
            let total = total_loss(l_imb, l_con, inp.alpha)?;
            (l_m, l_intra, l_inter, l_con, total, inp.alpha)
        }
    };

    let breakdown = LossBreakdown {
        l_imb: l_imb.item()?,
        l_m: l_m.item()?,
        l_intra: l_intra.item()?,
        l_inter: l_inter.item()?,
        l_con: l_con.item()?,
        alpha,
        total: total.item()?,
        inter_skipped,
    };
    Ok(StepLosses {
        l_imb,
        l_m,
        l_intra,
        l_inter,
        l_con,
        total,
        head_count,
        breakdown,
    })
}

struct StepFailure {
    breakdown: Option<LossBreakdown>,
    reason: String,
}

impl From<Error> for StepFailure {
    fn from(e: Error) -> Self {
        Self {
            breakdown: None,
            reason: e.to_string(),
        }
    }
}

impl From<crate::diffcore::DiffError> for StepFailure {
    fn from(e: crate::diffcore::DiffError) -> Self {
        Error::from(e).into()
    }
}

/// Forward, backward, one SGD update.
fn train_step(
    params: &mut ModelParams,
    sgd: &mut SgdState,
    decay_mask: &[bool],
    lr: f64,
    inp: StepInputs<'_>,
) -> std::result::Result<(LossBreakdown, usize), StepFailure> {
    let tape = Tape::new();
    let model = params.bind(&tape);
    let losses = step_losses(&model, &tape, &inp)?;
    let breakdown = losses.breakdown;
    if !breakdown.is_finite() {
        return Err(StepFailure {
            breakdown: Some(breakdown),
            reason: "non-finite loss".into(),
        });
    }
    let grads = tape.backward(losses.total)?;
    let grad_tensors: Vec<Tensor> = model
        .leaves()
        .iter()
        .map(|&leaf| grads.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(&leaf.shape())))
        .collect();
    drop(model);
    let hp = SgdParams {
        lr,
        momentum: inp.config.momentum,
        weight_decay: inp.config.weight_decay,
    };
    sgd_step(&mut params.tensors_mut(), &grad_tensors, hp, decay_mask, sgd).map_err(|e| StepFailure {
        breakdown: Some(breakdown),
        reason: e.to_string(),
    })?;
    Ok((breakdown, losses.head_count))
}
