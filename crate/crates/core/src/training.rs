//! Masking, smoothed targets, losses, AdamW and the pretraining and
//! fine-tuning loops.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embedding::{FieldLayout, SlotInput, SlotTarget, SlotValue};
use crate::error::{Error, Result};
use crate::ingest::{balance_upsample, random_span, WindowedSample};
use crate::metrics::EvalReport;
use crate::model::{EncodedRow, FieldRef, Model, NumericHead, SlotLogits, TaskKind};
use crate::rng::{derive_seed, seeded, Rng};
use crate::schema::{Label, Schema};
use crate::tensor::{Decay, Gradients, ParamId, ParamStore, Precision, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Cross-entropy on smoothed targets for every field.
    #[default]
    UnifiedCe,
    /// Weighted squared error on numerical fields plus cross-entropy on the rest.
    RegressionL2,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskVariant {
    /// Every selected field shows `[MASK]`.
    #[default]
    Replace,
    /// Selected fields show `[MASK]` 80% of the time, a random value 10%,
    /// and their own value 10%.
    Bert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Per-field masking probability.
    pub p_f: f64,
    /// Per-row masking probability.
    pub p_r: f64,
    /// Mask the timestamp sub-fields of a row together.
    pub timestamp_joint: bool,
    pub mask_variant: MaskVariant,
    /// Label smoothing mass moved off the true class.
    pub epsilon: f64,
    /// Half-width of the bin neighbourhood receiving smoothing mass.
    pub neighborhood_radius: usize,
    pub loss_mode: LossMode,
    pub regression_weight: f64,
    pub lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<u64>,
    pub seed: u64,
    /// Calls the observer's checkpoint hook every this many steps.
    pub checkpoint_every: Option<u64>,
    /// Fine-tuning updates only the task head.
    pub freeze_backbone: bool,
    /// Positives per negative after upsampling binary fine-tuning data;
    /// `None` disables balancing.
    pub balance_ratio: Option<f64>,
    pub precision: Precision,
}

/// The desk preset, like [`ModelConfig`]'s default, so a partial
/// configuration never mixes the two scales.
impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            p_f: 0.15,
            p_r: 0.1,
            timestamp_joint: true,
            mask_variant: MaskVariant::Replace,
            epsilon: 0.1,
            neighborhood_radius: 5,
            loss_mode: LossMode::UnifiedCe,
            regression_weight: 50.0,
            lr: 5e-5,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 120,
            epochs: 10,
            max_steps: None,
            seed: 0,
            checkpoint_every: None,
            freeze_backbone: false,
            balance_ratio: Some(1.0),
            precision: Precision::F64,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        for (name, p) in [("p_f", self.p_f), ("p_r", self.p_r)] {
            if !(0.0..=1.0).contains(&p) {
                problems.push(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            problems.push(format!("epsilon = {} outside [0, 1)", self.epsilon));
        }
        if !(self.lr > 0.0) {
            problems.push("lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            problems.push("betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.regression_weight >= 0.0) {
            problems.push("adam_eps must be positive; weight_decay and regression_weight non-negative".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if self.balance_ratio.is_some_and(|r| !(r > 0.0)) {
            problems.push("balance_ratio must be positive".into());
        }
        if self.checkpoint_every == Some(0) {
            problems.push("checkpoint_every must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// `1 − eps` on the true class and `eps / (q − 1)` elsewhere; `[1.0]` when `q = 1`.
pub fn smooth_categorical(v: usize, q: usize, eps: f64) -> Result<Vec<f64>> {
    if v >= q {
        return Err(Error::Index {
            op: "smooth_categorical",
            index: v,
            size: q,
        });
    }
    if q == 1 {
        return Ok(vec![1.0]);
    }
    let mut p = vec![eps / (q - 1) as f64; q];
    p[v] = 1.0 - eps;
    Ok(p)
}

/// `1 − eps` on bin `b`; the in-range bins within `radius` of `b` share
/// `eps` equally; every other bin gets 0.
pub fn smooth_neighborhood(b: usize, q: usize, eps: f64, radius: usize) -> Result<Vec<f64>> {
    if b >= q {
        return Err(Error::Index {
            op: "smooth_neighborhood",
            index: b,
            size: q,
        });
    }
    let lo = b.saturating_sub(radius);
    let hi = (b + radius).min(q - 1);
    let neighbours = hi - lo;
    let mut p = vec![0.0; q];
    if neighbours == 0 {
        p[b] = 1.0;
        return Ok(p);
    }
    let share = eps / neighbours as f64;
    for (l, x) in p.iter_mut().enumerate().take(hi + 1).skip(lo) {
        *x = if l == b { 1.0 - eps } else { share };
    }
    Ok(p)
}

/// Expanded slot values of every row, no field masked.
pub fn encode_rows(sample: &WindowedSample, layout: &FieldLayout, schema: &Schema) -> Result<Vec<EncodedRow>> {
    sample
        .rows
        .iter()
        .map(|r| Ok(EncodedRow::unmasked(r.type_id, layout.slot_values(r, schema)?)))
        .collect()
}

fn random_value(input: &SlotInput, rng: &mut Rng) -> SlotValue {
    match input {
        SlotInput::Lookup { size } => SlotValue::Cat(rng.random_range(0..*size)),
        SlotInput::Binned { range, .. } | SlotInput::Frequency { range } => {
            SlotValue::Num(range.0 + (range.1 - range.0) * rng.random::<f64>())
        }
    }
}

/// Chooses the fields to predict: each row with probability `p_r`, then
/// each field (the timestamp sub-fields as one unit when
/// `timestamp_joint`) with probability `p_f`. Missing values are hidden
/// but never predicted.
pub fn apply_masking(
    rows: &[EncodedRow],
    layout: &FieldLayout,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<EncodedRow>> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let slots = layout.type_slots(row.type_id)?;
        let ts = &layout.timestamp_positions[row.type_id as usize - 1];
        let row_masked = rng.random::<f64>() < cfg.p_r;
        let mut ts_draw: Option<bool> = None;
        let mut masked = vec![false; slots.len()];
        let mut predict = vec![false; slots.len()];
        let mut values = row.values.clone();
        for j in 0..slots.len() {
            let field_draw = if cfg.timestamp_joint && ts.contains(&j) {
                *ts_draw.get_or_insert_with(|| rng.random::<f64>() < cfg.p_f)
            } else {
                rng.random::<f64>() < cfg.p_f
            };
            if !(row_masked || field_draw) {
                continue;
            }
            let present = values[j] != SlotValue::Missing;
            predict[j] = present;
            masked[j] = true;
            if cfg.mask_variant == MaskVariant::Bert && present {
                let u = rng.random::<f64>();
                if u >= 0.8 {
                    masked[j] = false;
                    if u < 0.9 {
                        values[j] = random_value(&layout.slots[slots[j]].input, rng);
                    }
                }
            }
        }
        out.push(EncodedRow {
            type_id: row.type_id,
            values,
            masked,
            predict,
        });
    }
    Ok(out)
}

/// Smoothed target rows for the positions of one slot's logits.
pub fn slot_targets(
    layout: &FieldLayout,
    slot: usize,
    originals: &[&[EncodedRow]],
    positions: &[FieldRef],
    cfg: &TrainConfig,
) -> Result<Tensor> {
    let s = &layout.slots[slot];
    let q = s.target.classes();
    let mut data = Vec::with_capacity(positions.len() * q);
    for p in positions {
        let value = &originals[p.sample][p.row].values[p.field];
        let class = s
            .target_class(value)
            .ok_or_else(|| Error::Schema(format!("no target for {value:?} in slot `{}`", s.name)))?;
        let row = match s.target {
            SlotTarget::Class { .. } => smooth_categorical(class, q, cfg.epsilon)?,
            SlotTarget::Bins { .. } => smooth_neighborhood(class, q, cfg.epsilon, cfg.neighborhood_radius)?,
        };
        data.extend(row);
    }
    Tensor::new(vec![positions.len(), q], data)
}

/// Normalized scalar targets `[n, 1]` of a numerical slot.
pub fn slot_scalar_targets(
    layout: &FieldLayout,
    slot: usize,
    originals: &[&[EncodedRow]],
    positions: &[FieldRef],
) -> Result<Tensor> {
    let s = &layout.slots[slot];
    let data = positions
        .iter()
        .map(|p| {
            let value = &originals[p.sample][p.row].values[p.field];
            s.target_scalar(value)
                .ok_or_else(|| Error::Schema(format!("no scalar target for {value:?} in slot `{}`", s.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(vec![positions.len(), 1], data)
}

/// Mean soft cross-entropy over all positions of all parts, each part
/// being `(logits [n, q], targets [n, q])`. Single-class parts contribute
/// zero loss but count as positions. Zero (with a warning) when empty.
pub fn masked_token_loss(tape: &mut Tape<'_>, parts: &[(Var, Tensor)]) -> Result<Var> {
    let total: usize = parts.iter().map(|(_, t)| t.shape()[0]).sum();
    if total == 0 {
        log::warn!("no masked positions; loss is 0 and the step is skipped");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut acc: Option<Var> = None;
    for (logits, targets) in parts {
        if tape.shape(*logits) != targets.shape() {
            return Err(Error::Shape {
                op: "masked_token_loss",
                lhs: tape.shape(*logits).to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let (n, q) = (targets.shape()[0], targets.shape()[1]);
        if q < 2 {
            continue;
        }
        let ce = tape.cross_entropy_soft(*logits, targets)?;
        let weighted = tape.scale(ce, n as f64 / total as f64);
        acc = Some(match acc {
            Some(a) => tape.add(a, weighted)?,
            None => weighted,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// `weight · MSE` over numerical parts `(pred [n, 1], target [n, 1])` plus
/// the mean cross-entropy over categorical parts.
pub fn regression_loss(
    tape: &mut Tape<'_>,
    numeric: &[(Var, Tensor)],
    categorical: &[(Var, Tensor)],
    weight: f64,
) -> Result<Var> {
    let n: usize = numeric.iter().map(|(_, t)| t.shape()[0]).sum();
    let mut sq: Option<Var> = None;
    for (pred, target) in numeric {
        let t = tape.constant(target.clone());
        let diff = tape.sub(*pred, t)?;
        let d2 = tape.mul(diff, diff)?;
        let s = tape.sum(d2);
        sq = Some(match sq {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    let has_cat = categorical.iter().any(|(_, t)| t.shape()[0] > 0);
    let ce = if has_cat {
        Some(masked_token_loss(tape, categorical)?)
    } else {
        None
    };
    let num = sq.map(|s| tape.scale(s, weight / n as f64));
    Ok(match (num, ce) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => {
            log::warn!("no masked positions; loss is 0 and the step is skipped");
            tape.constant(Tensor::scalar(0.0))
        }
    })
}

/// Pretraining loss of a masked batch; `None` when nothing is masked.
/// `inputs` are the masked rows, `originals` the same rows before masking.
pub fn pretrain_loss(
    tape: &mut Tape<'_>,
    model: &Model,
    inputs: &[&[EncodedRow]],
    originals: &[&[EncodedRow]],
    cfg: &TrainConfig,
    rng: Option<&mut Rng>,
) -> Result<Option<Var>> {
    let logits: Vec<SlotLogits> = model.pretrain_forward(tape, inputs, rng)?;
    if logits.is_empty() {
        log::warn!("no masked positions; loss is 0 and the step is skipped");
        return Ok(None);
    }
    let layout = &model.layout;
    let scalar_heads = model.config.numeric_head == NumericHead::Scalar;
    let mut categorical = Vec::new();
    let mut numeric = Vec::new();
    for l in &logits {
        if scalar_heads && layout.slots[l.slot].is_numerical() {
            numeric.push((l.logits, slot_scalar_targets(layout, l.slot, originals, &l.positions)?));
        } else {
            categorical.push((l.logits, slot_targets(layout, l.slot, originals, &l.positions, cfg)?));
        }
    }
    let loss = match cfg.loss_mode {
        LossMode::UnifiedCe => masked_token_loss(tape, &categorical)?,
        LossMode::RegressionL2 => regression_loss(tape, &numeric, &categorical, cfg.regression_weight)?,
    };
    Ok(Some(loss))
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    /// Number of updates applied to this parameter.
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with decoupled weight decay and bias correction. Parameters
/// without a gradient in a step are left untouched, moments included.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Indexed by parameter id.
    pub moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.betas.0,
            beta2: cfg.betas.1,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            moments: Vec::new(),
        }
    }

    /// One update of every parameter with a gradient. Fails without
    /// changing anything if a gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        for &id in &ids {
            if let Some(g) = grads.param(id) {
                if g.len() != store.get(id).numel() {
                    return Err(Error::Shape {
                        op: "adamw_step",
                        lhs: store.get(id).shape().to_vec(),
                        rhs: vec![g.len()],
                    });
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { op: "adamw_step" });
                }
            }
        }
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), Moments::default());
        }
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let decay = store.entry(id).decay;
            let shape = store.get(id).shape().to_vec();
            let row_len = if shape.len() >= 2 {
                shape[1..].iter().product()
            } else {
                0
            };
            let mom = &mut self.moments[id.index()];
            if mom.m.is_empty() {
                mom.m = vec![0.0; g.len()];
                mom.v = vec![0.0; g.len()];
            }
            mom.step += 1;
            let t = mom.step as i32;
            let c1 = 1.0 - libm::pow(self.beta1, t as f64);
            let c2 = 1.0 - libm::pow(self.beta2, t as f64);
            let theta = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                let decays = match decay {
                    Decay::Full => true,
                    Decay::None => false,
                    Decay::ExceptRow(r) => i / row_len.max(1) != r,
                };
                if decays {
                    theta[i] *= 1.0 - self.lr * self.weight_decay;
                }
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g[i];
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = mom.m[i] / c1;
                let v_hat = mom.v[i] / c2;
                theta[i] -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

/// State handed to [`TrainObserver::on_checkpoint`].
pub struct TrainState<'a> {
    pub model: &'a Model,
    pub optimizer: &'a AdamW,
    pub rng: &'a Rng,
    pub step: u64,
    pub config: &'a TrainConfig,
}

/// Receives metrics and checkpoint opportunities from the training loops.
pub trait TrainObserver {
    fn on_metric(&mut self, _step: u64, _split: &str, _metric: &str, _value: f64) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState<'_>) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Loss of every step, 0 for skipped steps.
    pub losses: Vec<f64>,
    pub skipped: u64,
    pub optimizer: AdamW,
    pub rng: Rng,
}

fn check_loss_mode(model: &Model, cfg: &TrainConfig) -> Result<()> {
    match (cfg.loss_mode, model.config.numeric_head) {
        (LossMode::UnifiedCe, NumericHead::Bins) | (LossMode::RegressionL2, NumericHead::Scalar) => Ok(()),
        (mode, head) => Err(Error::Config(format!(
            "loss mode {mode:?} needs matching numerical heads, model has {head:?}"
        ))),
    }
}

fn encode_all(model: &Model, schema: &Schema, samples: &[WindowedSample]) -> Result<Vec<Vec<EncodedRow>>> {
    samples
        .iter()
        .map(|s| {
            if s.is_empty() {
                return Err(Error::Length(format!("empty sample from `{}`", s.source_entity)));
            }
            encode_rows(s, &model.layout, schema)
        })
        .collect()
}

/// Masked-token pretraining. Every epoch shuffles the samples, takes a
/// fresh random crop of at most `t_max` rows from each, masks it and
/// updates the model on batches of `batch_size`.
pub fn pretrain(
    model: &mut Model,
    schema: &Schema,
    samples: &[WindowedSample],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<PretrainReport> {
    cfg.validate()?;
    check_loss_mode(model, cfg)?;
    if samples.is_empty() {
        return Err(Error::Empty("pretrain"));
    }
    let encoded = encode_all(model, schema, samples)?;
    let mut rng = seeded(cfg.seed);
    let mut opt = AdamW::new(cfg);
    let mut losses = Vec::new();
    let mut skipped = 0;
    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let originals: Vec<&[EncodedRow]> = chunk
                .iter()
                .map(|&i| &encoded[i][random_span(encoded[i].len(), model.config.t_max, &mut rng)])
                .collect();
            let inputs = originals
                .iter()
                .map(|rows| apply_masking(rows, &model.layout, cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let input_refs: Vec<&[EncodedRow]> = inputs.iter().map(|v| v.as_slice()).collect();
            let outcome = {
                let mut tape = Tape::with_params(&model.store);
                tape.set_precision(cfg.precision);
                match pretrain_loss(&mut tape, model, &input_refs, &originals, cfg, Some(&mut rng))? {
                    Some(loss) => {
                        let value = tape.value(loss).item();
                        Some((value, tape.backward(loss)?))
                    }
                    None => None,
                }
            };
            step += 1;
            match outcome {
                Some((value, grads)) => {
                    opt.step(&mut model.store, &grads)?;
                    losses.push(value);
                    observer.on_metric(step, "train", "loss", value)?;
                }
                None => {
                    skipped += 1;
                    losses.push(0.0);
                    observer.on_metric(step, "train", "loss", 0.0)?;
                }
            }
            if cfg.checkpoint_every.is_some_and(|n| step % n == 0) {
                observer.on_checkpoint(&TrainState {
                    model,
                    optimizer: &opt,
                    rng: &rng,
                    step,
                    config: cfg,
                })?;
            }
        }
    }
    Ok(PretrainReport {
        losses,
        skipped,
        optimizer: opt,
        rng,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub losses: Vec<f64>,
    pub optimizer: AdamW,
}

fn task_label(sample: &WindowedSample, task: TaskKind) -> Result<f64> {
    match (task, sample.label) {
        (TaskKind::Regression, Some(Label::Real(v))) if v.is_finite() => Ok(v),
        (TaskKind::Binary, Some(Label::Binary(b))) => Ok(b as u8 as f64),
        (_, label) => Err(Error::Task(format!(
            "{task:?} task needs a matching label; sample from `{}` has {label:?}",
            sample.source_entity
        ))),
    }
}

fn last_rows(rows: &[EncodedRow], t_max: usize) -> &[EncodedRow] {
    &rows[rows.len().saturating_sub(t_max)..]
}

/// Supervised training through `[CLS]`: squared error on standardized
/// labels for regression, cross-entropy for binary labels (after
/// upsampling positives when `balance_ratio` is set). Samples are cut to
/// their last `t_max` rows. The whole network is updated unless
/// `freeze_backbone` is set.
pub fn finetune(
    model: &mut Model,
    schema: &Schema,
    train: &[WindowedSample],
    task: TaskKind,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("finetune"));
    }
    for s in train {
        task_label(s, task)?;
    }
    let mut rng = seeded(derive_seed(cfg.seed, 1));
    model.attach_task_head(task, &mut rng)?;
    let samples: Vec<WindowedSample> = match (task, cfg.balance_ratio) {
        (TaskKind::Binary, Some(ratio)) => balance_upsample(train.to_vec(), ratio, &mut rng)?,
        _ => train.to_vec(),
    };
    let labels = samples
        .iter()
        .map(|s| task_label(s, task))
        .collect::<Result<Vec<_>>>()?;
    if task == TaskKind::Regression {
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        let std = libm::sqrt(var);
        model.target_scale = (mean, if std > 0.0 { std } else { 1.0 });
    }
    let encoded = encode_all(model, schema, &samples)?;
    let head: Vec<ParamId> = model.task_params();
    let mut opt = AdamW::new(cfg);
    let mut losses = Vec::new();
    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<&[EncodedRow]> = chunk
                .iter()
                .map(|&i| last_rows(&encoded[i], model.config.t_max))
                .collect();
            let (value, mut grads) = {
                let mut tape = Tape::with_params(&model.store);
                tape.set_precision(cfg.precision);
                let out = model.finetune_forward(&mut tape, &batch, Some(&mut rng))?;
                let loss = match task {
                    TaskKind::Regression => {
                        let (mean, std) = model.target_scale;
                        let t: Vec<f64> = chunk.iter().map(|&i| (labels[i] - mean) / std).collect();
                        let t = tape.constant(Tensor::new(vec![chunk.len(), 1], t)?);
                        let diff = tape.sub(out, t)?;
                        let sq = tape.mul(diff, diff)?;
                        tape.mean(sq)
                    }
                    TaskKind::Binary => {
                        let mut t = vec![0.0; chunk.len() * 2];
                        for (r, &i) in chunk.iter().enumerate() {
                            t[r * 2 + labels[i] as usize] = 1.0;
                        }
                        tape.cross_entropy_soft(out, &Tensor::new(vec![chunk.len(), 2], t)?)?
                    }
                };
                (tape.value(loss).item(), tape.backward(loss)?)
            };
            if cfg.freeze_backbone {
                grads.retain_params(|id| head.contains(&id));
            }
            opt.step(&mut model.store, &grads)?;
            step += 1;
            losses.push(value);
            observer.on_metric(step, "finetune", "loss", value)?;
            if cfg.checkpoint_every.is_some_and(|n| step % n == 0) {
                observer.on_checkpoint(&TrainState {
                    model,
                    optimizer: &opt,
                    rng: &rng,
                    step,
                    config: cfg,
                })?;
            }
        }
    }
    Ok(FinetuneReport { losses, optimizer: opt })
}

/// Task outputs without dropout: label-scale predictions for regression,
/// positive-class probabilities for binary tasks.
pub fn predict(model: &Model, schema: &Schema, samples: &[WindowedSample], batch_size: usize) -> Result<Vec<f64>> {
    let task = model
        .task()
        .ok_or_else(|| Error::Task("no task head attached".into()))?;
    let encoded = encode_all(model, schema, samples)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in encoded.chunks(batch_size.max(1)) {
        let batch: Vec<&[EncodedRow]> = chunk.iter().map(|r| last_rows(r, model.config.t_max)).collect();
        let mut tape = Tape::with_params(&model.store);
        let y = model.finetune_forward(&mut tape, &batch, None)?;
        let y = tape.value(y).data();
        match task {
            TaskKind::Regression => {
                let (mean, std) = model.target_scale;
                out.extend(y.iter().map(|v| v * std + mean));
            }
            TaskKind::Binary => {
                out.extend(y.chunks(2).map(|l| 1.0 / (1.0 + libm::exp(l[0] - l[1]))));
            }
        }
    }
    Ok(out)
}

/// Metrics of the model's task on labelled samples. Binary predictions
/// use the 0.5 probability threshold (the argmax of the two logits).
pub fn evaluate(model: &Model, schema: &Schema, samples: &[WindowedSample]) -> Result<EvalReport> {
    let task = model
        .task()
        .ok_or_else(|| Error::Task("no task head attached".into()))?;
    let labels = samples
        .iter()
        .map(|s| task_label(s, task))
        .collect::<Result<Vec<_>>>()?;
    let pred = predict(model, schema, samples, 64)?;
    match task {
        TaskKind::Regression => EvalReport::regression(&pred, &labels),
        TaskKind::Binary => {
            let truth: Vec<bool> = labels.iter().map(|&y| y > 0.5).collect();
            EvalReport::binary(&pred, &truth, 0.5)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::NumericInput;
    use crate::schema::{AttributeSpec, RowTypeSpec};

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15)
    }

    #[test]
    fn smooth_categorical_examples() {
        assert!(close(
            &smooth_categorical(2, 5, 0.1).unwrap(),
            &[0.025, 0.025, 0.9, 0.025, 0.025]
        ));
        assert_eq!(smooth_categorical(1, 3, 0.0).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(smooth_categorical(0, 1, 0.1).unwrap(), vec![1.0]);
        assert!(matches!(smooth_categorical(5, 5, 0.1), Err(Error::Index { .. })));
    }

    #[test]
    fn smooth_neighborhood_examples() {
        let p = smooth_neighborhood(50, 100, 0.1, 5).unwrap();
        assert_eq!(p[50], 0.9);
        for (l, &x) in p.iter().enumerate() {
            if l != 50 && (45..=55).contains(&l) {
                assert!((x - 0.01).abs() < 1e-17);
            } else if l != 50 {
                assert_eq!(x, 0.0);
            }
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let p = smooth_neighborhood(2, 100, 0.1, 5).unwrap();
        for l in [0, 1, 3, 4, 5, 6, 7] {
            assert_eq!(p[l], 0.1 / 7.0);
        }
        assert_eq!(p[8], 0.0);
        let one_hot = smooth_neighborhood(4, 10, 0.0, 5).unwrap();
        assert_eq!(one_hot.iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(smooth_neighborhood(0, 1, 0.1, 5).unwrap(), vec![1.0]);
    }

    fn layout() -> (Schema, FieldLayout) {
        let schema = Schema::new(
            vec![
                AttributeSpec::timestamp("ts", vec![2020], true),
                AttributeSpec::categorical("c", vec!["a".into(), "b".into()]),
                AttributeSpec::numerical("x", vec![0.0, 1.0, 2.0], (0.0, 2.0)),
            ],
            vec![RowTypeSpec {
                type_id: 1,
                attributes: vec!["ts".into(), "c".into(), "x".into()],
            }],
        )
        .unwrap();
        let layout = FieldLayout::new(&schema, NumericInput::Frequency, 17).unwrap();
        (schema, layout)
    }

    fn rows(n: usize) -> Vec<EncodedRow> {
        (0..n)
            .map(|i| {
                EncodedRow::unmasked(
                    1,
                    vec![
                        SlotValue::Cat(0),
                        SlotValue::Cat(1),
                        SlotValue::Cat(2),
                        SlotValue::Cat(3),
                        SlotValue::Cat(i % 2),
                        SlotValue::Num(1.5),
                    ],
                )
            })
            .collect()
    }

    #[test]
    fn masking_extremes() {
        let (_, layout) = layout();
        let mut rng = seeded(0);
        let all = TrainConfig {
            p_f: 1.0,
            p_r: 0.0,
            ..TrainConfig::desk()
        };
        let m = apply_masking(&rows(5), &layout, &all, &mut rng).unwrap();
        assert!(m
            .iter()
            .all(|r| r.masked.iter().all(|&x| x) && r.predict.iter().all(|&x| x)));
        let none = TrainConfig {
            p_f: 0.0,
            p_r: 0.0,
            ..TrainConfig::desk()
        };
        let m = apply_masking(&rows(5), &layout, &none, &mut rng).unwrap();
        assert!(m.iter().all(|r| r.masked.iter().all(|&x| !x)));
    }

    #[test]
    fn bert_variant_keeps_targets() {
        let (_, layout) = layout();
        let cfg = TrainConfig {
            p_f: 1.0,
            mask_variant: MaskVariant::Bert,
            ..TrainConfig::desk()
        };
        let m = apply_masking(&rows(400), &layout, &cfg, &mut seeded(1)).unwrap();
        let fields: Vec<(bool, bool)> = m
            .iter()
            .flat_map(|r| r.masked.iter().copied().zip(r.predict.iter().copied()))
            .collect();
        assert!(fields.iter().all(|&(_, p)| p));
        let shown = fields.iter().filter(|&&(m, _)| !m).count() as f64 / fields.len() as f64;
        assert!((shown - 0.2).abs() < 0.03, "{shown}");
    }

    #[test]
    fn loss_examples() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
        let target = Tensor::matrix(1, 4, vec![0.7, 0.1, 0.1, 0.1]).unwrap();
        let l = masked_token_loss(&mut tape, &[(logits, target)]).unwrap();
        assert!((tape.value(l).item() - libm::log(4.0)).abs() < 1e-15);

        let p = smooth_categorical(2, 5, 0.1).unwrap();
        let log_p: Vec<f64> = p.iter().map(|x| libm::log(*x)).collect();
        let logits = tape.input(Tensor::matrix(1, 5, log_p).unwrap());
        let l = masked_token_loss(&mut tape, &[(logits, Tensor::matrix(1, 5, p).unwrap())]).unwrap();
        let entropy = -(0.9 * libm::log(0.9) + 4.0 * 0.025 * libm::log(0.025));
        assert!((tape.value(l).item() - entropy).abs() < 1e-12);
        assert!((entropy - 0.46365).abs() < 1e-4);

        let l = masked_token_loss(&mut tape, &[]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn regression_loss_examples() {
        let mut tape = Tape::new();
        let pred = tape.input(Tensor::matrix(3, 1, vec![0.1, 0.5, 0.9]).unwrap());
        let same = Tensor::matrix(3, 1, vec![0.1, 0.5, 0.9]).unwrap();
        let l = regression_loss(&mut tape, &[(pred, same)], &[], 50.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let off = Tensor::matrix(3, 1, vec![0.0, 0.4, 0.8]).unwrap();
        let l = regression_loss(&mut tape, &[(pred, off)], &[], 50.0).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adamw_examples() {
        let cfg = TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-2,
            ..TrainConfig::desk()
        };
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0]).unwrap(), Decay::Full).unwrap();
        let mut opt = AdamW::new(&cfg);
        let grads = {
            let mut tape = Tape::with_params(&store);
            let p = tape.param(id);
            let z = tape.scale(p, 0.0);
            let s = tape.sum(z);
            tape.backward(s).unwrap()
        };
        opt.step(&mut store, &grads).unwrap();
        assert!((store.get(id).data()[0] - 0.99999).abs() < 1e-15);

        let cfg = TrainConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..TrainConfig::desk()
        };
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::vector(vec![1.0, 2.0]).unwrap(), Decay::Full)
            .unwrap();
        let mut opt = AdamW::new(&cfg);
        let grads = {
            let mut tape = Tape::with_params(&store);
            let p = tape.param(id);
            let c = tape.constant(Tensor::vector(vec![3.0, -0.5]).unwrap());
            let z = tape.mul(p, c).unwrap();
            let s = tape.sum(z);
            tape.backward(s).unwrap()
        };
        opt.step(&mut store, &grads).unwrap();
        let d = store.get(id).data();
        assert!((d[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((d[1] - (2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn adamw_skips_pad_row_decay() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..TrainConfig::desk()
        };
        let mut store = ParamStore::new();
        let id = store.add("t", Tensor::full(&[2, 2], 1.0), Decay::ExceptRow(1)).unwrap();
        let grads = {
            let mut tape = Tape::with_params(&store);
            let p = tape.param(id);
            let z = tape.scale(p, 0.0);
            let s = tape.sum(z);
            tape.backward(s).unwrap()
        };
        AdamW::new(&cfg).step(&mut store, &grads).unwrap();
        assert_eq!(store.get(id).data(), &[0.95, 0.95, 1.0, 1.0]);
    }
}
