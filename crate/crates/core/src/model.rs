//! The hierarchical network: Field Transformer, row-type projections,
//! Sequence Transformer, per-field prediction heads and the task head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingBank, FieldLayout, NumericInput, SlotTarget, SlotValue};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schema::Schema;
use crate::tensor::{Allocating, Decay, Init, ParamId, ParamRegistry, ParamStore, ShapeList, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// Layer norm after each residual sum.
    #[default]
    Post,
    /// Layer norm on each sublayer input.
    Pre,
}

/// Initialization of the weight matrices of linear maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// Standard deviation `1 / sqrt(fan_in)`, which keeps activations at
    /// unit scale through every layer whatever the width.
    #[default]
    FanIn,
    /// Standard deviation `init_std` for every weight. Suited to wide
    /// models only: at small widths each layer shrinks its input.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct WeightScale(Option<f64>);

impl WeightScale {
    fn of(config: &ModelConfig) -> Self {
        match config.weight_init {
            WeightInit::FanIn => WeightScale(None),
            WeightInit::Fixed => WeightScale(Some(config.init_std)),
        }
    }

    fn std(self, fan_in: usize) -> f64 {
        self.0.unwrap_or_else(|| 1.0 / libm::sqrt(fan_in as f64))
    }
}

/// Output of the heads of numerical fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericHead {
    /// Logits over the quantization bins.
    #[default]
    Bins,
    /// One scalar regressing the normalized value.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Binary,
}

impl TaskKind {
    pub fn outputs(self) -> usize {
        match self {
            TaskKind::Regression => 1,
            TaskKind::Binary => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Field embedding width.
    pub d: usize,
    /// Sequence width.
    pub m: usize,
    pub field_layers: usize,
    pub field_heads: usize,
    pub seq_layers: usize,
    pub seq_heads: usize,
    pub ff_multiplier: usize,
    pub dropout: f64,
    /// Number of frequencies of the numerical encoding.
    pub frequencies: usize,
    /// Longest sequence accepted (not counting `[CLS]`).
    pub t_max: usize,
    pub numeric_input: NumericInput,
    /// Table size of binned numerical inputs; `None` matches the parameter
    /// count of the frequency projection (`2L + 1` rows).
    pub binned_bins: Option<usize>,
    pub n_row_types: usize,
    pub norm: NormPlacement,
    pub numeric_head: NumericHead,
    /// Standard deviation of embedding tables and `[CLS]`, and of every
    /// weight under [`WeightInit::Fixed`].
    pub init_std: f64,
    pub weight_init: WeightInit,
    /// Standard deviation of the learned sequence positions at init. Kept
    /// near the scale of the projected rows so order is usable from the
    /// first step; at `init_std` the positions are drowned out.
    pub position_init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small enough to train on one CPU in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            d: 16,
            m: 64,
            field_layers: 1,
            field_heads: 4,
            seq_layers: 2,
            seq_heads: 4,
            ff_multiplier: 4,
            dropout: 0.1,
            frequencies: 8,
            t_max: 64,
            numeric_input: NumericInput::Frequency,
            binned_bins: None,
            n_row_types: 1,
            norm: NormPlacement::Post,
            numeric_head: NumericHead::Bins,
            init_std: 0.02,
            weight_init: WeightInit::FanIn,
            position_init_std: 1.0,
            layer_norm_eps: 1e-5,
        }
    }

    /// Published depth and head counts; widths are BERT-base like.
    pub fn paper() -> Self {
        ModelConfig {
            d: 64,
            m: 768,
            field_layers: 1,
            field_heads: 8,
            seq_layers: 12,
            seq_heads: 12,
            t_max: 150,
            ..Self::desk()
        }
    }

    pub fn binned_table_size(&self) -> usize {
        self.binned_bins.unwrap_or(2 * self.frequencies + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        if self.d == 0 || self.m == 0 {
            problems.push("d and m must be positive".into());
        }
        if self.field_heads == 0 || self.d % self.field_heads != 0 {
            problems.push(format!("field_heads {} must divide d {}", self.field_heads, self.d));
        }
        if self.seq_heads == 0 || self.m % self.seq_heads != 0 {
            problems.push(format!("seq_heads {} must divide m {}", self.seq_heads, self.m));
        }
        if self.ff_multiplier == 0 {
            problems.push("ff_multiplier must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.frequencies == 0 {
            problems.push("frequencies must be at least 1".into());
        }
        if self.t_max == 0 {
            problems.push("t_max must be at least 1".into());
        }
        if self.n_row_types == 0 {
            problems.push("n_row_types must be at least 1".into());
        }
        if self.binned_bins.is_some_and(|b| b < 2) {
            problems.push("binned_bins must be at least 2".into());
        }
        if !(self.init_std > 0.0) || !(self.position_init_std > 0.0) || !(self.layer_norm_eps > 0.0) {
            problems.push("init_std, position_init_std and layer_norm_eps must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    fn new(reg: &mut dyn ParamRegistry, name: &str, input: usize, output: usize, scale: WeightScale) -> Result<Self> {
        Ok(Linear {
            w: reg.register(
                format!("{name}.w"),
                &[input, output],
                Init::Normal(scale.std(input)),
                Decay::Full,
            )?,
            b: Some(reg.register(format!("{name}.b"), &[output], Init::Zeros, Decay::Full)?),
        })
    }

    fn without_bias(
        reg: &mut dyn ParamRegistry,
        name: &str,
        input: usize,
        output: usize,
        scale: WeightScale,
    ) -> Result<Self> {
        Ok(Linear {
            w: reg.register(
                format!("{name}.w"),
                &[input, output],
                Init::Normal(scale.std(input)),
                Decay::Full,
            )?,
            b: None,
        })
    }

    fn count(input: usize, output: usize) -> usize {
        input * output + output
    }

    fn ids(&self) -> impl Iterator<Item = ParamId> {
        core::iter::once(self.w).chain(self.b)
    }

    fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(reg: &mut dyn ParamRegistry, name: &str, width: usize) -> Result<Self> {
        Ok(Norm {
            gamma: reg.register(format!("{name}.gamma"), &[width], Init::Ones, Decay::None)?,
            beta: reg.register(format!("{name}.beta"), &[width], Init::Zeros, Decay::None)?,
        })
    }

    fn forward(&self, tape: &mut Tape<'_>, x: Var, eps: f64) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

/// Two-layer perceptron with a GELU hidden layer.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new(
        reg: &mut dyn ParamRegistry,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        scale: WeightScale,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(reg, &format!("{name}.fc1"), input, hidden, scale)?,
            fc2: Linear::new(reg, &format!("{name}.fc2"), hidden, output, scale)?,
        })
    }

    fn count(input: usize, hidden: usize, output: usize) -> usize {
        Linear::count(input, hidden) + Linear::count(hidden, output)
    }

    fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}

fn maybe_dropout(tape: &mut Tape<'_>, x: Var, p: f64, rng: Option<&mut Rng>) -> Var {
    match rng {
        Some(rng) => tape.dropout(x, p, rng, true),
        None => x,
    }
}

/// Transformer encoder block over `[G, T, width]`.
#[derive(Clone, Debug, PartialEq)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: Norm,
    ff1: Linear,
    ff2: Linear,
    norm2: Norm,
    heads: usize,
    width: usize,
}

struct LayerSettings {
    dropout: f64,
    eps: f64,
    norm: NormPlacement,
}

impl EncoderLayer {
    fn new(
        reg: &mut dyn ParamRegistry,
        name: &str,
        width: usize,
        heads: usize,
        ff: usize,
        scale: WeightScale,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            q: Linear::new(reg, &format!("{name}.attn.q"), width, width, scale)?,
            // A key bias only shifts every score of a query by the same
            // amount, which softmax cancels.
            k: Linear::without_bias(reg, &format!("{name}.attn.k"), width, width, scale)?,
            v: Linear::new(reg, &format!("{name}.attn.v"), width, width, scale)?,
            o: Linear::new(reg, &format!("{name}.attn.o"), width, width, scale)?,
            norm1: Norm::new(reg, &format!("{name}.norm1"), width)?,
            ff1: Linear::new(reg, &format!("{name}.ff1"), width, ff * width, scale)?,
            ff2: Linear::new(reg, &format!("{name}.ff2"), ff * width, width, scale)?,
            norm2: Norm::new(reg, &format!("{name}.norm2"), width)?,
            heads,
            width,
        })
    }

    fn count(width: usize, ff: usize) -> usize {
        4 * Linear::count(width, width) - width
            + 4 * width
            + Linear::count(width, ff * width)
            + Linear::count(ff * width, width)
    }

    /// `key_mask[g * T + j]` marks real keys; `None` attends everywhere.
    fn attention(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        key_mask: Option<&[bool]>,
        p: f64,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (g, t, w) = (s[0], s[1], s[2]);
        let h = self.heads;
        let dh = w / h;
        let split = |tape: &mut Tape<'_>, lin: &Linear| -> Result<Var> {
            let y = lin.forward(tape, x)?;
            let y = tape.reshape(y, &[g, t, h, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, &[g * h, t, dh])
        };
        let q = split(tape, &self.q)?;
        let k = split(tape, &self.k)?;
        let v = split(tape, &self.v)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / libm::sqrt(dh as f64));
        let probs = match key_mask {
            Some(mask) => {
                let mut expanded = Vec::with_capacity(g * h * t);
                for gi in 0..g {
                    for _ in 0..h {
                        expanded.extend_from_slice(&mask[gi * t..(gi + 1) * t]);
                    }
                }
                tape.masked_softmax(scores, &expanded)?
            }
            None => tape.softmax(scores, 2)?,
        };
        let probs = maybe_dropout(tape, probs, p, rng);
        let ctx = tape.matmul(probs, v)?;
        let ctx = tape.reshape(ctx, &[g, h, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[g, t, w])?;
        self.o.forward(tape, ctx)
    }

    fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        key_mask: Option<&[bool]>,
        set: &LayerSettings,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        debug_assert_eq!(tape.shape(x)[2], self.width);
        match set.norm {
            NormPlacement::Post => {
                let a = self.attention(tape, x, key_mask, set.dropout, rng.as_deref_mut())?;
                let a = maybe_dropout(tape, a, set.dropout, rng.as_deref_mut());
                let x = tape.add(x, a)?;
                let x = self.norm1.forward(tape, x, set.eps)?;
                let f = self.feed_forward(tape, x)?;
                let f = maybe_dropout(tape, f, set.dropout, rng.as_deref_mut());
                let x = tape.add(x, f)?;
                self.norm2.forward(tape, x, set.eps)
            }
            NormPlacement::Pre => {
                let n = self.norm1.forward(tape, x, set.eps)?;
                let a = self.attention(tape, n, key_mask, set.dropout, rng.as_deref_mut())?;
                let a = maybe_dropout(tape, a, set.dropout, rng.as_deref_mut());
                let x = tape.add(x, a)?;
                let n = self.norm2.forward(tape, x, set.eps)?;
                let f = self.feed_forward(tape, n)?;
                let f = maybe_dropout(tape, f, set.dropout, rng.as_deref_mut());
                tape.add(x, f)
            }
        }
    }

    fn feed_forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.ff1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.ff2.forward(tape, h)
    }
}

/// One row of a model input: expanded slot values, the fields whose input
/// is replaced by `[MASK]`, and the fields the heads must predict.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedRow {
    pub type_id: u32,
    pub values: Vec<SlotValue>,
    pub masked: Vec<bool>,
    pub predict: Vec<bool>,
}

impl EncodedRow {
    pub fn unmasked(type_id: u32, values: Vec<SlotValue>) -> Self {
        let masked = vec![false; values.len()];
        EncodedRow {
            type_id,
            predict: masked.clone(),
            values,
            masked,
        }
    }
}

/// Location of a field inside a batch: sample, row, field position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct FieldRef {
    pub sample: usize,
    pub row: usize,
    pub field: usize,
}

/// Predictions of one slot's head at its masked positions, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotLogits {
    pub slot: usize,
    /// `[n, classes]`, or `[n, 1]` for scalar numerical heads.
    pub logits: Var,
    pub positions: Vec<FieldRef>,
}

/// Sequence Transformer output for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceOutput {
    /// `[B, T, m]`; padded positions are zero.
    pub hidden: Var,
    pub len: usize,
    /// Number of real positions of each sample, `[CLS]` included.
    pub lengths: Vec<usize>,
    /// Offset of the first data row (1 with `[CLS]`).
    pub offset: usize,
}

/// All trainable state plus the derived field layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: FieldLayout,
    pub store: ParamStore,
    pub bank: EmbeddingBank,
    /// `(mean, std)` mapping regression head outputs back to label units.
    pub target_scale: (f64, f64),
    field: Vec<EncoderLayer>,
    row_in: Vec<ParamId>,
    row_out: Vec<ParamId>,
    cls: ParamId,
    pos: ParamId,
    seq: Vec<EncoderLayer>,
    heads: Vec<Mlp>,
    task: Option<(TaskKind, Mlp)>,
}

struct Parts {
    bank: EmbeddingBank,
    field: Vec<EncoderLayer>,
    row_in: Vec<ParamId>,
    row_out: Vec<ParamId>,
    cls: ParamId,
    pos: ParamId,
    seq: Vec<EncoderLayer>,
    heads: Vec<Mlp>,
    task: Option<(TaskKind, Mlp)>,
}

fn head_outputs(config: &ModelConfig, target: &SlotTarget) -> usize {
    match (target, config.numeric_head) {
        (SlotTarget::Bins { .. }, NumericHead::Scalar) => 1,
        _ => target.classes(),
    }
}

fn build(
    config: &ModelConfig,
    layout: &FieldLayout,
    task: Option<TaskKind>,
    reg: &mut dyn ParamRegistry,
) -> Result<Parts> {
    let (d, m, std) = (config.d, config.m, config.init_std);
    let scale = WeightScale::of(config);
    let bank = EmbeddingBank::new(layout, d, config.frequencies, std, reg)?;
    let field = (0..config.field_layers)
        .map(|i| {
            EncoderLayer::new(
                reg,
                &format!("field.l{i}"),
                d,
                config.field_heads,
                config.ff_multiplier,
                scale,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut row_in = Vec::new();
    let mut row_out = Vec::new();
    for (h, slots) in layout.by_type.iter().enumerate() {
        let width = d * slots.len();
        row_in.push(reg.register(
            format!("row.{}.in", h + 1),
            &[m, width],
            Init::Normal(scale.std(width)),
            Decay::Full,
        )?);
        row_out.push(reg.register(
            format!("row.{}.out", h + 1),
            &[width, m],
            Init::Normal(scale.std(m)),
            Decay::Full,
        )?);
    }
    let cls = reg.register("seq.cls".into(), &[1, m], Init::Normal(std), Decay::Full)?;
    let pos = reg.register(
        "seq.pos".into(),
        &[config.t_max + 1, m],
        Init::Normal(config.position_init_std),
        Decay::Full,
    )?;
    let seq = (0..config.seq_layers)
        .map(|i| {
            EncoderLayer::new(
                reg,
                &format!("seq.l{i}"),
                m,
                config.seq_heads,
                config.ff_multiplier,
                scale,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let heads = layout
        .slots
        .iter()
        .map(|s| {
            Mlp::new(
                reg,
                &format!("head.{}", s.name),
                d,
                d,
                head_outputs(config, &s.target),
                scale,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let task = match task {
        Some(kind) => Some((kind, Mlp::new(reg, "task", m, m, kind.outputs(), scale)?)),
        None => None,
    };
    Ok(Parts {
        bank,
        field,
        row_in,
        row_out,
        cls,
        pos,
        seq,
        heads,
        task,
    })
}

/// Closed-form number of scalar parameters.
pub fn parameter_count(config: &ModelConfig, layout: &FieldLayout, task: Option<TaskKind>) -> usize {
    let (d, m, f) = (config.d, config.m, config.ff_multiplier);
    let embeddings = EmbeddingBank::parameter_count(layout, d, config.frequencies);
    let field = config.field_layers * EncoderLayer::count(d, f);
    let projections: usize = layout.by_type.iter().map(|s| 2 * m * d * s.len()).sum();
    let sequence = m + (config.t_max + 1) * m + config.seq_layers * EncoderLayer::count(m, f);
    let heads: usize = layout
        .slots
        .iter()
        .map(|s| Mlp::count(d, d, head_outputs(config, &s.target)))
        .sum();
    let task = task.map_or(0, |k| Mlp::count(m, m, k.outputs()));
    embeddings + field + projections + sequence + heads + task
}

/// Names and shapes the model would register, without allocating.
pub fn parameter_shapes(config: &ModelConfig, layout: &FieldLayout, task: Option<TaskKind>) -> Result<ShapeList> {
    config.validate()?;
    let mut list = ShapeList::default();
    build(config, layout, task, &mut list)?;
    Ok(list)
}

impl Model {
    pub fn new(config: ModelConfig, schema: &Schema, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if config.n_row_types != schema.row_types.len() {
            return Err(Error::Config(format!(
                "n_row_types is {} but the schema declares {} row types",
                config.n_row_types,
                schema.row_types.len()
            )));
        }
        let layout = FieldLayout::new(schema, config.numeric_input, config.binned_table_size())?;
        let mut store = ParamStore::new();
        let parts = build(&config, &layout, None, &mut Allocating { store: &mut store, rng })?;
        Ok(Self::assemble(config, layout, store, parts))
    }

    fn assemble(config: ModelConfig, layout: FieldLayout, store: ParamStore, p: Parts) -> Self {
        Model {
            config,
            layout,
            store,
            bank: p.bank,
            target_scale: (0.0, 1.0),
            field: p.field,
            row_in: p.row_in,
            row_out: p.row_out,
            cls: p.cls,
            pos: p.pos,
            seq: p.seq,
            heads: p.heads,
            task: p.task,
        }
    }

    /// Adds the fine-tuning head (`task.fc1`, `task.fc2`). Replaces an
    /// existing head of another kind; keeps one of the same kind.
    pub fn attach_task_head(&mut self, kind: TaskKind, rng: &mut Rng) -> Result<()> {
        if let Some((existing, _)) = self.task {
            if existing == kind {
                return Ok(());
            }
            return Err(Error::Task(format!("model already carries a {existing:?} head")));
        }
        let mut reg = Allocating {
            store: &mut self.store,
            rng,
        };
        let head = Mlp::new(
            &mut reg,
            "task",
            self.config.m,
            self.config.m,
            kind.outputs(),
            WeightScale::of(&self.config),
        )?;
        self.task = Some((kind, head));
        Ok(())
    }

    pub fn task(&self) -> Option<TaskKind> {
        self.task.map(|(k, _)| k)
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.config, &self.layout, self.task())
    }

    /// Parameters belonging to the task head.
    pub fn task_params(&self) -> Vec<ParamId> {
        match self.task {
            Some((_, h)) => h.fc1.ids().chain(h.fc2.ids()).collect(),
            None => Vec::new(),
        }
    }

    /// Parameters of the row-type projections `(in, out)` of a row type.
    pub fn row_projection(&self, type_id: u32) -> Result<(ParamId, ParamId)> {
        let i = type_id
            .checked_sub(1)
            .map(|i| i as usize)
            .filter(|&i| i < self.row_in.len())
            .ok_or(Error::UnknownRowType(type_id))?;
        Ok((self.row_in[i], self.row_out[i]))
    }

    fn settings(&self) -> LayerSettings {
        LayerSettings {
            dropout: self.config.dropout,
            eps: self.config.layer_norm_eps,
            norm: self.config.norm,
        }
    }

    /// Field Transformer over `x: [R, k, d]`; no positional information.
    pub fn field_forward(&self, tape: &mut Tape<'_>, x: Var, mut rng: Option<&mut Rng>) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 3 || s[2] != self.config.d {
            return Err(Error::Shape {
                op: "field_forward",
                lhs: s.to_vec(),
                rhs: vec![self.config.d],
            });
        }
        let set = self.settings();
        let mut h = x;
        for layer in &self.field {
            h = layer.forward(tape, h, None, &set, rng.as_deref_mut())?;
        }
        Ok(h)
    }

    /// `[R, k_h, d]` → `[R, m]` through the row type's input matrix.
    pub fn project_rows(&self, tape: &mut Tape<'_>, field_out: Var, type_id: u32) -> Result<Var> {
        let (w_in, _) = self.row_projection(type_id)?;
        let k = self.layout.arity(type_id)?;
        let s = tape.shape(field_out).to_vec();
        if s.len() != 3 || s[1] != k || s[2] != self.config.d {
            return Err(Error::Shape {
                op: "project_rows",
                lhs: s,
                rhs: vec![k, self.config.d],
            });
        }
        let flat = tape.reshape(field_out, &[s[0], k * self.config.d])?;
        let w = tape.param(w_in);
        tape.matmul_nt(flat, w)
    }

    /// `[R, m]` → `[R, k_h, d]` through the row type's output matrix.
    pub fn unproject_rows(&self, tape: &mut Tape<'_>, z: Var, type_id: u32) -> Result<Var> {
        let (_, w_out) = self.row_projection(type_id)?;
        let k = self.layout.arity(type_id)?;
        let r = tape.shape(z)[0];
        let w = tape.param(w_out);
        let out = tape.matmul_nt(z, w)?;
        tape.reshape(out, &[r, k, self.config.d])
    }

    /// Sequence Transformer over `rows: [B, T, m]` with learned positions.
    /// `real[b * T + t]` marks non-padding positions; padded outputs are zero.
    pub fn sequence_forward(
        &self,
        tape: &mut Tape<'_>,
        rows: Var,
        real: &[bool],
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let s = tape.shape(rows).to_vec();
        if s.len() != 3 || s[2] != self.config.m || real.len() != s[0] * s[1] {
            return Err(Error::Shape {
                op: "sequence_forward",
                lhs: s,
                rhs: vec![real.len()],
            });
        }
        let (b, t) = (s[0], s[1]);
        if t > self.config.t_max + 1 {
            return Err(Error::Length(format!(
                "sequence of {t} positions exceeds t_max + 1 = {}",
                self.config.t_max + 1
            )));
        }
        if let Some(g) = (0..b).find(|g| !real[g * t..(g + 1) * t].iter().any(|&r| r)) {
            return Err(Error::Length(format!("sample {g} has no real positions")));
        }
        let pos = tape.param(self.pos);
        let pos = tape.slice(pos, 0, 0, t)?;
        let mut h = tape.add(rows, pos)?;
        h = maybe_dropout(tape, h, self.config.dropout, rng.as_deref_mut());
        let set = self.settings();
        for layer in &self.seq {
            h = layer.forward(tape, h, Some(real), &set, rng.as_deref_mut())?;
        }
        if real.iter().all(|&r| r) {
            return Ok(h);
        }
        let flat = tape.reshape(h, &[b * t, self.config.m])?;
        let zero = tape.constant(Tensor::zeros(&[1, self.config.m]));
        let padded = tape.concat(&[flat, zero], 0)?;
        let ids: Vec<usize> = (0..b * t).map(|i| if real[i] { i } else { b * t }).collect();
        let out = tape.gather(padded, &ids)?;
        tape.reshape(out, &[b, t, self.config.m])
    }

    /// Embeds, encodes and projects every row of the batch, then runs the
    /// Sequence Transformer, optionally with a leading `[CLS]`.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&[EncodedRow]],
        with_cls: bool,
        mut rng: Option<&mut Rng>,
    ) -> Result<SequenceOutput> {
        if batch.is_empty() {
            return Err(Error::Empty("encode"));
        }
        let offset = with_cls as usize;
        let len = batch.iter().map(|s| s.len()).max().unwrap_or(0) + offset;
        if batch.iter().any(|s| s.is_empty()) {
            return Err(Error::Length("empty sample".into()));
        }
        if len - offset > self.config.t_max {
            return Err(Error::Length(format!(
                "sample of {} rows exceeds t_max = {}",
                len - offset,
                self.config.t_max
            )));
        }
        // Row vectors of each type, in batch order.
        let mut source = vec![usize::MAX; batch.len() * len];
        let mut pieces = Vec::new();
        let mut filled = 0;
        for h in 0..self.layout.n_types() {
            let type_id = h as u32 + 1;
            let slots = &self.layout.by_type[h];
            let mut values = Vec::new();
            let mut masked = Vec::new();
            let mut count = 0;
            for (b, sample) in batch.iter().enumerate() {
                for (i, row) in sample.iter().enumerate() {
                    if row.type_id != type_id {
                        continue;
                    }
                    if row.values.len() != slots.len()
                        || row.masked.len() != slots.len()
                        || row.predict.len() != slots.len()
                    {
                        return Err(Error::Length(format!(
                            "row of type {type_id} has {} values and {} mask flags, expected {}",
                            row.values.len(),
                            row.masked.len(),
                            slots.len()
                        )));
                    }
                    values.extend_from_slice(&row.values);
                    masked.extend_from_slice(&row.masked);
                    source[b * len + offset + i] = filled + count;
                    count += 1;
                }
            }
            if count == 0 {
                continue;
            }
            let x = self.bank.embed_block(tape, &self.layout, slots, &values, &masked)?;
            let x = self.field_forward(tape, x, rng.as_deref_mut())?;
            pieces.push(self.project_rows(tape, x, type_id)?);
            filled += count;
        }
        for (b, sample) in batch.iter().enumerate() {
            if let Some(row) = sample
                .iter()
                .find(|r| r.type_id == 0 || r.type_id as usize > self.layout.n_types())
            {
                return Err(Error::UnknownRowType(row.type_id));
            }
            debug_assert!(sample.len() + offset <= len, "sample {b}");
        }
        let cls_index = filled;
        let pad_index = filled + 1;
        let cls = tape.param(self.cls);
        pieces.push(cls);
        pieces.push(tape.constant(Tensor::zeros(&[1, self.config.m])));
        let all = tape.concat(&pieces, 0)?;
        let mut real = vec![false; batch.len() * len];
        let mut lengths = Vec::with_capacity(batch.len());
        for (b, sample) in batch.iter().enumerate() {
            if with_cls {
                source[b * len] = cls_index;
            }
            for t in 0..len {
                let i = b * len + t;
                real[i] = t < sample.len() + offset;
                if !real[i] {
                    source[i] = pad_index;
                }
            }
            lengths.push(sample.len() + offset);
        }
        let rows = tape.gather(all, &source)?;
        let rows = tape.reshape(rows, &[batch.len(), len, self.config.m])?;
        let hidden = self.sequence_forward(tape, rows, &real, rng)?;
        Ok(SequenceOutput {
            hidden,
            len,
            lengths,
            offset,
        })
    }

    /// Head outputs at every field flagged for prediction, grouped by slot.
    /// Slots without such fields are omitted.
    pub fn pretrain_forward(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&[EncodedRow]],
        mut rng: Option<&mut Rng>,
    ) -> Result<Vec<SlotLogits>> {
        let any_target = batch.iter().any(|s| s.iter().any(|r| r.predict.iter().any(|&m| m)));
        if !any_target {
            return Ok(Vec::new());
        }
        let out = self.encode(tape, batch, false, rng.as_deref_mut())?;
        let flat = tape.reshape(out.hidden, &[batch.len() * out.len, self.config.m])?;
        let mut per_slot: Vec<(Vec<Var>, Vec<FieldRef>)> = vec![(Vec::new(), Vec::new()); self.layout.slots.len()];
        for h in 0..self.layout.n_types() {
            let type_id = h as u32 + 1;
            let slots = &self.layout.by_type[h];
            let k = slots.len();
            let mut rows = Vec::new();
            let mut refs = Vec::new();
            for (b, sample) in batch.iter().enumerate() {
                for (i, row) in sample.iter().enumerate() {
                    if row.type_id == type_id && row.predict.iter().any(|&m| m) {
                        rows.push(b * out.len + out.offset + i);
                        refs.push((b, i, &row.predict));
                    }
                }
            }
            if rows.is_empty() {
                continue;
            }
            let z = tape.gather(flat, &rows)?;
            let z = self.unproject_rows(tape, z, type_id)?;
            let z = tape.reshape(z, &[rows.len() * k, self.config.d])?;
            for (j, &slot) in slots.iter().enumerate() {
                let mut ids = Vec::new();
                for (r, &(b, i, predict)) in refs.iter().enumerate() {
                    if predict[j] {
                        ids.push(r * k + j);
                        per_slot[slot].1.push(FieldRef {
                            sample: b,
                            row: i,
                            field: j,
                        });
                    }
                }
                if !ids.is_empty() {
                    let piece = tape.gather(z, &ids)?;
                    per_slot[slot].0.push(piece);
                }
            }
        }
        let mut result = Vec::new();
        for (slot, (pieces, positions)) in per_slot.into_iter().enumerate() {
            if pieces.is_empty() {
                continue;
            }
            let x = if pieces.len() == 1 {
                pieces[0]
            } else {
                tape.concat(&pieces, 0)?
            };
            let logits = self.heads[slot].forward(tape, x)?;
            result.push(SlotLogits {
                slot,
                logits,
                positions,
            });
        }
        Ok(result)
    }

    /// Task head applied to the `[CLS]` output: `[B, 1]` for regression,
    /// `[B, 2]` logits for binary classification.
    pub fn finetune_forward(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&[EncodedRow]],
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let (_, head) = self.task.ok_or_else(|| Error::Task("no task head attached".into()))?;
        let out = self.encode(tape, batch, true, rng.as_deref_mut())?;
        let flat = tape.reshape(out.hidden, &[batch.len() * out.len, self.config.m])?;
        let ids: Vec<usize> = (0..batch.len()).map(|b| b * out.len).collect();
        let cls = tape.gather(flat, &ids)?;
        head.forward(tape, cls)
    }
}
