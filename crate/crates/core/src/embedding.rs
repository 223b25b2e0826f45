//! Field embeddings: categorical lookups, frequency encoding of numerical
//! values, timestamp decomposition and the shared special vectors.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{quantize_edges, AttributeKind, FieldValue, Row, Schema, Timestamp};
use crate::tensor::{Decay, Init, ParamId, ParamRegistry, Tape, Tensor, Var};

/// Row of the special table holding each token.
pub const MASK_ROW: usize = 0;
pub const CLS_ROW: usize = 1;
pub const MISSING_ROW: usize = 2;
pub const PAD_ROW: usize = 3;
pub const SPECIAL_ROWS: usize = 4;

static CLAMPED: AtomicU64 = AtomicU64::new(0);

/// Number of out-of-range values clamped by [`freq_encode`] so far.
pub fn clamped_count() -> u64 {
    CLAMPED.load(Ordering::Relaxed)
}

/// `(sin(2⁰πv), cos(2⁰πv), …, sin(2^{L−1}πv), cos(2^{L−1}πv))`.
///
/// `v` is expected in `[0, 1]`; anything else is clamped and counted.
pub fn freq_encode(v: f64, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * l];
    freq_encode_into(v, &mut out);
    out
}

fn freq_encode_into(v: f64, out: &mut [f64]) {
    let v = if (0.0..=1.0).contains(&v) {
        v
    } else {
        CLAMPED.fetch_add(1, Ordering::Relaxed);
        log::warn!("frequency encoding input {v} outside [0, 1]; clamped");
        if v.is_nan() {
            0.0
        } else {
            v.clamp(0.0, 1.0)
        }
    };
    let mut freq = core::f64::consts::PI;
    for pair in out.chunks_exact_mut(2) {
        pair[0] = libm::sin(freq * v);
        pair[1] = libm::cos(freq * v);
        freq *= 2.0;
    }
}

/// Min-max normalization; a zero-width range maps everything to 0.
pub fn minmax(v: f64, range: (f64, f64)) -> f64 {
    let width = range.1 - range.0;
    if width > 0.0 {
        (v - range.0) / width
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericInput {
    /// Frequency encoding followed by a linear layer.
    #[default]
    Frequency,
    /// Values replaced by a coarse bin index and looked up in a table.
    Binned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TimePart {
    Year,
    Month,
    Day,
    Hour,
}

impl TimePart {
    pub fn suffix(self) -> &'static str {
        match self {
            TimePart::Year => "year",
            TimePart::Month => "month",
            TimePart::Day => "day",
            TimePart::Hour => "hour",
        }
    }
}

/// Zero-based categorical indices of a timestamp: year (unseen years map
/// to `years.len()`), month, day and, when `with_hour`, hour.
pub fn split_timestamp(ts: &Timestamp, years: &[i32], with_hour: bool) -> Vec<FieldValue> {
    let year = years.iter().position(|&y| y == ts.year).unwrap_or(years.len());
    let mut out = vec![
        FieldValue::Cat(year),
        FieldValue::Cat(ts.month as usize - 1),
        FieldValue::Cat(ts.day as usize - 1),
    ];
    if with_hour {
        out.push(ts.hour.map_or(FieldValue::Missing, |h| FieldValue::Cat(h as usize)));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum SlotInput {
    /// Categorical index into a table of `size` rows.
    Lookup { size: usize },
    /// Numerical value quantized by `edges` into a table.
    Binned { edges: Vec<f64>, range: (f64, f64) },
    /// Numerical value normalized by `range` and frequency encoded.
    Frequency { range: (f64, f64) },
}

#[derive(Clone, Debug, PartialEq)]
pub enum SlotTarget {
    Class {
        size: usize,
    },
    /// Quantized numerical target; `range` gives the regression scale.
    Bins {
        edges: Vec<f64>,
        range: (f64, f64),
    },
}

impl SlotTarget {
    pub fn classes(&self) -> usize {
        match self {
            SlotTarget::Class { size } => *size,
            SlotTarget::Bins { edges, .. } => edges.len() - 1,
        }
    }
}

/// One model field. Timestamps expand into several slots; every other
/// attribute is one slot shared by all row types that list it.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: String,
    pub attribute: String,
    pub part: Option<TimePart>,
    pub input: SlotInput,
    pub target: SlotTarget,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SlotValue {
    Cat(usize),
    Num(f64),
    Missing,
}

/// Slot structure of a schema after timestamp expansion.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldLayout {
    pub slots: Vec<Slot>,
    /// Slot indices of each row type (index `type_id - 1`), in field order.
    pub by_type: Vec<Vec<usize>>,
    /// Positions within each row type that belong to the timestamp.
    pub timestamp_positions: Vec<Vec<usize>>,
    pub numeric_input: NumericInput,
}

/// Keeps `count + 1` of `edges`, spread evenly by index.
fn coarsen_edges(edges: &[f64], count: usize) -> Vec<f64> {
    let q = edges.len() - 1;
    if q <= count {
        return edges.to_vec();
    }
    (0..=count).map(|i| edges[(i * q + count / 2) / count]).collect()
}

impl FieldLayout {
    /// `binned_bins` is the input table size of binned numerical slots.
    pub fn new(schema: &Schema, numeric_input: NumericInput, binned_bins: usize) -> Result<Self> {
        let mut slots: Vec<Slot> = Vec::new();
        let mut by_type = Vec::new();
        let mut timestamp_positions = Vec::new();
        for rt in &schema.row_types {
            let mut ids = Vec::new();
            let mut ts_pos = Vec::new();
            for name in &rt.attributes {
                let attr = schema.attribute(name)?;
                let expanded: Vec<(String, Option<TimePart>, SlotInput, SlotTarget)> = match &attr.kind {
                    AttributeKind::Categorical { vocab } => vec![(
                        name.clone(),
                        None,
                        SlotInput::Lookup { size: vocab.len() },
                        SlotTarget::Class { size: vocab.len() },
                    )],
                    AttributeKind::Numerical { bin_edges, value_range } => {
                        let input = match numeric_input {
                            NumericInput::Frequency => SlotInput::Frequency { range: *value_range },
                            NumericInput::Binned => SlotInput::Binned {
                                edges: coarsen_edges(bin_edges, binned_bins),
                                range: *value_range,
                            },
                        };
                        vec![(
                            name.clone(),
                            None,
                            input,
                            SlotTarget::Bins {
                                edges: bin_edges.clone(),
                                range: *value_range,
                            },
                        )]
                    }
                    AttributeKind::Timestamp { years, with_hour } => {
                        let mut parts = vec![
                            (TimePart::Year, years.len() + 1),
                            (TimePart::Month, 12),
                            (TimePart::Day, 31),
                        ];
                        if *with_hour {
                            parts.push((TimePart::Hour, 24));
                        }
                        parts
                            .into_iter()
                            .map(|(p, size)| {
                                (
                                    format!("{name}.{}", p.suffix()),
                                    Some(p),
                                    SlotInput::Lookup { size },
                                    SlotTarget::Class { size },
                                )
                            })
                            .collect()
                    }
                };
                for (slot_name, part, input, target) in expanded {
                    if part.is_some() {
                        ts_pos.push(ids.len());
                    }
                    let idx = match slots.iter().position(|s| s.name == slot_name) {
                        Some(i) => i,
                        None => {
                            slots.push(Slot {
                                name: slot_name,
                                attribute: name.clone(),
                                part,
                                input,
                                target,
                            });
                            slots.len() - 1
                        }
                    };
                    ids.push(idx);
                }
            }
            by_type.push(ids);
            timestamp_positions.push(ts_pos);
        }
        Ok(FieldLayout {
            slots,
            by_type,
            timestamp_positions,
            numeric_input,
        })
    }

    pub fn n_types(&self) -> usize {
        self.by_type.len()
    }

    /// Field count `k_h` of a row type after timestamp expansion.
    pub fn arity(&self, type_id: u32) -> Result<usize> {
        self.type_slots(type_id).map(|s| s.len())
    }

    pub fn type_slots(&self, type_id: u32) -> Result<&[usize]> {
        type_id
            .checked_sub(1)
            .and_then(|i| self.by_type.get(i as usize))
            .map(|v| v.as_slice())
            .ok_or(Error::UnknownRowType(type_id))
    }

    /// Slot values of a row, timestamps expanded.
    pub fn slot_values(&self, row: &Row, schema: &Schema) -> Result<Vec<SlotValue>> {
        let rt = schema.row_type(row.type_id)?;
        if rt.attributes.len() != row.values.len() {
            return Err(Error::Schema(format!(
                "row of type {} has {} values, expected {}",
                row.type_id,
                row.values.len(),
                rt.attributes.len()
            )));
        }
        let mut out = Vec::with_capacity(self.arity(row.type_id)?);
        for (name, value) in rt.attributes.iter().zip(&row.values) {
            let attr = schema.attribute(name)?;
            match (&attr.kind, value) {
                (AttributeKind::Timestamp { years, with_hour }, FieldValue::Time(ts)) => {
                    out.extend(split_timestamp(ts, years, *with_hour).into_iter().map(|v| match v {
                        FieldValue::Cat(c) => SlotValue::Cat(c),
                        _ => SlotValue::Missing,
                    }));
                }
                (AttributeKind::Timestamp { with_hour, .. }, FieldValue::Missing) => {
                    out.extend((0..3 + *with_hour as usize).map(|_| SlotValue::Missing));
                }
                (AttributeKind::Categorical { vocab }, FieldValue::Cat(c)) if *c < vocab.len() => {
                    out.push(SlotValue::Cat(*c))
                }
                (AttributeKind::Numerical { .. }, FieldValue::Num(v)) if v.is_finite() => out.push(SlotValue::Num(*v)),
                (_, FieldValue::Missing) => out.push(SlotValue::Missing),
                _ => {
                    return Err(Error::Schema(format!(
                        "value {value:?} does not fit attribute `{name}`"
                    )));
                }
            }
        }
        Ok(out)
    }
}

/// Embedding parameters of every slot plus the shared special vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    pub d: usize,
    /// Frequency count `L`.
    pub frequencies: usize,
    tables: Vec<Option<ParamId>>,
    projections: Vec<Option<(ParamId, ParamId)>>,
    special: ParamId,
}

impl EmbeddingBank {
    /// Registers `emb.<slot>.table`, `emb.<slot>.w`/`.b` and `emb.special`
    /// with Gaussian tables of standard deviation `init_std`.
    pub fn new(
        layout: &FieldLayout,
        d: usize,
        frequencies: usize,
        init_std: f64,
        registry: &mut dyn ParamRegistry,
    ) -> Result<Self> {
        if frequencies == 0 || d == 0 {
            return Err(Error::Config(
                "embedding width and frequency count must be positive".into(),
            ));
        }
        let mut tables = Vec::new();
        let mut projections = Vec::new();
        for slot in &layout.slots {
            let rows = match &slot.input {
                SlotInput::Lookup { size } => Some(*size),
                SlotInput::Binned { edges, .. } => Some(edges.len() - 1),
                SlotInput::Frequency { .. } => None,
            };
            match rows {
                Some(rows) => {
                    let name = format!("emb.{}.table", slot.name);
                    tables.push(Some(registry.register(
                        name,
                        &[rows, d],
                        Init::DistinctRows(init_std),
                        Decay::Full,
                    )?));
                    projections.push(None);
                }
                None => {
                    let w = registry.register(
                        format!("emb.{}.w", slot.name),
                        &[2 * frequencies, d],
                        Init::Normal(init_std),
                        Decay::Full,
                    )?;
                    let b = registry.register(format!("emb.{}.b", slot.name), &[d], Init::Zeros, Decay::Full)?;
                    tables.push(None);
                    projections.push(Some((w, b)));
                }
            }
        }
        let special = registry.register(
            "emb.special".into(),
            &[SPECIAL_ROWS, d],
            Init::DistinctRows(init_std),
            Decay::ExceptRow(PAD_ROW),
        )?;
        Ok(EmbeddingBank {
            d,
            frequencies,
            tables,
            projections,
            special,
        })
    }

    /// Closed-form parameter count of [`EmbeddingBank::new`].
    pub fn parameter_count(layout: &FieldLayout, d: usize, frequencies: usize) -> usize {
        let slots: usize = layout
            .slots
            .iter()
            .map(|s| match &s.input {
                SlotInput::Lookup { size } => size * d,
                SlotInput::Binned { edges, .. } => (edges.len() - 1) * d,
                SlotInput::Frequency { .. } => 2 * frequencies * d + d,
            })
            .sum();
        slots + SPECIAL_ROWS * d
    }

    pub fn special(&self) -> ParamId {
        self.special
    }

    pub fn table(&self, slot: usize) -> Option<ParamId> {
        self.tables[slot]
    }

    pub fn projection(&self, slot: usize) -> Option<(ParamId, ParamId)> {
        self.projections[slot]
    }

    /// Embeds `R` rows sharing the slot list `slots`.
    ///
    /// `values` and `masked` are row-major `[R, k]`; the result is
    /// `[R, k, d]`. Masked fields use the `[MASK]` vector whatever their
    /// value and missing ones the `[MISSING]` vector.
    pub fn embed_block(
        &self,
        tape: &mut Tape<'_>,
        layout: &FieldLayout,
        slots: &[usize],
        values: &[SlotValue],
        masked: &[bool],
    ) -> Result<Var> {
        let k = slots.len();
        if k == 0 || values.len() % k != 0 || masked.len() != values.len() || values.is_empty() {
            return Err(Error::Length(format!(
                "embed_block: {} slots, {} values, {} mask flags",
                k,
                values.len(),
                masked.len()
            )));
        }
        let rows = values.len() / k;
        let special = tape.param(self.special);
        let mut columns = Vec::with_capacity(k);
        for (j, &s) in slots.iter().enumerate() {
            let slot = &layout.slots[s];
            let column = (0..rows).map(|r| (&values[r * k + j], masked[r * k + j]));
            let col = match &slot.input {
                SlotInput::Lookup { size } => {
                    let mut ids = Vec::with_capacity(rows);
                    for (v, m) in column {
                        ids.push(match (m, v) {
                            (true, _) => size + MASK_ROW,
                            (false, SlotValue::Missing) => size + MISSING_ROW,
                            (false, SlotValue::Cat(c)) if c < size => *c,
                            _ => return Err(slot_mismatch(slot, v)),
                        });
                    }
                    let table = tape.param(self.tables[s].expect("lookup slot has a table"));
                    let combined = tape.concat(&[table, special], 0)?;
                    tape.gather(combined, &ids)?
                }
                SlotInput::Binned { edges, .. } => {
                    let size = edges.len() - 1;
                    let mut ids = Vec::with_capacity(rows);
                    for (v, m) in column {
                        ids.push(match (m, v) {
                            (true, _) => size + MASK_ROW,
                            (false, SlotValue::Missing) => size + MISSING_ROW,
                            (false, SlotValue::Num(x)) => quantize_edges(*x, edges),
                            _ => return Err(slot_mismatch(slot, v)),
                        });
                    }
                    let table = tape.param(self.tables[s].expect("binned slot has a table"));
                    let combined = tape.concat(&[table, special], 0)?;
                    tape.gather(combined, &ids)?
                }
                SlotInput::Frequency { range } => {
                    let width = 2 * self.frequencies;
                    let mut features = vec![0.0; rows * width];
                    let mut ids = Vec::with_capacity(rows);
                    for (r, (v, m)) in column.enumerate() {
                        ids.push(match (m, v) {
                            (true, _) => rows + MASK_ROW,
                            (false, SlotValue::Missing) => rows + MISSING_ROW,
                            (false, SlotValue::Num(x)) => {
                                freq_encode_into(minmax(*x, *range), &mut features[r * width..(r + 1) * width]);
                                r
                            }
                            _ => return Err(slot_mismatch(slot, v)),
                        });
                    }
                    let (w, b) = self.projections[s].expect("frequency slot has a projection");
                    let features = tape.constant(Tensor::new(vec![rows, width], features)?);
                    let w = tape.param(w);
                    let b = tape.param(b);
                    let projected = tape.matmul(features, w)?;
                    let projected = tape.add(projected, b)?;
                    let combined = tape.concat(&[projected, special], 0)?;
                    tape.gather(combined, &ids)?
                }
            };
            columns.push(col);
        }
        let flat = if columns.len() == 1 {
            columns[0]
        } else {
            tape.concat(&columns, 1)?
        };
        tape.reshape(flat, &[rows, k, self.d])
    }

    /// Embedding `[d]` of a single field.
    pub fn embed_field(
        &self,
        tape: &mut Tape<'_>,
        layout: &FieldLayout,
        slot: usize,
        value: &SlotValue,
        masked: bool,
    ) -> Result<Var> {
        let block = self.embed_block(tape, layout, &[slot], core::slice::from_ref(value), &[masked])?;
        tape.reshape(block, &[self.d])
    }

    /// Embeddings `[k_h, d]` of one row; `mask_flags` has one flag per
    /// expanded field.
    pub fn embed_row(
        &self,
        tape: &mut Tape<'_>,
        layout: &FieldLayout,
        schema: &Schema,
        row: &Row,
        mask_flags: &[bool],
    ) -> Result<Var> {
        let values = layout.slot_values(row, schema)?;
        let slots = layout.type_slots(row.type_id)?;
        let block = self.embed_block(tape, layout, slots, &values, mask_flags)?;
        tape.reshape(block, &[slots.len(), self.d])
    }
}

fn slot_mismatch(slot: &Slot, v: &SlotValue) -> Error {
    Error::Schema(format!("value {v:?} does not fit slot `{}`", slot.name))
}

impl core::fmt::Display for TimePart {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.suffix())
    }
}

impl Slot {
    pub fn is_numerical(&self) -> bool {
        matches!(self.target, SlotTarget::Bins { .. })
    }

    /// Class index of an observed value as a prediction target.
    pub fn target_class(&self, value: &SlotValue) -> Option<usize> {
        match (&self.target, value) {
            (SlotTarget::Class { size }, SlotValue::Cat(c)) if c < size => Some(*c),
            (SlotTarget::Bins { edges, .. }, SlotValue::Num(v)) => Some(quantize_edges(*v, edges)),
            _ => None,
        }
    }

    /// Normalized value of a numerical target.
    pub fn target_scalar(&self, value: &SlotValue) -> Option<f64> {
        match (&self.target, value) {
            (SlotTarget::Bins { range, .. }, SlotValue::Num(v)) => Some(minmax(*v, *range).clamp(0.0, 1.0)),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::schema::{AttributeSpec, RowTypeSpec, OOV};
    use crate::tensor::{ensure_distinct_rows, Allocating, ParamStore};

    const EPS: f64 = 1e-15;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn freq_encode_examples() {
        assert_eq!(freq_encode(0.0, 2), vec![0.0, 1.0, 0.0, 1.0]);
        assert!(close(&freq_encode(0.5, 1), &[1.0, 0.0], 1e-15));
        let h = core::f64::consts::FRAC_1_SQRT_2;
        assert!(close(&freq_encode(0.25, 2), &[h, h, 1.0, 0.0], 1e-15));
        let before = clamped_count();
        assert_eq!(freq_encode(1.5, 1), freq_encode(1.0, 1));
        assert!(clamped_count() > before);
    }

    #[test]
    fn split_timestamp_examples() {
        let years = [2019, 2020, 2021];
        let ts = Timestamp::date(2021, 3, 7);
        assert_eq!(
            split_timestamp(&ts, &years, false),
            vec![FieldValue::Cat(2), FieldValue::Cat(2), FieldValue::Cat(6)]
        );
        let with_hour = split_timestamp(&ts.with_hour(13), &years, true);
        assert_eq!(with_hour.len(), 4);
        assert_eq!(with_hour[3], FieldValue::Cat(13));
        assert_eq!(
            split_timestamp(&Timestamp::date(1999, 1, 1), &years, false)[0],
            FieldValue::Cat(3)
        );
    }

    fn schema() -> Schema {
        Schema::new(
            vec![
                AttributeSpec::timestamp("ts", vec![2020, 2021], true),
                AttributeSpec::categorical("site", vec!["a".into(), "b".into(), OOV.into()]),
                AttributeSpec::numerical("x", vec![0.0, 1.0, 2.0, 4.0], (0.0, 4.0)),
            ],
            vec![
                RowTypeSpec {
                    type_id: 1,
                    attributes: vec!["ts".into(), "site".into(), "x".into()],
                },
                RowTypeSpec {
                    type_id: 2,
                    attributes: vec!["x".into()],
                },
            ],
        )
        .unwrap()
    }

    fn bank(layout: &FieldLayout, store: &mut ParamStore) -> EmbeddingBank {
        let mut rng = seeded(1);
        let bank = EmbeddingBank::new(layout, 4, 3, 0.5, &mut Allocating { store, rng: &mut rng }).unwrap();
        assert_eq!(store.numel(), EmbeddingBank::parameter_count(layout, 4, 3));
        bank
    }

    fn row(cat: usize, x: f64) -> Row {
        Row {
            type_id: 1,
            values: vec![
                FieldValue::Time(Timestamp::date(2021, 5, 2).with_hour(8)),
                FieldValue::Cat(cat),
                FieldValue::Num(x),
            ],
        }
    }

    #[test]
    fn layout_expands_timestamps_and_shares_slots() {
        let s = schema();
        let layout = FieldLayout::new(&s, NumericInput::Frequency, 17).unwrap();
        assert_eq!(layout.arity(1).unwrap(), 6);
        assert_eq!(layout.arity(2).unwrap(), 1);
        assert_eq!(layout.timestamp_positions[0], vec![0, 1, 2, 3]);
        assert_eq!(layout.by_type[1], vec![layout.by_type[0][5]]);
        assert_eq!(layout.slots[0].name, "ts.year");
        assert_eq!(layout.slots[0].target.classes(), 3);
        assert!(matches!(layout.arity(3), Err(Error::UnknownRowType(3))));
    }

    #[test]
    fn embed_field_examples() {
        let s = schema();
        let layout = FieldLayout::new(&s, NumericInput::Frequency, 17).unwrap();
        let mut store = ParamStore::new();
        let bank = bank(&layout, &mut store);
        let mut tape = Tape::with_params(&store);

        let site = layout.by_type[0][4];
        let v = bank
            .embed_field(&mut tape, &layout, site, &SlotValue::Cat(1), false)
            .unwrap();
        let table = store.get(bank.table(site).unwrap());
        assert_eq!(tape.value(v).data(), table.row(1));

        let x = layout.by_type[0][5];
        let v = bank
            .embed_field(&mut tape, &layout, x, &SlotValue::Num(0.0), false)
            .unwrap();
        let (w, b) = bank.projection(x).unwrap();
        let enc = freq_encode(0.0, 3);
        let mut expected = store.get(b).data().to_vec();
        for (i, e) in enc.iter().enumerate() {
            for (o, wv) in expected.iter_mut().zip(store.get(w).row(i)) {
                *o += e * wv;
            }
        }
        assert!(close(tape.value(v).data(), &expected, EPS));

        let special = store.get(bank.special());
        for slot in [site, x, 0] {
            let v = bank
                .embed_field(&mut tape, &layout, slot, &SlotValue::Missing, false)
                .unwrap();
            assert_eq!(tape.value(v).data(), special.row(MISSING_ROW));
            let v = bank
                .embed_field(&mut tape, &layout, slot, &SlotValue::Missing, true)
                .unwrap();
            assert_eq!(tape.value(v).data(), special.row(MASK_ROW));
        }
        let err = bank.embed_field(&mut tape, &layout, x, &SlotValue::Cat(0), false);
        assert!(matches!(err, Err(Error::Schema(_))));
    }

    #[test]
    fn embed_row_composes_fields() {
        let s = schema();
        let layout = FieldLayout::new(&s, NumericInput::Frequency, 17).unwrap();
        let mut store = ParamStore::new();
        let bank = bank(&layout, &mut store);
        let mut tape = Tape::with_params(&store);
        let r = row(0, 3.0);
        let whole = bank.embed_row(&mut tape, &layout, &s, &r, &[false; 6]).unwrap();
        assert_eq!(tape.shape(whole), &[6, 4]);
        let values = layout.slot_values(&r, &s).unwrap();
        for (j, (&slot, v)) in layout.by_type[0].iter().zip(&values).enumerate() {
            let f = bank.embed_field(&mut tape, &layout, slot, v, false).unwrap();
            assert_eq!(&tape.value(whole).data()[j * 4..(j + 1) * 4], tape.value(f).data());
        }
        let all = bank.embed_row(&mut tape, &layout, &s, &r, &[true; 6]).unwrap();
        let mask = store.get(bank.special()).row(MASK_ROW).to_vec();
        for chunk in tape.value(all).data().chunks(4) {
            assert_eq!(chunk, mask.as_slice());
        }
    }

    #[test]
    fn equal_normalized_values_embed_identically() {
        let s = schema();
        let layout = FieldLayout::new(&s, NumericInput::Frequency, 17).unwrap();
        let mut store = ParamStore::new();
        let bank = bank(&layout, &mut store);
        let mut tape = Tape::with_params(&store);
        let x = layout.by_type[1][0];
        let a = bank
            .embed_field(&mut tape, &layout, x, &SlotValue::Num(2.5), false)
            .unwrap();
        let b = bank
            .embed_field(&mut tape, &layout, x, &SlotValue::Num(2.5), false)
            .unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn binned_input_uses_coarse_table() {
        let s = schema();
        let layout = FieldLayout::new(&s, NumericInput::Binned, 2).unwrap();
        let x = layout.by_type[1][0];
        match &layout.slots[x].input {
            SlotInput::Binned { edges, .. } => assert_eq!(edges.len(), 3),
            other => panic!("{other:?}"),
        }
        let mut store = ParamStore::new();
        let bank = bank(&layout, &mut store);
        let mut tape = Tape::with_params(&store);
        let v = bank
            .embed_field(&mut tape, &layout, x, &SlotValue::Num(3.5), false)
            .unwrap();
        assert_eq!(tape.value(v).data(), store.get(bank.table(x).unwrap()).row(1));
    }

    #[test]
    fn coarsen_keeps_extremes() {
        let edges: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let c = coarsen_edges(&edges, 17);
        assert_eq!(c.len(), 18);
        assert_eq!(c[0], 0.0);
        assert_eq!(c[17], 100.0);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn tables_have_distinct_rows() {
        let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        assert!(ensure_distinct_rows(&t, "t").is_err());
    }
}
