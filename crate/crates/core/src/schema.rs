//! Data model: attributes, row types, field values and time series.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary entry that absorbs categories unseen at fit time.
pub const OOV: &str = "OOV";

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttributeKind {
    Categorical {
        /// Ordered categories; the last entry is [`OOV`] when fitted with [`fit_vocab`].
        vocab: Vec<String>,
    },
    Numerical {
        /// `q + 1` strictly increasing edges of `q` left-closed bins.
        bin_edges: Vec<f64>,
        /// `(min, max)` observed on the training split.
        value_range: (f64, f64),
    },
    Timestamp {
        /// Years observed in training; unseen years map to an extra OOV index.
        years: Vec<i32>,
        with_hour: bool,
    },
}

// Unknown keys are caught by the tagged kind: serde cannot deny them on a
// struct with a flattened field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: AttributeKind,
}

impl AttributeSpec {
    pub fn categorical(name: impl Into<String>, vocab: Vec<String>) -> Self {
        AttributeSpec {
            name: name.into(),
            kind: AttributeKind::Categorical { vocab },
        }
    }

    pub fn numerical(name: impl Into<String>, bin_edges: Vec<f64>, value_range: (f64, f64)) -> Self {
        AttributeSpec {
            name: name.into(),
            kind: AttributeKind::Numerical { bin_edges, value_range },
        }
    }

    pub fn timestamp(name: impl Into<String>, years: Vec<i32>, with_hour: bool) -> Self {
        AttributeSpec {
            name: name.into(),
            kind: AttributeKind::Timestamp { years, with_hour },
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self.kind, AttributeKind::Numerical { .. })
    }

    /// Number of quantization bins `q` (numerical attributes only).
    pub fn bin_count(&self) -> Option<usize> {
        match &self.kind {
            AttributeKind::Numerical { bin_edges, .. } => Some(bin_edges.len() - 1),
            _ => None,
        }
    }

    /// Index of `category`, falling back to the OOV entry when present.
    pub fn category_index(&self, category: &str) -> Option<usize> {
        let AttributeKind::Categorical { vocab } = &self.kind else {
            return None;
        };
        vocab
            .iter()
            .position(|c| c == category)
            .or_else(|| vocab.iter().position(|c| c == OOV))
    }

    fn check(&self) -> Result<()> {
        match &self.kind {
            AttributeKind::Categorical { vocab } => {
                if vocab.is_empty() {
                    return Err(Error::Schema(format!("`{}`: empty vocabulary", self.name)));
                }
                let mut sorted: Vec<&String> = vocab.iter().collect();
                sorted.sort();
                if sorted.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::Schema(format!("`{}`: duplicate category", self.name)));
                }
            }
            AttributeKind::Numerical { bin_edges, value_range } => {
                if bin_edges.len() < 3 {
                    return Err(Error::Schema(format!("`{}`: need at least 2 bins", self.name)));
                }
                if bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::Schema(format!(
                        "`{}`: bin edges not strictly increasing",
                        self.name
                    )));
                }
                if !(value_range.0 <= value_range.1) {
                    return Err(Error::Schema(format!("`{}`: value_range min > max", self.name)));
                }
            }
            AttributeKind::Timestamp { years, .. } => {
                if years.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Schema(format!(
                        "`{}`: years must be sorted and unique",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowTypeSpec {
    /// 1-based type id `h`.
    pub type_id: u32,
    /// Attribute names `A_h` in field order.
    pub attributes: Vec<String>,
}

/// Reserved token ids, all at or above the largest vocabulary size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecialTokens {
    pub mask: usize,
    pub cls: usize,
    pub missing: usize,
    pub pad: usize,
}

impl SpecialTokens {
    pub fn starting_at(base: usize) -> Self {
        SpecialTokens {
            mask: base,
            cls: base + 1,
            missing: base + 2,
            pad: base + 3,
        }
    }

    pub fn base(&self) -> usize {
        self.mask.min(self.cls).min(self.missing).min(self.pad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub version: u32,
    /// Keyed by attribute name; serialized in sorted order.
    pub attributes: BTreeMap<String, AttributeSpec>,
    pub row_types: Vec<RowTypeSpec>,
    pub special_tokens: SpecialTokens,
}

impl Schema {
    /// Builds and checks a schema; special tokens are placed right after the
    /// largest vocabulary (categories, timestamp parts or bins).
    pub fn new(attributes: Vec<AttributeSpec>, row_types: Vec<RowTypeSpec>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for a in attributes {
            if map.insert(a.name.clone(), a).is_some() {
                return Err(Error::Schema("duplicate attribute name".into()));
            }
        }
        let mut schema = Schema {
            version: SCHEMA_VERSION,
            attributes: map,
            row_types,
            special_tokens: SpecialTokens::starting_at(0),
        };
        schema.special_tokens = SpecialTokens::starting_at(schema.max_vocab_size());
        schema.check()?;
        Ok(schema)
    }

    fn max_vocab_size(&self) -> usize {
        self.attributes
            .values()
            .map(|a| match &a.kind {
                AttributeKind::Categorical { vocab } => vocab.len(),
                AttributeKind::Numerical { bin_edges, .. } => bin_edges.len() - 1,
                AttributeKind::Timestamp { years, .. } => (years.len() + 1).max(31),
            })
            .max()
            .unwrap_or(0)
    }

    /// Structural invariants: attribute specs, row type ids `1..=n`,
    /// known attribute names, at most one timestamp per type, special ids.
    pub fn check(&self) -> Result<()> {
        for (name, a) in &self.attributes {
            if name != &a.name {
                return Err(Error::Schema(format!("attribute key `{name}` names `{}`", a.name)));
            }
            a.check()?;
        }
        if self.row_types.is_empty() {
            return Err(Error::Schema("no row types".into()));
        }
        for (i, rt) in self.row_types.iter().enumerate() {
            if rt.type_id as usize != i + 1 {
                return Err(Error::Schema("row type ids must be 1..n in order".into()));
            }
            if rt.attributes.is_empty() {
                return Err(Error::Schema(format!("row type {} has no attributes", rt.type_id)));
            }
            let mut timestamps = 0;
            for name in &rt.attributes {
                let a = self
                    .attributes
                    .get(name)
                    .ok_or_else(|| Error::Schema(format!("row type {} lists unknown `{name}`", rt.type_id)))?;
                if matches!(a.kind, AttributeKind::Timestamp { .. }) {
                    timestamps += 1;
                }
            }
            if timestamps > 1 {
                return Err(Error::Schema(format!("row type {} has several timestamps", rt.type_id)));
            }
        }
        let st = self.special_tokens;
        let ids = [st.mask, st.cls, st.missing, st.pad];
        if ids.iter().enumerate().any(|(i, a)| ids[i + 1..].contains(a)) {
            return Err(Error::Schema("special token ids must be distinct".into()));
        }
        if st.base() < self.max_vocab_size() {
            return Err(Error::Schema("special token ids overlap a vocabulary".into()));
        }
        Ok(())
    }

    pub fn row_type(&self, type_id: u32) -> Result<&RowTypeSpec> {
        type_id
            .checked_sub(1)
            .and_then(|i| self.row_types.get(i as usize))
            .ok_or(Error::UnknownRowType(type_id))
    }

    pub fn attribute(&self, name: &str) -> Result<&AttributeSpec> {
        self.attributes
            .get(name)
            .ok_or_else(|| Error::Schema(format!("unknown attribute `{name}`")))
    }

    /// Name of the timestamp attribute of a row type, if any.
    pub fn timestamp_of(&self, type_id: u32) -> Option<&str> {
        let rt = self.row_type(type_id).ok()?;
        rt.attributes
            .iter()
            .find(|n| {
                matches!(
                    self.attributes.get(n.as_str()).map(|a| &a.kind),
                    Some(AttributeKind::Timestamp { .. })
                )
            })
            .map(|s| s.as_str())
    }
}

/// Calendar components; ranges are checked but not full calendar validity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp {
    pub year: i32,
    pub month: u8,
    pub day: u8,
    pub hour: Option<u8>,
}

impl Timestamp {
    pub fn date(year: i32, month: u8, day: u8) -> Self {
        Timestamp {
            year,
            month,
            day,
            hour: None,
        }
    }

    pub fn with_hour(mut self, hour: u8) -> Self {
        self.hour = Some(hour);
        self
    }

    pub fn in_range(&self) -> bool {
        (1..=12).contains(&self.month) && (1..=31).contains(&self.day) && self.hour.is_none_or(|h| h < 24)
    }

    /// Key used for chronological ordering (a missing hour sorts as 0).
    pub fn sort_key(&self) -> (i32, u8, u8, u8) {
        (self.year, self.month, self.day, self.hour.unwrap_or(0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FieldValue {
    Cat(usize),
    Num(f64),
    Time(Timestamp),
    Missing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub type_id: u32,
    pub values: Vec<FieldValue>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real(f64),
    Binary(bool),
}

impl Label {
    pub fn as_f64(&self) -> f64 {
        match *self {
            Label::Real(v) => v,
            Label::Binary(b) => b as u8 as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub entity_id: String,
    pub rows: Vec<Row>,
    /// Entity-level supervision (e.g. churn).
    pub label: Option<Label>,
    /// Per-row regression targets (empty when absent); a window takes the
    /// target of its last row.
    pub row_targets: Vec<f64>,
}

impl TimeSeries {
    pub fn new(entity_id: impl Into<String>, rows: Vec<Row>) -> Self {
        TimeSeries {
            entity_id: entity_id.into(),
            rows,
            label: None,
            row_targets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    EmptySeries,
    UnknownRowType(u32),
    Arity { expected: usize, found: usize },
    KindMismatch,
    CategoryOutOfRange { index: usize, size: usize },
    NonFiniteNumber,
    TimestampOutOfRange,
    OutOfOrder,
    TargetCount { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub row: Option<usize>,
    pub field: Option<String>,
    pub kind: ViolationKind,
}

/// Checks every row of `series` against its row type. An empty result
/// means the series is accepted by embedding and model code.
pub fn validate(series: &TimeSeries, schema: &Schema) -> Vec<Violation> {
    let mut out = Vec::new();
    if series.rows.is_empty() {
        out.push(Violation {
            row: None,
            field: None,
            kind: ViolationKind::EmptySeries,
        });
    }
    if !series.row_targets.is_empty() && series.row_targets.len() != series.rows.len() {
        out.push(Violation {
            row: None,
            field: None,
            kind: ViolationKind::TargetCount {
                expected: series.rows.len(),
                found: series.row_targets.len(),
            },
        });
    }
    let mut last_time: Option<Timestamp> = None;
    for (i, row) in series.rows.iter().enumerate() {
        let Ok(rt) = schema.row_type(row.type_id) else {
            out.push(Violation {
                row: Some(i),
                field: None,
                kind: ViolationKind::UnknownRowType(row.type_id),
            });
            continue;
        };
        if rt.attributes.len() != row.values.len() {
            out.push(Violation {
                row: Some(i),
                field: None,
                kind: ViolationKind::Arity {
                    expected: rt.attributes.len(),
                    found: row.values.len(),
                },
            });
            continue;
        }
        for (name, value) in rt.attributes.iter().zip(&row.values) {
            let attr = &schema.attributes[name];
            let kind = match (&attr.kind, value) {
                (_, FieldValue::Missing) => None,
                (AttributeKind::Categorical { vocab }, FieldValue::Cat(c)) => {
                    (*c >= vocab.len()).then_some(ViolationKind::CategoryOutOfRange {
                        index: *c,
                        size: vocab.len(),
                    })
                }
                (AttributeKind::Numerical { .. }, FieldValue::Num(v)) => {
                    (!v.is_finite()).then_some(ViolationKind::NonFiniteNumber)
                }
                (AttributeKind::Timestamp { .. }, FieldValue::Time(t)) => {
                    if !t.in_range() {
                        Some(ViolationKind::TimestampOutOfRange)
                    } else {
                        if last_time.is_some_and(|prev| prev.sort_key() > t.sort_key()) {
                            out.push(Violation {
                                row: Some(i),
                                field: Some(name.clone()),
                                kind: ViolationKind::OutOfOrder,
                            });
                        }
                        last_time = Some(*t);
                        None
                    }
                }
                _ => Some(ViolationKind::KindMismatch),
            };
            if let Some(kind) = kind {
                out.push(Violation {
                    row: Some(i),
                    field: Some(name.clone()),
                    kind,
                });
            }
        }
    }
    out
}

/// Bin index of `v`: `i` with `edges[i] ≤ v < edges[i+1]`, clamped into
/// `0..q`. The result is a prediction target only, never a model input
/// (except in the binned-input baseline).
pub fn quantize(v: f64, spec: &AttributeSpec) -> Result<usize> {
    match &spec.kind {
        AttributeKind::Numerical { bin_edges, .. } => Ok(quantize_edges(v, bin_edges)),
        _ => Err(Error::Schema(format!("quantize on non-numerical `{}`", spec.name))),
    }
}

pub fn quantize_edges(v: f64, edges: &[f64]) -> usize {
    let q = edges.len() - 1;
    let above = edges.partition_point(|&e| e <= v);
    above.saturating_sub(1).min(q - 1)
}

/// Empirical quantile edges at `0, 1/q, …, 1` (linear interpolation
/// between order statistics), with duplicate edges merged.
pub fn fit_bins(values: &[f64], q: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("fit_bins"));
    }
    if q < 2 {
        return Err(Error::Config("fit_bins needs q >= 2".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "fit_bins" });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if lo == hi {
        return Err(Error::DegenerateAttribute(String::new()));
    }
    let last = (sorted.len() - 1) as f64;
    let mut edges: Vec<f64> = Vec::with_capacity(q + 1);
    for i in 0..=q {
        let pos = last * i as f64 / q as f64;
        let below = libm::floor(pos) as usize;
        let frac = pos - below as f64;
        let e = if below + 1 < sorted.len() {
            sorted[below] + frac * (sorted[below + 1] - sorted[below])
        } else {
            sorted[below]
        };
        if edges.last().is_none_or(|&prev| e > prev) {
            edges.push(e);
        }
    }
    if edges.len() < 3 {
        edges = alloc::vec![lo, lo + (hi - lo) / 2.0, hi];
    }
    Ok(edges)
}

/// Categories with at least `min_count` occurrences, by descending count
/// then lexicographically, followed by [`OOV`].
pub fn fit_vocab<S: AsRef<str>>(values: &[S], min_count: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in values {
        let v = v.as_ref();
        if v != OOV {
            *counts.entry(v).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut vocab: Vec<String> = kept.into_iter().map(|(s, _)| s.to_string()).collect();
    vocab.push(OOV.to_string());
    vocab
}
