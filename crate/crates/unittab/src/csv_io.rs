//! Tabular time series as CSV: one line per table row, grouped into series
//! by an entity column.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use serde::Serialize;
use unittab_core::schema::{AttributeKind, AttributeSpec, FieldValue, Label, Row, Schema, TimeSeries, Timestamp, OOV};

use crate::error::{Error, Result};

/// Names of the non-attribute columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvColumns {
    pub entity: String,
    /// Row type id; may be absent from files of single-type schemas.
    pub row_type: String,
    /// Per-row regression target; optional.
    pub target: String,
    /// Entity label repeated on every row; optional.
    pub label: String,
}

impl Default for CsvColumns {
    fn default() -> Self {
        CsvColumns {
            entity: "entity".into(),
            row_type: "type".into(),
            target: "target".into(),
            label: "label".into(),
        }
    }
}

/// Cells that did not make it into the series as values.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ReadReport {
    pub rows: usize,
    pub entities: usize,
    /// Empty cells per attribute.
    pub missing: BTreeMap<String, usize>,
    /// Cells that failed to parse (read as missing) per attribute.
    pub unparseable: BTreeMap<String, usize>,
}

impl ReadReport {
    pub fn missing_total(&self) -> usize {
        self.missing.values().sum()
    }

    pub fn unparseable_total(&self) -> usize {
        self.unparseable.values().sum()
    }
}

pub fn format_timestamp(ts: &Timestamp) -> String {
    match ts.hour {
        Some(h) => format!("{:04}-{:02}-{:02}T{:02}:00:00", ts.year, ts.month, ts.day, h),
        None => format!("{:04}-{:02}-{:02}", ts.year, ts.month, ts.day),
    }
}

/// ISO-8601 date or date-time; minutes and seconds are dropped.
pub fn parse_timestamp(text: &str, with_hour: bool) -> Option<Timestamp> {
    let text = text.trim();
    let datetime = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ]
    .iter()
    .find_map(|f| NaiveDateTime::parse_from_str(text, f).ok());
    let (date, hour) = match datetime {
        Some(dt) => (dt.date(), Some(dt.hour() as u8)),
        None => (NaiveDate::parse_from_str(text, "%Y-%m-%d").ok()?, None),
    };
    let ts = Timestamp::date(date.year(), date.month() as u8, date.day() as u8);
    Some(match (with_hour, hour) {
        (true, Some(h)) => ts.with_hour(h),
        (true, None) => ts.with_hour(0),
        (false, _) => ts,
    })
}

fn format_value(value: &FieldValue, spec: &AttributeSpec) -> Result<String> {
    Ok(match (value, &spec.kind) {
        (FieldValue::Missing, _) => String::new(),
        (FieldValue::Cat(i), AttributeKind::Categorical { vocab }) => vocab
            .get(*i)
            .cloned()
            .ok_or_else(|| Error::Format(format!("category {i} outside the vocabulary of `{}`", spec.name)))?,
        (FieldValue::Num(v), AttributeKind::Numerical { .. }) => format!("{v}"),
        (FieldValue::Time(t), AttributeKind::Timestamp { .. }) => format_timestamp(t),
        (v, _) => {
            return Err(Error::Format(format!(
                "value {v:?} does not fit attribute `{}`",
                spec.name
            )))
        }
    })
}

fn format_label(label: &Label) -> String {
    match label {
        Label::Binary(b) => (*b as u8).to_string(),
        Label::Real(v) => format!("{v}"),
    }
}

/// Writes every series with the full attribute set as columns (sorted by
/// name). Cells of attributes a row's type lacks are left empty.
pub fn write_csv<W: Write>(writer: W, schema: &Schema, series: &[TimeSeries]) -> Result<()> {
    let cols = CsvColumns::default();
    let has_target = series.iter().any(|s| !s.row_targets.is_empty());
    let has_label = series.iter().any(|s| s.label.is_some());
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec![cols.entity.clone(), cols.row_type.clone()];
    if has_target {
        header.push(cols.target.clone());
    }
    if has_label {
        header.push(cols.label.clone());
    }
    header.extend(schema.attributes.keys().cloned());
    out.write_record(&header)?;
    for s in series {
        let label = s.label.as_ref().map(format_label).unwrap_or_default();
        for (i, row) in s.rows.iter().enumerate() {
            let rt = schema.row_type(row.type_id)?;
            let mut record = vec![s.entity_id.clone(), row.type_id.to_string()];
            if has_target {
                record.push(s.row_targets.get(i).map(|t| format!("{t}")).unwrap_or_default());
            }
            if has_label {
                record.push(label.clone());
            }
            for (name, spec) in &schema.attributes {
                let cell = match rt.attributes.iter().position(|a| a == name) {
                    Some(j) => format_value(&row.values[j], spec)?,
                    None => String::new(),
                };
                record.push(cell);
            }
            out.write_record(&record)?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

fn parse_value(cell: &str, spec: &AttributeSpec) -> Option<FieldValue> {
    match &spec.kind {
        AttributeKind::Categorical { .. } => spec
            .category_index(cell)
            .or_else(|| spec.category_index(OOV))
            .map(FieldValue::Cat),
        AttributeKind::Numerical { .. } => cell
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(FieldValue::Num),
        AttributeKind::Timestamp { with_hour, .. } => parse_timestamp(cell, *with_hour).map(FieldValue::Time),
    }
}

fn parse_label(cell: &str) -> Option<Label> {
    match cell.trim() {
        "" => None,
        "0" | "false" => Some(Label::Binary(false)),
        "1" | "true" => Some(Label::Binary(true)),
        other => other.parse::<f64>().ok().map(Label::Real),
    }
}

struct Building {
    rows: Vec<Row>,
    targets: Vec<f64>,
    label: Option<Label>,
}

/// Reads series from CSV. Rows are grouped by entity (in order of first
/// appearance) and sorted by their timestamp. Empty cells become
/// `Missing`; so do unparseable cells, which are counted separately and
/// make the read fail when they exceed half of a column.
pub fn read_csv<R: Read>(reader: R, schema: &Schema, cols: &CsvColumns) -> Result<(Vec<TimeSeries>, ReadReport)> {
    let mut input = csv::Reader::from_reader(reader);
    let header: Vec<String> = input.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let entity_col =
        find(&cols.entity).ok_or_else(|| Error::Format(format!("missing entity column `{}`", cols.entity)))?;
    let type_col = find(&cols.row_type);
    let target_col = find(&cols.target);
    let label_col = find(&cols.label);
    let reserved = [Some(entity_col), type_col, target_col, label_col];
    let mut attr_cols = BTreeMap::new();
    for (i, h) in header.iter().enumerate() {
        if reserved.contains(&Some(i)) {
            continue;
        }
        if !schema.attributes.contains_key(h) {
            return Err(Error::Format(format!("column `{h}` is not an attribute of the schema")));
        }
        attr_cols.insert(h.as_str(), i);
    }
    if let Some(absent) = schema.attributes.keys().find(|a| !attr_cols.contains_key(a.as_str())) {
        return Err(Error::Format(format!("attribute `{absent}` has no column")));
    }
    if type_col.is_none() && schema.row_types.len() != 1 {
        return Err(Error::Format(format!("missing row type column `{}`", cols.row_type)));
    }

    let mut report = ReadReport::default();
    let mut present: BTreeMap<String, usize> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Building> = BTreeMap::new();
    for (line, record) in input.records().enumerate() {
        let record = record?;
        let at = |i: usize| record.get(i).unwrap_or("");
        let line = line + 2;
        let type_id = match type_col {
            Some(c) => at(c)
                .trim()
                .parse::<u32>()
                .map_err(|_| Error::Format(format!("line {line}: bad row type `{}`", at(c))))?,
            None => schema.row_types[0].type_id,
        };
        let rt = schema.row_type(type_id)?;
        let mut values = Vec::with_capacity(rt.attributes.len());
        for name in &rt.attributes {
            let cell = at(attr_cols[name.as_str()]);
            if cell.trim().is_empty() {
                *report.missing.entry(name.clone()).or_default() += 1;
                values.push(FieldValue::Missing);
                continue;
            }
            *present.entry(name.clone()).or_default() += 1;
            match parse_value(cell, &schema.attributes[name]) {
                Some(v) => values.push(v),
                None => {
                    *report.unparseable.entry(name.clone()).or_default() += 1;
                    values.push(FieldValue::Missing);
                }
            }
        }
        for (name, &c) in &attr_cols {
            if !rt.attributes.iter().any(|a| a == name) && !at(c).trim().is_empty() {
                return Err(Error::Format(format!(
                    "line {line}: attribute `{name}` is not part of row type {type_id}"
                )));
            }
        }
        let entity = at(entity_col).to_string();
        let group = groups.entry(entity.clone()).or_insert_with(|| {
            order.push(entity.clone());
            Building {
                rows: Vec::new(),
                targets: Vec::new(),
                label: None,
            }
        });
        if let Some(c) = target_col {
            let target = at(c)
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("line {line}: bad target `{}`", at(c))))?;
            group.targets.push(target);
        }
        if let Some(label) = label_col.and_then(|c| parse_label(at(c))) {
            if group.label.is_some_and(|l| l != label) {
                return Err(Error::Format(format!(
                    "line {line}: entity `{entity}` has conflicting labels"
                )));
            }
            group.label = Some(label);
        }
        group.rows.push(Row { type_id, values });
        report.rows += 1;
    }
    for (name, &bad) in &report.unparseable {
        if 2 * bad > present[name] {
            return Err(Error::Format(format!(
                "column `{name}`: {bad} of {} non-empty cells could not be parsed",
                present[name]
            )));
        }
    }

    let mut series = Vec::with_capacity(order.len());
    for entity in order {
        let g = groups.remove(&entity).expect("grouped");
        let key = |row: &Row| {
            schema.timestamp_of(row.type_id).and_then(|ts| {
                let rt = schema.row_type(row.type_id).ok()?;
                let j = rt.attributes.iter().position(|a| a == ts)?;
                match &row.values[j] {
                    FieldValue::Time(t) => Some(t.sort_key()),
                    _ => None,
                }
            })
        };
        let mut idx: Vec<usize> = (0..g.rows.len()).collect();
        idx.sort_by_key(|&i| key(&g.rows[i]));
        let rows = idx.iter().map(|&i| g.rows[i].clone()).collect();
        let row_targets = if g.targets.is_empty() {
            Vec::new()
        } else {
            idx.iter().map(|&i| g.targets[i]).collect()
        };
        series.push(TimeSeries {
            entity_id: entity,
            rows,
            label: g.label,
            row_targets,
        });
    }
    report.entities = series.len();
    Ok((series, report))
}
