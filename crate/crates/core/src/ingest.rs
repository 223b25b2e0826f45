//! Windowing, cropping, splitting and class balancing of time series, plus
//! two synthetic generators shaped like real tabular time-series datasets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, standard_normal, Rng};
use crate::schema::{
    fit_bins, AttributeKind, AttributeSpec, FieldValue, Label, Row, RowTypeSpec, Schema, TimeSeries, Timestamp, OOV,
};

/// A contiguous run of rows cut from one series.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    pub rows: Vec<Row>,
    pub source_entity: String,
    pub label: Option<Label>,
}

impl WindowedSample {
    /// The whole series with its entity label.
    pub fn whole(series: &TimeSeries) -> Self {
        WindowedSample {
            rows: series.rows.clone(),
            source_entity: series.entity_id.clone(),
            label: series.label,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<TimeSeries>,
    pub test: Vec<TimeSeries>,
    pub validation: Option<Vec<TimeSeries>>,
    pub split_seed: u64,
}

/// Start offsets `0, stride, 2·stride, …` of windows of length `t` that fit
/// in `len` rows.
pub fn window_starts(len: usize, t: usize, stride: usize) -> Range<usize> {
    assert!(t >= 1 && stride >= 1, "window length and stride must be positive");
    let count = if len >= t { (len - t) / stride + 1 } else { 0 };
    0..count
}

/// Sliding windows of exactly `t` rows. A window's label is the per-row
/// target of its last row when the series has per-row targets, otherwise
/// the series label.
pub fn window(series: &TimeSeries, t: usize, stride: usize) -> Vec<WindowedSample> {
    window_starts(series.len(), t, stride)
        .map(|i| {
            let start = i * stride;
            let end = start + t;
            let label = if series.row_targets.len() == series.rows.len() && !series.row_targets.is_empty() {
                Some(Label::Real(series.row_targets[end - 1]))
            } else {
                series.label
            };
            WindowedSample {
                rows: series.rows[start..end].to_vec(),
                source_entity: series.entity_id.clone(),
                label,
            }
        })
        .collect()
}

/// Uniformly placed span of `min(len, t_max)` rows.
pub fn random_span(len: usize, t_max: usize, rng: &mut Rng) -> Range<usize> {
    if len <= t_max {
        return 0..len;
    }
    let start = rng.random_range(0..=len - t_max);
    start..start + t_max
}

/// The whole sample when it has at most `t_max` rows, otherwise a uniformly
/// random contiguous run of exactly `t_max` rows.
pub fn random_crop(sample: &WindowedSample, t_max: usize, rng: &mut Rng) -> WindowedSample {
    let span = random_span(sample.len(), t_max, rng);
    WindowedSample {
        rows: sample.rows[span].to_vec(),
        source_entity: sample.source_entity.clone(),
        label: sample.label,
    }
}

/// The last `min(len, t_max)` rows.
pub fn last_crop(sample: &WindowedSample, t_max: usize) -> WindowedSample {
    let start = sample.len().saturating_sub(t_max);
    WindowedSample {
        rows: sample.rows[start..].to_vec(),
        source_entity: sample.source_entity.clone(),
        label: sample.label,
    }
}

fn is_positive(s: &WindowedSample) -> Result<bool> {
    match s.label {
        Some(Label::Binary(b)) => Ok(b),
        _ => Err(Error::Balance(format!(
            "sample from `{}` has no binary label",
            s.source_entity
        ))),
    }
}

/// Duplicates randomly drawn positives until there are `ratio` positives
/// per negative, then shuffles. Negatives are kept exactly once.
pub fn balance_upsample(samples: Vec<WindowedSample>, ratio: f64, rng: &mut Rng) -> Result<Vec<WindowedSample>> {
    if !(ratio > 0.0) {
        return Err(Error::Balance(format!("ratio {ratio} must be positive")));
    }
    let mut positives = Vec::new();
    let mut negatives = 0usize;
    for (i, s) in samples.iter().enumerate() {
        if is_positive(s)? {
            positives.push(i);
        } else {
            negatives += 1;
        }
    }
    if positives.is_empty() || negatives == 0 {
        return Err(Error::Balance(format!(
            "need both classes, got {} positives and {negatives} negatives",
            positives.len()
        )));
    }
    let wanted = libm::ceil(ratio * negatives as f64) as usize;
    let extra = wanted.saturating_sub(positives.len());
    let mut out = samples;
    for _ in 0..extra {
        let pick = positives[rng.random_range(0..positives.len())];
        out.push(out[pick].clone());
    }
    out.shuffle(rng);
    Ok(out)
}

/// Splits whole entities: a seeded shuffle, then the first
/// `round(test_fraction · n)` entities form the test split.
pub fn split_by_entity(series: Vec<TimeSeries>, test_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut ids: Vec<String> = series.iter().map(|s| s.entity_id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids.shuffle(&mut seeded(seed));
    let n_test = libm::round(test_fraction * ids.len() as f64) as usize;
    let test_ids: BTreeMap<&str, ()> = ids[..n_test].iter().map(|s| (s.as_str(), ())).collect();
    let (test, train): (Vec<_>, Vec<_>) = series
        .into_iter()
        .partition(|s| test_ids.contains_key(s.entity_id.as_str()));
    Ok(DatasetSplit {
        train,
        test,
        validation: None,
        split_seed: seed,
    })
}

/// Recomputes numerical bins and ranges and timestamp years from `series`
/// (typically the training split), keeping vocabularies and row types.
pub fn refit_schema(schema: &Schema, series: &[TimeSeries], q: usize) -> Result<Schema> {
    let mut numbers: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut years: BTreeMap<&str, Vec<i32>> = BTreeMap::new();
    for s in series {
        for row in &s.rows {
            let rt = schema.row_type(row.type_id)?;
            for (name, v) in rt.attributes.iter().zip(&row.values) {
                match v {
                    FieldValue::Num(x) => numbers.entry(name.as_str()).or_default().push(*x),
                    FieldValue::Time(t) => years.entry(name.as_str()).or_default().push(t.year),
                    _ => {}
                }
            }
        }
    }
    let mut attributes = Vec::new();
    for (name, attr) in &schema.attributes {
        let kind = match &attr.kind {
            AttributeKind::Numerical { .. } => {
                let values = numbers
                    .get(name.as_str())
                    .ok_or_else(|| Error::DegenerateAttribute(name.clone()))?;
                let edges = fit_bins(values, q).map_err(|e| match e {
                    Error::DegenerateAttribute(_) => Error::DegenerateAttribute(name.clone()),
                    other => other,
                })?;
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                AttributeKind::Numerical {
                    bin_edges: edges,
                    value_range: (lo, hi),
                }
            }
            AttributeKind::Timestamp { with_hour, .. } => {
                let mut ys = years.get(name.as_str()).cloned().unwrap_or_default();
                ys.sort_unstable();
                ys.dedup();
                AttributeKind::Timestamp {
                    years: ys,
                    with_hour: *with_hour,
                }
            }
            other => other.clone(),
        };
        attributes.push(AttributeSpec {
            name: name.clone(),
            kind,
        });
    }
    Schema::new(attributes, schema.row_types.clone())
}

/// Single row type holding the union of all attributes (in order of first
/// appearance); fields a row's type lacks become `Missing`.
pub fn flatten_to_single_type(schema: &Schema, series: &[TimeSeries]) -> Result<(Schema, Vec<TimeSeries>)> {
    let mut union: Vec<String> = Vec::new();
    for rt in &schema.row_types {
        for a in &rt.attributes {
            if !union.contains(a) {
                union.push(a.clone());
            }
        }
    }
    let flat_schema = Schema::new(
        schema.attributes.values().cloned().collect(),
        vec![RowTypeSpec {
            type_id: 1,
            attributes: union.clone(),
        }],
    )?;
    let mut out = Vec::with_capacity(series.len());
    for s in series {
        let mut rows = Vec::with_capacity(s.rows.len());
        for row in &s.rows {
            let rt = schema.row_type(row.type_id)?;
            let values = union
                .iter()
                .map(|a| {
                    rt.attributes
                        .iter()
                        .position(|x| x == a)
                        .map_or(FieldValue::Missing, |i| row.values[i].clone())
                })
                .collect();
            rows.push(Row { type_id: 1, values });
        }
        out.push(TimeSeries {
            entity_id: s.entity_id.clone(),
            rows,
            label: s.label,
            row_targets: s.row_targets.clone(),
        });
    }
    Ok((flat_schema, out))
}

fn is_leap(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

pub fn days_in_month(year: i32, month: u8) -> u8 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        _ if is_leap(year) => 29,
        _ => 28,
    }
}

/// Moves a timestamp forward by `hours` (a missing hour counts as 0).
pub fn advance_hours(ts: Timestamp, hours: u64) -> Timestamp {
    let mut t = ts;
    let mut h = t.hour.unwrap_or(0) as u64 + hours;
    while h >= 24 {
        h -= 24;
        t.day += 1;
        if t.day > days_in_month(t.year, t.month) {
            t.day = 1;
            t.month += 1;
            if t.month > 12 {
                t.month = 1;
                t.year += 1;
            }
        }
    }
    t.hour = Some(h as u8);
    t
}

fn normal(rng: &mut Rng) -> f64 {
    standard_normal(rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PollutionConfig {
    pub n_entities: usize,
    pub rows: usize,
    /// Standard deviation of noise added to the target.
    pub noise: f64,
    /// Quantization bins per numerical attribute.
    pub bins: usize,
}

impl Default for PollutionConfig {
    fn default() -> Self {
        PollutionConfig {
            n_entities: 12,
            rows: 1000,
            noise: 0.1,
            bins: 100,
        }
    }
}

/// Numerical attributes of the pollution-like generator.
pub const POLLUTION_FIELDS: usize = 10;
const POLLUTION_START: Timestamp = Timestamp {
    year: 2021,
    month: 12,
    day: 20,
    hour: Some(0),
};

/// Noise-free target at time `t`, from field 0 at `t` and field 1 at `t − 1`.
pub fn pollution_target(field0_now: f64, field1_prev: f64) -> f64 {
    libm::sin(3.0 * field0_now) + 0.5 * libm::cos(2.0 * field1_prev)
}

/// One site-level categorical, ten autoregressive numerical sensors with a
/// daily cycle, and an hourly timestamp. Per-row targets follow
/// [`pollution_target`] plus Gaussian noise (the first row uses its own
/// field 1 as the previous value).
pub fn gen_pollution_like(config: &PollutionConfig, rng: &mut Rng) -> Result<(Schema, Vec<TimeSeries>)> {
    if config.n_entities == 0 || config.rows < 2 {
        return Err(Error::Config(
            "pollution generator needs entities and at least 2 rows".into(),
        ));
    }
    let base = rng.random::<u64>();
    let mut series = Vec::with_capacity(config.n_entities);
    for e in 0..config.n_entities {
        let mut r = seeded(derive_seed(base, e as u64));
        let phase: Vec<f64> = (0..POLLUTION_FIELDS)
            .map(|_| r.random::<f64>() * core::f64::consts::TAU)
            .collect();
        let amp: Vec<f64> = (0..POLLUTION_FIELDS).map(|_| 0.3 + 0.7 * r.random::<f64>()).collect();
        let phi: Vec<f64> = (0..POLLUTION_FIELDS).map(|_| 0.85 + 0.13 * r.random::<f64>()).collect();
        let offset = normal(&mut r) * 0.3;
        let mut latent = vec![0.0; POLLUTION_FIELDS];
        let mut ts = POLLUTION_START;
        let mut rows = Vec::with_capacity(config.rows);
        let mut targets = Vec::with_capacity(config.rows);
        let mut prev_field1: Option<f64> = None;
        for _ in 0..config.rows {
            let hour_angle = core::f64::consts::TAU * ts.hour.unwrap_or(0) as f64 / 24.0;
            let mut values = Vec::with_capacity(POLLUTION_FIELDS + 2);
            values.push(FieldValue::Time(ts));
            values.push(FieldValue::Cat(e % config.n_entities));
            let mut fields = [0.0; POLLUTION_FIELDS];
            for i in 0..POLLUTION_FIELDS {
                let step_sd = libm::sqrt(1.0 - phi[i] * phi[i]) * 0.6;
                latent[i] = phi[i] * latent[i] + step_sd * normal(&mut r);
                fields[i] = offset + latent[i] + amp[i] * libm::sin(hour_angle + phase[i]);
                values.push(FieldValue::Num(fields[i]));
            }
            let prev = prev_field1.unwrap_or(fields[1]);
            let noise = if config.noise > 0.0 {
                config.noise * normal(&mut r)
            } else {
                0.0
            };
            targets.push(pollution_target(fields[0], prev) + noise);
            prev_field1 = Some(fields[1]);
            rows.push(Row { type_id: 1, values });
            ts = advance_hours(ts, 1);
        }
        series.push(TimeSeries {
            entity_id: format!("site{e:03}"),
            rows,
            label: None,
            row_targets: targets,
        });
    }
    let mut attributes = vec![
        AttributeSpec::timestamp("timestamp", vec![], true),
        AttributeSpec::categorical(
            "site",
            (0..config.n_entities)
                .map(|i| format!("site{i:03}"))
                .chain([OOV.to_string()])
                .collect(),
        ),
    ];
    let mut names = vec!["timestamp".to_string(), "site".to_string()];
    for i in 0..POLLUTION_FIELDS {
        let name = format!("sensor{i}");
        attributes.push(AttributeSpec::numerical(&name, vec![0.0, 0.5, 1.0], (0.0, 1.0)));
        names.push(name);
    }
    let template = Schema::new(
        attributes,
        vec![RowTypeSpec {
            type_id: 1,
            attributes: names,
        }],
    )?;
    let schema = refit_schema(&template, &series, config.bins)?;
    Ok((schema, series))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransactionsConfig {
    pub n_entities: usize,
    pub mean_length: usize,
    /// Scales the churn probability; 0 yields no churners.
    pub churn_rate: f64,
    /// Steepness of the churn rule.
    pub churn_steepness: f64,
    pub bins: usize,
}

impl Default for TransactionsConfig {
    fn default() -> Self {
        TransactionsConfig {
            n_entities: 200,
            mean_length: 100,
            churn_rate: 0.5,
            churn_steepness: 20.0,
            bins: 50,
        }
    }
}

/// Rows per series that the churn rule looks at.
pub const CHURN_WINDOW: usize = 30;
pub const GENERIC_TYPE: u32 = 1;
pub const POS_TYPE: u32 = 2;
pub const ATM_TYPE: u32 = 3;

const CHANNELS: [&str; 3] = ["online", "branch", "card"];
const MCC: [&str; 6] = ["grocery", "fuel", "travel", "utilities", "dining", "other"];
const CITIES: [&str; 5] = ["north", "south", "east", "west", "centre"];
const ENTRY: [&str; 3] = ["chip", "contactless", "swipe"];
const MERCHANTS: usize = 20;
const LOCALITIES: usize = 8;

/// Share of ATM rows among the last [`CHURN_WINDOW`] rows.
pub fn churn_statistic(series: &TimeSeries) -> f64 {
    let start = series.rows.len().saturating_sub(CHURN_WINDOW);
    let tail = &series.rows[start..];
    tail.iter().filter(|r| r.type_id == ATM_TYPE).count() as f64 / tail.len().max(1) as f64
}

/// `min(1, 2 · rate · σ(steepness · (statistic − median)))`.
pub fn churn_probability(statistic: f64, median: f64, rate: f64, steepness: f64) -> f64 {
    let s = 1.0 / (1.0 + libm::exp(-steepness * (statistic - median)));
    (2.0 * rate * s).min(1.0)
}

/// Bank-account-like histories with generic, POS and ATM rows (5, 8 and 7
/// attributes). Each entity has its own ATM propensity and spending scale;
/// histories have variable length; the churn label is drawn from
/// [`churn_probability`] of [`churn_statistic`] against the population median.
pub fn gen_multitype_transactions(config: &TransactionsConfig, rng: &mut Rng) -> Result<(Schema, Vec<TimeSeries>)> {
    if config.n_entities == 0 || config.mean_length < 2 {
        return Err(Error::Config(
            "transaction generator needs entities and a mean length of at least 2".into(),
        ));
    }
    let base = rng.random::<u64>();
    let mut series = Vec::with_capacity(config.n_entities);
    let lo = (config.mean_length / 2).max(1);
    let hi = config.mean_length + (config.mean_length - lo);
    for e in 0..config.n_entities {
        let mut r = seeded(derive_seed(base, e as u64));
        let atm_share = 0.05 + 0.55 * r.random::<f64>();
        let pos_share = (1.0 - atm_share) * (0.4 + 0.4 * r.random::<f64>());
        let spend = 3.0 + normal(&mut r) * 0.5;
        let home_city = r.random_range(0..CITIES.len());
        let len = r.random_range(lo..=hi);
        let mut ts = Timestamp::date(2022, 1, 1).with_hour(8);
        ts = advance_hours(ts, r.random_range(0..24 * 30));
        let mut balance = libm::exp(spend + 2.0);
        let mut rows = Vec::with_capacity(len);
        for _ in 0..len {
            ts = advance_hours(ts, r.random_range(1..36));
            let u = r.random::<f64>();
            let type_id = if u < atm_share {
                ATM_TYPE
            } else if u < atm_share + pos_share {
                POS_TYPE
            } else {
                GENERIC_TYPE
            };
            let amount = libm::exp(spend + 0.8 * normal(&mut r));
            balance = (balance - amount + libm::exp(spend + 0.8 * normal(&mut r))).max(0.0);
            let channel = match type_id {
                POS_TYPE => 2,
                ATM_TYPE => 1,
                _ => r.random_range(0..CHANNELS.len()),
            };
            let mcc = r.random_range(0..MCC.len());
            let mut values = vec![
                FieldValue::Time(ts),
                FieldValue::Num(amount),
                FieldValue::Cat(channel),
                FieldValue::Cat(mcc),
                FieldValue::Num(balance),
            ];
            match type_id {
                POS_TYPE => {
                    values.push(FieldValue::Cat(r.random_range(0..MERCHANTS)));
                    let city = if r.random::<f64>() < 0.8 {
                        home_city
                    } else {
                        r.random_range(0..CITIES.len())
                    };
                    values.push(FieldValue::Cat(city));
                    values.push(FieldValue::Cat(r.random_range(0..ENTRY.len())));
                }
                ATM_TYPE => {
                    values.push(FieldValue::Cat(r.random_range(0..LOCALITIES)));
                    values.push(FieldValue::Num(0.5 + 2.5 * r.random::<f64>()));
                }
                _ => {}
            }
            rows.push(Row { type_id, values });
        }
        series.push(TimeSeries::new(format!("acct{e:05}"), rows));
    }
    let mut stats: Vec<f64> = series.iter().map(churn_statistic).collect();
    let snapshot = stats.clone();
    stats.sort_by(f64::total_cmp);
    let median = stats[stats.len() / 2];
    let mut label_rng = seeded(derive_seed(base, u64::MAX));
    for (s, stat) in series.iter_mut().zip(snapshot) {
        let p = churn_probability(stat, median, config.churn_rate, config.churn_steepness);
        let draw = label_rng.random::<f64>();
        s.label = Some(Label::Binary(draw < p));
    }

    let vocab = |names: &[&str]| {
        names
            .iter()
            .map(|s| s.to_string())
            .chain([OOV.to_string()])
            .collect::<Vec<_>>()
    };
    let numbered = |prefix: &str, n: usize| {
        (0..n)
            .map(|i| format!("{prefix}{i}"))
            .chain([OOV.to_string()])
            .collect::<Vec<_>>()
    };
    let placeholder = || (vec![0.0, 0.5, 1.0], (0.0, 1.0));
    let (edges, range) = placeholder();
    let attributes = vec![
        AttributeSpec::timestamp("timestamp", vec![], true),
        AttributeSpec::numerical("amount", edges.clone(), range),
        AttributeSpec::categorical("channel", vocab(&CHANNELS)),
        AttributeSpec::categorical("mcc", vocab(&MCC)),
        AttributeSpec::numerical("balance", edges.clone(), range),
        AttributeSpec::categorical("merchant", numbered("m", MERCHANTS)),
        AttributeSpec::categorical("city", vocab(&CITIES)),
        AttributeSpec::categorical("entry_mode", vocab(&ENTRY)),
        AttributeSpec::categorical("atm_locality", numbered("loc", LOCALITIES)),
        AttributeSpec::numerical("fee", edges, range),
    ];
    let generic: Vec<String> = ["timestamp", "amount", "channel", "mcc", "balance"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut pos = generic.clone();
    pos.extend(["merchant", "city", "entry_mode"].iter().map(|s| s.to_string()));
    let mut atm = generic.clone();
    atm.extend(["atm_locality", "fee"].iter().map(|s| s.to_string()));
    let template = Schema::new(
        attributes,
        vec![
            RowTypeSpec {
                type_id: GENERIC_TYPE,
                attributes: generic,
            },
            RowTypeSpec {
                type_id: POS_TYPE,
                attributes: pos,
            },
            RowTypeSpec {
                type_id: ATM_TYPE,
                attributes: atm,
            },
        ],
    )?;
    let schema = refit_schema(&template, &series, config.bins)?;
    Ok((schema, series))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::validate;

    fn numbered_series(n: usize) -> TimeSeries {
        let rows = (0..n)
            .map(|i| Row {
                type_id: 1,
                values: vec![FieldValue::Num(i as f64)],
            })
            .collect();
        TimeSeries::new("e", rows)
    }

    fn first_value(s: &WindowedSample) -> f64 {
        match s.rows[0].values[0] {
            FieldValue::Num(v) => v,
            _ => unreachable!(),
        }
    }

    #[test]
    fn window_examples() {
        let s = numbered_series(35);
        let starts: Vec<f64> = window(&s, 10, 5).iter().map(first_value).collect();
        assert_eq!(starts, vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0]);
        let starts: Vec<f64> = window(&s, 10, 10).iter().map(first_value).collect();
        assert_eq!(starts, vec![0.0, 10.0, 20.0]);
        assert!(window(&numbered_series(9), 10, 5).is_empty());
    }

    #[test]
    fn window_takes_last_row_target() {
        let mut s = numbered_series(12);
        s.row_targets = (0..12).map(|i| i as f64 * 10.0).collect();
        let w = window(&s, 4, 4);
        assert_eq!(w[1].label, Some(Label::Real(70.0)));
    }

    #[test]
    fn crop_examples() {
        let mut rng = seeded(0);
        let s = WindowedSample::whole(&numbered_series(30));
        assert_eq!(random_crop(&s, 50, &mut rng).len(), 30);
        let one = WindowedSample::whole(&numbered_series(1));
        assert_eq!(random_crop(&one, 5, &mut rng), one);
        let five = WindowedSample::whole(&numbered_series(5));
        let c = last_crop(&five, 3);
        assert_eq!(c.rows, five.rows[2..].to_vec());
        assert_eq!(last_crop(&WindowedSample::whole(&numbered_series(2)), 3).len(), 2);
        assert_eq!(last_crop(&five, 1).rows, five.rows[4..].to_vec());
    }

    #[test]
    fn random_crop_is_contiguous_and_sized() {
        let mut rng = seeded(1);
        let s = WindowedSample::whole(&numbered_series(200));
        for _ in 0..50 {
            let c = random_crop(&s, 150, &mut rng);
            assert_eq!(c.len(), 150);
            let start = first_value(&c);
            assert!(start <= 50.0);
            for (i, r) in c.rows.iter().enumerate() {
                assert_eq!(r.values[0], FieldValue::Num(start + i as f64));
            }
        }
    }

    fn labeled(pos: usize, neg: usize) -> Vec<WindowedSample> {
        (0..pos + neg)
            .map(|i| WindowedSample {
                rows: vec![],
                source_entity: format!("{i}"),
                label: Some(Label::Binary(i < pos)),
            })
            .collect()
    }

    #[test]
    fn balance_examples() {
        let mut rng = seeded(2);
        let out = balance_upsample(labeled(2, 6), 1.0, &mut rng).unwrap();
        assert_eq!(out.len(), 12);
        assert_eq!(out.iter().filter(|s| s.label == Some(Label::Binary(true))).count(), 6);
        let out = balance_upsample(labeled(3, 3), 1.0, &mut rng).unwrap();
        let mut ids: Vec<_> = out.iter().map(|s| s.source_entity.clone()).collect();
        ids.sort();
        assert_eq!(ids, vec!["0", "1", "2", "3", "4", "5"]);
        assert!(matches!(
            balance_upsample(labeled(0, 4), 1.0, &mut rng),
            Err(Error::Balance(_))
        ));
        let half = balance_upsample(labeled(1, 8), 0.5, &mut rng).unwrap();
        assert_eq!(half.len(), 12);
    }

    #[test]
    fn split_is_disjoint() {
        let series: Vec<TimeSeries> = (0..20)
            .map(|i| TimeSeries::new(format!("e{i}"), numbered_series(3).rows))
            .collect();
        let split = split_by_entity(series, 0.25, 9).unwrap();
        assert_eq!(split.test.len(), 5);
        assert_eq!(split.train.len(), 15);
        for t in &split.test {
            assert!(split.train.iter().all(|s| s.entity_id != t.entity_id));
        }
    }

    #[test]
    fn calendar_arithmetic() {
        let t = advance_hours(Timestamp::date(2020, 2, 28).with_hour(23), 2);
        assert_eq!(t, Timestamp::date(2020, 2, 29).with_hour(1));
        let t = advance_hours(Timestamp::date(2021, 12, 31).with_hour(23), 1);
        assert_eq!(t, Timestamp::date(2022, 1, 1).with_hour(0));
    }

    #[test]
    fn pollution_generator_shape_and_oracle() {
        let cfg = PollutionConfig {
            n_entities: 3,
            rows: 50,
            noise: 0.0,
            bins: 10,
        };
        let (schema, series) = gen_pollution_like(&cfg, &mut seeded(7)).unwrap();
        assert_eq!(series.len(), 3);
        assert_eq!(schema.row_types[0].attributes.len(), 12);
        for s in &series {
            assert_eq!(s.len(), 50);
            assert!(validate(s, &schema).is_empty());
            for t in 1..s.len() {
                let f = |row: usize, i: usize| match s.rows[row].values[2 + i] {
                    FieldValue::Num(v) => v,
                    _ => unreachable!(),
                };
                assert_eq!(s.row_targets[t], pollution_target(f(t, 0), f(t - 1, 1)));
            }
        }
        let (_, again) = gen_pollution_like(&cfg, &mut seeded(7)).unwrap();
        assert_eq!(series, again);
    }

    #[test]
    fn transaction_generator_shape() {
        let cfg = TransactionsConfig {
            n_entities: 20,
            mean_length: 40,
            ..TransactionsConfig::default()
        };
        let (schema, series) = gen_multitype_transactions(&cfg, &mut seeded(3)).unwrap();
        assert_eq!(
            schema.row_types.iter().map(|r| r.attributes.len()).collect::<Vec<_>>(),
            vec![5, 8, 7]
        );
        for s in &series {
            assert!(validate(s, &schema).is_empty(), "{:?}", validate(s, &schema));
            assert!((20..=60).contains(&s.len()));
        }
        let zero = TransactionsConfig { churn_rate: 0.0, ..cfg };
        let (_, series) = gen_multitype_transactions(&zero, &mut seeded(3)).unwrap();
        assert!(series.iter().all(|s| s.label == Some(Label::Binary(false))));
    }

    #[test]
    fn flattening_fills_missing() {
        let cfg = TransactionsConfig {
            n_entities: 3,
            mean_length: 10,
            ..TransactionsConfig::default()
        };
        let (schema, series) = gen_multitype_transactions(&cfg, &mut seeded(4)).unwrap();
        let (flat, rows) = flatten_to_single_type(&schema, &series).unwrap();
        assert_eq!(flat.row_types.len(), 1);
        assert_eq!(flat.row_types[0].attributes.len(), 10);
        for s in &rows {
            assert!(validate(s, &flat).is_empty());
        }
        let missing = rows[0]
            .rows
            .iter()
            .flat_map(|r| &r.values)
            .any(|v| *v == FieldValue::Missing);
        assert!(missing);
    }
}
