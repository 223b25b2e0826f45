//! Finite-difference verification of every differentiable primitive and of
//! the whole pretraining loss.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::embedding::SlotValue;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, average_precision, f1, roc_auc};
use crate::model::{EncodedRow, Model, ModelConfig};
use crate::rng::{derive_seed, seeded, Rng};
use crate::schema::{AttributeSpec, FieldValue, Row, RowTypeSpec, Schema, Timestamp};
use crate::tensor::{grad_check_directions, grad_check_signed, Tape, Tensor, Var};
use crate::training::{apply_masking, pretrain_loss, TrainConfig};

/// Differentiable operations covered by [`check_primitive`].
pub const PRIMITIVES: [&str; 21] = [
    "matmul",
    "matmul_nt",
    "add",
    "sub",
    "mul",
    "scale",
    "abs",
    "gelu",
    "softmax",
    "masked_softmax",
    "layer_norm",
    "reshape",
    "permute",
    "transpose",
    "concat",
    "slice",
    "gather",
    "dropout",
    "cross_entropy_soft",
    "sum",
    "mean",
];

/// Name accepted by [`check_model`] wherever a primitive name is expected.
pub const MODEL_CHECK: &str = "model";
pub const STEP: f64 = 1e-5;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Random shapes drawn per primitive.
pub const CASES: usize = 10;
/// Random parameter-space directions of the whole-model check.
pub const DIRECTIONS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    /// Gradient comparisons made (inputs times shapes, or directions).
    pub checks: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

fn dim(rng: &mut Rng) -> usize {
    rng.random_range(1..=4)
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Logits narrow enough that no probability saturates; a saturated
/// coordinate has a gradient too small for central differences to resolve.
fn logits(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 0.5, rng)
}

/// `Σ y ∘ w` for a fixed random `w`, so every output coordinate matters.
fn weighted(tape: &mut Tape<'_>, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

struct Case {
    inputs: Vec<Tensor>,
    weights: Tensor,
}

type Apply = fn(&mut Tape<'static>, &[Var], &Aux) -> Result<Var>;

/// Non-differentiable arguments of a case.
#[derive(Clone, Default)]
struct Aux {
    axis: usize,
    ids: Vec<usize>,
    mask: Vec<bool>,
    shape: Vec<usize>,
    start: usize,
    len: usize,
    factor: f64,
    seed: u64,
    targets: Option<Tensor>,
}

fn build(name: &str, rng: &mut Rng) -> Result<(Vec<Tensor>, Aux, Apply)> {
    let mut aux = Aux::default();
    let (inputs, apply): (Vec<Tensor>, Apply) = match name {
        "matmul" => {
            let (n, k, p) = (dim(rng), dim(rng), dim(rng));
            if rng.random::<bool>() {
                let b = dim(rng);
                (vec![randn(&[b, n, k], rng), randn(&[b, k, p], rng)], |t, x, _| {
                    t.matmul(x[0], x[1])
                })
            } else {
                (vec![randn(&[n, k], rng), randn(&[k, p], rng)], |t, x, _| {
                    t.matmul(x[0], x[1])
                })
            }
        }
        "matmul_nt" => {
            let (n, k, p) = (dim(rng), dim(rng), dim(rng));
            (vec![randn(&[n, k], rng), randn(&[p, k], rng)], |t, x, _| {
                t.matmul_nt(x[0], x[1])
            })
        }
        "add" | "sub" | "mul" => {
            let (r, c) = (dim(rng), dim(rng));
            let rhs = if name != "sub" && rng.random::<bool>() {
                vec![c]
            } else {
                vec![r, c]
            };
            let apply: Apply = match name {
                "add" => |t, x, _| t.add(x[0], x[1]),
                "sub" => |t, x, _| t.sub(x[0], x[1]),
                _ => |t, x, _| t.mul(x[0], x[1]),
            };
            (vec![randn(&[r, c], rng), randn(&rhs, rng)], apply)
        }
        "scale" => {
            aux.factor = rng.random_range(-3.0..3.0);
            (vec![randn(&[dim(rng), dim(rng)], rng)], |t, x, a| {
                Ok(t.scale(x[0], a.factor))
            })
        }
        "abs" => {
            // Kept away from the kink at zero.
            let shape = [dim(rng), dim(rng)];
            let n = shape[0] * shape[1];
            let data = (0..n)
                .map(|_| {
                    let m = rng.random_range(0.5..2.0);
                    if rng.random::<bool>() {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            (vec![Tensor::new(shape.to_vec(), data)?], |t, x, _| Ok(t.abs(x[0])))
        }
        "gelu" => (vec![randn(&[dim(rng), dim(rng)], rng)], |t, x, _| Ok(t.gelu(x[0]))),
        "softmax" => {
            aux.axis = rng.random_range(0..3);
            (vec![logits(&[dim(rng), dim(rng), dim(rng) + 1], rng)], |t, x, a| {
                t.softmax(x[0], a.axis)
            })
        }
        "masked_softmax" => {
            let (g, tq, tk) = (dim(rng), dim(rng), dim(rng) + 1);
            aux.mask = (0..g * tk).map(|_| rng.random::<f64>() < 0.7).collect();
            for grp in 0..g {
                let keep = rng.random_range(0..tk);
                aux.mask[grp * tk + keep] = true;
            }
            (vec![logits(&[g, tq, tk], rng)], |t, x, a| {
                t.masked_softmax(x[0], &a.mask)
            })
        }
        "layer_norm" => {
            // At width 2 the normalized output is ±1 and the input gradient
            // is of order eps, below finite-difference resolution.
            let (r, d) = (dim(rng), dim(rng) + 2);
            (
                vec![randn(&[r, d], rng), randn(&[d], rng), randn(&[d], rng)],
                |t, x, _| t.layer_norm(x[0], x[1], x[2], 1e-5),
            )
        }
        "reshape" => {
            let (a, b, c) = (dim(rng), dim(rng), dim(rng));
            aux.shape = vec![a * b, c];
            (vec![randn(&[a, b, c], rng)], |t, x, a| t.reshape(x[0], &a.shape))
        }
        "permute" => {
            let mut perm = vec![0, 1, 2];
            perm.shuffle(rng);
            aux.shape = perm;
            (vec![randn(&[dim(rng), dim(rng), dim(rng)], rng)], |t, x, a| {
                t.permute(x[0], &a.shape)
            })
        }
        "transpose" => (vec![randn(&[dim(rng), dim(rng)], rng)], |t, x, _| t.transpose(x[0])),
        "concat" => {
            aux.axis = rng.random_range(0..2);
            let mut s1 = vec![dim(rng), dim(rng)];
            let mut s2 = s1.clone();
            s2[aux.axis] = dim(rng);
            s1[aux.axis] = dim(rng);
            (vec![randn(&s1, rng), randn(&s2, rng)], |t, x, a| {
                t.concat(&[x[0], x[1]], a.axis)
            })
        }
        "slice" => {
            let shape = vec![dim(rng) + 1, dim(rng) + 1];
            aux.axis = rng.random_range(0..2);
            let n = shape[aux.axis];
            aux.start = rng.random_range(0..n);
            aux.len = rng.random_range(1..=n - aux.start);
            (vec![randn(&shape, rng)], |t, x, a| {
                t.slice(x[0], a.axis, a.start, a.len)
            })
        }
        "gather" => {
            let v = dim(rng) + 1;
            let n = dim(rng) + 2;
            aux.ids = (0..n).map(|_| rng.random_range(0..v)).collect();
            (vec![randn(&[v, dim(rng)], rng)], |t, x, a| t.gather(x[0], &a.ids))
        }
        "dropout" => {
            aux.seed = rng.random();
            (vec![randn(&[dim(rng), dim(rng) + 1], rng)], |t, x, a| {
                Ok(t.dropout(x[0], 0.3, &mut seeded(a.seed), true))
            })
        }
        "cross_entropy_soft" => {
            let (b, q) = (dim(rng), dim(rng) + 1);
            let mut data: Vec<f64> = (0..b * q).map(|_| rng.random_range(0.01..1.0)).collect();
            for row in data.chunks_mut(q) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            aux.targets = Some(Tensor::new(vec![b, q], data)?);
            (vec![logits(&[b, q], rng)], |t, x, a| {
                t.cross_entropy_soft(x[0], a.targets.as_ref().expect("targets are set"))
            })
        }
        "sum" => (vec![randn(&[dim(rng), dim(rng)], rng)], |t, x, _| Ok(t.sum(x[0]))),
        "mean" => (vec![randn(&[dim(rng), dim(rng)], rng)], |t, x, _| Ok(t.mean(x[0]))),
        other => return Err(Error::Config(alloc::format!("unknown primitive `{other}`"))),
    };
    Ok((inputs, aux, apply))
}

/// Gradient of `Σ op(inputs) ∘ w` with respect to each input, on
/// [`CASES`] random shapes. `flip_sign` negates the analytic gradient.
pub fn check_primitive(name: &str, seed: u64, flip_sign: bool) -> Result<CheckResult> {
    let mut rng = seeded(derive_seed(
        seed,
        PRIMITIVES.iter().position(|p| *p == name).unwrap_or(99) as u64,
    ));
    let sign = if flip_sign { -1.0 } else { 1.0 };
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for _ in 0..CASES {
        let (inputs, aux, apply) = build(name, &mut rng)?;
        let out_shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let y = apply(&mut tape, &vars, &aux)?;
            tape.shape(y).to_vec()
        };
        let case = Case {
            weights: randn(&out_shape, &mut rng),
            inputs,
        };
        for which in 0..case.inputs.len() {
            let f = |tape: &mut Tape<'static>, x: Var| -> Result<Var> {
                let vars: Vec<Var> = case
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == which { x } else { tape.constant(t.clone()) })
                    .collect();
                let y = apply(tape, &vars, &aux)?;
                if tape.shape(y).is_empty() {
                    Ok(y)
                } else {
                    weighted(tape, y, &case.weights)
                }
            };
            worst = worst.max(grad_check_signed(f, &case.inputs[which], STEP, sign)?);
            checks += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_relative_error: worst,
        tolerance: PRIMITIVE_TOLERANCE,
        checks,
    })
}

/// Two row types sharing a timestamp and a categorical field.
pub fn toy_schema() -> Result<Schema> {
    Schema::new(
        vec![
            AttributeSpec::timestamp("ts", vec![2020, 2021], true),
            AttributeSpec::categorical("kind", vec!["a".into(), "b".into(), "c".into()]),
            AttributeSpec::numerical("amount", vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0], (0.0, 1.0)),
            AttributeSpec::numerical("fee", vec![0.0, 1.0, 2.0, 3.0], (0.0, 3.0)),
            AttributeSpec::categorical("place", vec!["x".into(), "y".into()]),
        ],
        vec![
            RowTypeSpec {
                type_id: 1,
                attributes: vec!["ts".into(), "kind".into(), "amount".into()],
            },
            RowTypeSpec {
                type_id: 2,
                attributes: vec![
                    "ts".into(),
                    "kind".into(),
                    "amount".into(),
                    "fee".into(),
                    "place".into(),
                ],
            },
        ],
    )
}

/// Mixed-type rows with values drawn from `rng`.
pub fn toy_rows(len: usize, rng: &mut Rng) -> Vec<Row> {
    (0..len)
        .map(|i| {
            let ts = FieldValue::Time(
                Timestamp::date(2020 + (i % 2) as i32, 1 + (i % 12) as u8, 1 + (i % 28) as u8)
                    .with_hour((i % 24) as u8),
            );
            let mut values = vec![
                ts,
                FieldValue::Cat(rng.random_range(0..3)),
                FieldValue::Num(rng.random()),
            ];
            if rng.random::<bool>() {
                values.push(FieldValue::Num(rng.random_range(0.0..3.0)));
                values.push(FieldValue::Cat(rng.random_range(0..2)));
                Row { type_id: 2, values }
            } else {
                Row { type_id: 1, values }
            }
        })
        .collect()
}

/// Configuration of the whole-model check: small and dropout-free.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d: 4,
        m: 8,
        field_layers: 1,
        field_heads: 2,
        seq_layers: 1,
        seq_heads: 2,
        ff_multiplier: 2,
        dropout: 0.0,
        frequencies: 3,
        t_max: 8,
        n_row_types: 2,
        ..ModelConfig::desk()
    }
}

/// Directional derivatives of the masked-token loss of a two-series
/// mixed-type batch along [`DIRECTIONS`] random directions in parameter
/// space. `flip_sign` negates the analytic gradient.
pub fn check_model(seed: u64, flip_sign: bool) -> Result<CheckResult> {
    let schema = toy_schema()?;
    let mut rng = seeded(seed);
    let model = Model::new(toy_model_config(), &schema, &mut rng)?;
    let cfg = TrainConfig {
        p_f: 0.4,
        p_r: 0.2,
        ..TrainConfig::desk()
    };
    let originals: Vec<Vec<EncodedRow>> = [5, 3]
        .iter()
        .map(|&n| {
            toy_rows(n, &mut rng)
                .iter()
                .map(|r| Ok(EncodedRow::unmasked(r.type_id, model.layout.slot_values(r, &schema)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut inputs: Vec<Vec<EncodedRow>> = originals
        .iter()
        .map(|rows| apply_masking(rows, &model.layout, &cfg, &mut rng))
        .collect::<Result<_>>()?;
    // At least one numerical and one categorical target.
    inputs[0][0].masked.iter_mut().for_each(|m| *m = true);
    inputs[0][0].predict = originals[0][0]
        .values
        .iter()
        .map(|v| *v != SlotValue::Missing)
        .collect();
    let orig_refs: Vec<&[EncodedRow]> = originals.iter().map(|v| v.as_slice()).collect();
    let input_refs: Vec<&[EncodedRow]> = inputs.iter().map(|v| v.as_slice()).collect();
    let worst = grad_check_directions(
        &model.store,
        |tape| {
            pretrain_loss(tape, &model, &input_refs, &orig_refs, &cfg, None)?.ok_or(Error::Empty("masked positions"))
        },
        STEP,
        DIRECTIONS,
        &mut rng,
        if flip_sign { -1.0 } else { 1.0 },
    )?;
    Ok(CheckResult {
        name: MODEL_CHECK.to_string(),
        max_relative_error: worst,
        tolerance: MODEL_TOLERANCE,
        checks: DIRECTIONS,
    })
}

/// Quadratic reference for ROC AUC: every positive/negative pair, ties
/// counting one half.
pub fn pairwise_auc(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let (mut twice_wins, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if truth[i] && !truth[j] {
                pairs += 1;
                twice_wins += if si > sj {
                    2
                } else if si == sj {
                    1
                } else {
                    0
                };
            }
        }
    }
    (pairs > 0).then(|| twice_wins as f64 / (2 * pairs) as f64)
}

/// Reference average precision: each positive's rank is found by counting
/// the samples placed before it (higher score, or equal score earlier in
/// the input).
pub fn enumerated_ap(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let before = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut ranked: Vec<(usize, usize)> = (0..scores.len())
        .filter(|&i| truth[i])
        .map(|i| {
            let rank = 1 + (0..scores.len()).filter(|&j| before(i, j)).count();
            let hits = 1 + (0..scores.len()).filter(|&j| truth[j] && before(i, j)).count();
            (rank, hits)
        })
        .collect();
    if ranked.is_empty() {
        return None;
    }
    ranked.sort_unstable();
    let total: f64 = ranked.iter().map(|&(rank, hits)| hits as f64 / rank as f64).sum();
    Some(total / ranked.len() as f64)
}

/// Reference F1 and accuracy (×100) from counted outcomes.
pub fn counted_f1_accuracy(pred: &[bool], truth: &[bool]) -> (f64, f64) {
    let count = |p: bool, t: bool| pred.iter().zip(truth).filter(|&(&a, &b)| a == p && b == t).count() as u64;
    let (tp, fp, fn_, tn) = (
        count(true, true),
        count(true, false),
        count(false, true),
        count(false, false),
    );
    let f1 = if tp + fp == 0 || tp + fn_ == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    };
    (f1, 100.0 * (tp + tn) as f64 / pred.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricOracleReport {
    pub instances: usize,
    /// Instances where a metric differed from its reference (bitwise).
    pub roc_auc_mismatches: usize,
    pub average_precision_mismatches: usize,
    pub f1_mismatches: usize,
    pub accuracy_mismatches: usize,
}

impl MetricOracleReport {
    pub fn passed(&self) -> bool {
        self.roc_auc_mismatches + self.average_precision_mismatches + self.f1_mismatches + self.accuracy_mismatches == 0
    }
}

/// Compares the metrics with their references on `instances` random
/// problems of 1 to 20 samples. Scores come from a small grid so ties are
/// common; undefined metrics must be undefined in both.
pub fn check_metrics(instances: usize, seed: u64) -> Result<MetricOracleReport> {
    let mut rng = seeded(seed);
    let mut report = MetricOracleReport {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let n = rng.random_range(1..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        let truth: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        let pred: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        let bits = |r: Result<f64>| r.ok().map(f64::to_bits);
        if bits(roc_auc(&scores, &truth)) != pairwise_auc(&scores, &truth).map(f64::to_bits) {
            report.roc_auc_mismatches += 1;
        }
        if bits(average_precision(&scores, &truth)) != enumerated_ap(&scores, &truth).map(f64::to_bits) {
            report.average_precision_mismatches += 1;
        }
        let (f, a) = counted_f1_accuracy(&pred, &truth);
        if f1(&pred, &truth)?.to_bits() != f.to_bits() {
            report.f1_mismatches += 1;
        }
        if accuracy(&pred, &truth)?.to_bits() != a.to_bits() {
            report.accuracy_mismatches += 1;
        }
    }
    Ok(report)
}
