//! Acceptance suite. The criteria run one after another inside a single
//! test so their timings are not distorted by each other; each prints one
//! PASS or FAIL line and the test fails if any criterion does.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng as _;
use unittab::checkpoint::{decode_checkpoint, encode_checkpoint, Snapshot};
use unittab_core::embedding::{FieldLayout, NumericInput};
use unittab_core::ingest::{
    flatten_to_single_type, gen_multitype_transactions, gen_pollution_like, split_by_entity, window, window_starts,
    PollutionConfig, TransactionsConfig, WindowedSample,
};
use unittab_core::model::{EncodedRow, Model, ModelConfig, NumericHead, TaskKind};
use unittab_core::rng::{derive_seed, seeded, Rng};
use unittab_core::schema::{Schema, TimeSeries};
use unittab_core::training::{
    apply_masking, encode_rows, evaluate, finetune, predict, pretrain, pretrain_loss, smooth_categorical,
    smooth_neighborhood, LossMode, NoObserver, TrainConfig,
};
use unittab_core::verify::{
    check_metrics, check_model, check_primitive, pairwise_auc, toy_rows, toy_schema, PRIMITIVES,
};
use unittab_core::Tape;

const SEEDS: [u64; 3] = [0, 1, 2];
/// Stream of [`derive_seed`] used for model initialisation.
const INIT: u64 = 2;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed < Duration::from_secs(limit_secs)
}

fn batch_refs(rows: &[Vec<EncodedRow>]) -> Vec<&[EncodedRow]> {
    rows.iter().map(Vec::as_slice).collect()
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut worst = String::new();
    let mut worst_ratio = 0.0;
    let mut failures = Vec::new();
    let mut results: Vec<_> = PRIMITIVES
        .iter()
        .map(|p| check_primitive(p, 0, false).unwrap())
        .collect();
    results.push(check_model(0, false).unwrap());
    for r in &results {
        let ratio = r.max_relative_error / r.tolerance;
        if ratio > worst_ratio {
            worst_ratio = ratio;
            worst = format!("{} {:.1e} (tol {:.0e})", r.name, r.max_relative_error, r.tolerance);
        }
        if !r.passed() {
            failures.push(r.name.clone());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        failures.is_empty() && within(elapsed, 120),
        format!(
            "{} checks, failing {failures:?}, worst {worst}, {:.1}s (limit 120s)",
            results.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn distribution_correctness() -> Verdict {
    let start = Instant::now();
    let mut rng = seeded(2);
    let (mut worst_sum, mut interior, mut bad_interior) = (0.0f64, 0, 0);
    for _ in 0..10_000 {
        let q = rng.random_range(1..=120);
        let b = rng.random_range(0..q);
        let eps = rng.random_range(0.0..1.0);
        let radius = rng.random_range(0..=12);
        let cat = smooth_categorical(b, q, eps).unwrap();
        let hood = smooth_neighborhood(b, q, eps, radius).unwrap();
        for p in [&cat, &hood] {
            worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        }
        if q >= 11 && (5..q - 5).contains(&b) {
            let hood = smooth_neighborhood(b, q, eps, 5).unwrap();
            interior += 1;
            let ok = hood.iter().enumerate().all(|(l, &x)| match l.abs_diff(b) {
                0 => x == 1.0 - eps,
                1..=5 => x == eps / 10.0,
                _ => x == 0.0,
            });
            bad_interior += usize::from(!ok);
        }
    }
    verdict(
        worst_sum <= 1e-9 && interior > 0 && bad_interior == 0,
        format!(
            "max |sum - 1| {worst_sum:.1e} (tol 1e-9), {bad_interior}/{interior} interior radius-5 targets off eps/10, {:.2}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn masking_statistics() -> Verdict {
    let schema = toy_schema().unwrap();
    let layout = FieldLayout::new(&schema, NumericInput::Frequency, 10).unwrap();
    let cfg = TrainConfig {
        p_f: 0.15,
        p_r: 0.1,
        ..TrainConfig::desk()
    };
    let mut rng = seeded(3);
    let (mut fields, mut masked, mut violations, mut units) = (0u64, 0u64, 0u64, 0u64);
    while fields < 120_000 {
        let rows: Vec<EncodedRow> = toy_rows(64, &mut rng)
            .iter()
            .map(|r| EncodedRow::unmasked(r.type_id, layout.slot_values(r, &schema).unwrap()))
            .collect();
        for row in apply_masking(&rows, &layout, &cfg, &mut rng).unwrap() {
            let ts = &layout.timestamp_positions[row.type_id as usize - 1];
            for j in (0..row.masked.len()).filter(|j| !ts.contains(j)) {
                fields += 1;
                masked += u64::from(row.masked[j]);
            }
            units += 1;
            let first = (row.masked[ts[0]], row.predict[ts[0]]);
            violations += u64::from(ts.iter().any(|&j| (row.masked[j], row.predict[j]) != first));
        }
    }
    let rate = masked as f64 / fields as f64;
    verdict(
        (rate - 0.235).abs() <= 0.005 && violations == 0,
        format!("rate {rate:.4} over {fields} fields (0.235 +/- 0.005), {violations} split timestamps in {units} rows"),
    )
}

fn padding_invariance() -> Verdict {
    let schema = toy_schema().unwrap();
    let config = ModelConfig {
        t_max: 24,
        n_row_types: 2,
        ..ModelConfig::desk()
    };
    let model = Model::new(config, &schema, &mut seeded(4)).unwrap();
    let mut rng = seeded(5);
    let encode = |len: usize, rng: &mut Rng| -> Vec<EncodedRow> {
        toy_rows(len, rng)
            .iter()
            .map(|r| EncodedRow::unmasked(r.type_id, model.layout.slot_values(r, &schema).unwrap()))
            .collect()
    };
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let short_len = rng.random_range(1..24);
        let long = encode(rng.random_range(short_len..=24), &mut rng);
        let short = encode(short_len, &mut rng);
        let m = model.config.m;

        let mut tape = Tape::with_params(&model.store);
        let padded = model.encode(&mut tape, &[&long, &short], true, None).unwrap();
        let t = padded.len;
        let padded_hidden = tape.value(padded.hidden).data()[t * m..(t + short_len + 1) * m].to_vec();

        let mut tape = Tape::with_params(&model.store);
        let solo = model.encode(&mut tape, &[&short], true, None).unwrap();
        let solo_hidden = tape.value(solo.hidden).data();
        for (a, b) in padded_hidden.iter().zip(solo_hidden) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(
        worst <= 1e-9,
        format!("max deviation {worst:.1e} over 20 padded batches (tol 1e-9)"),
    )
}

fn metric_oracles() -> Verdict {
    let report = check_metrics(1000, 6).unwrap();
    verdict(
        report.passed(),
        format!(
            "{} instances; mismatches auc {} ap {} f1 {} accuracy {}",
            report.instances,
            report.roc_auc_mismatches,
            report.average_precision_mismatches,
            report.f1_mismatches,
            report.accuracy_mismatches
        ),
    )
}

/// Masked-token loss of the whole dataset under one fixed mask, dropout off.
fn fixed_mask_loss(model: &Model, schema: &Schema, samples: &[WindowedSample], cfg: &TrainConfig) -> f64 {
    let originals: Vec<_> = samples
        .iter()
        .map(|s| encode_rows(s, &model.layout, schema).unwrap())
        .collect();
    let mut rng = seeded(12345);
    let inputs: Vec<_> = originals
        .iter()
        .map(|r| apply_masking(r, &model.layout, cfg, &mut rng).unwrap())
        .collect();
    let mut tape = Tape::with_params(&model.store);
    let loss = pretrain_loss(
        &mut tape,
        model,
        &batch_refs(&inputs),
        &batch_refs(&originals),
        cfg,
        None,
    )
    .unwrap()
    .unwrap();
    tape.value(loss).item()
}

fn overfit_sanity() -> Verdict {
    let start = Instant::now();
    let schema = toy_schema().unwrap();
    let mut ratios = Vec::new();
    for seed in SEEDS {
        let mut rng = seeded(seed);
        let samples: Vec<_> = (0..16)
            .map(|i| WindowedSample::whole(&TimeSeries::new(format!("s{i}"), toy_rows(16, &mut rng))))
            .collect();
        let config = ModelConfig {
            n_row_types: 2,
            ..ModelConfig::desk()
        };
        let mut model = Model::new(config, &schema, &mut seeded(derive_seed(seed, INIT))).unwrap();
        let cfg = TrainConfig {
            epochs: 1000,
            max_steps: Some(300),
            seed,
            ..TrainConfig::desk()
        };
        let before = fixed_mask_loss(&model, &schema, &samples, &cfg);
        let report = pretrain(&mut model, &schema, &samples, &cfg, &mut NoObserver).unwrap();
        assert_eq!(report.losses.len(), 300);
        ratios.push(fixed_mask_loss(&model, &schema, &samples, &cfg) / before);
    }
    let elapsed = start.elapsed();
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    verdict(
        ratios.iter().all(|&r| r < 0.5) && within(elapsed, 600),
        format!(
            "loss after/before 300 steps per seed [{}] (need < 0.5), {:.0}s (limit 600s)",
            shown.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

#[derive(Clone, Copy)]
struct Variant {
    input: NumericInput,
    head: NumericHead,
    loss: LossMode,
}

const FREQUENCY_CE: Variant = Variant {
    input: NumericInput::Frequency,
    head: NumericHead::Bins,
    loss: LossMode::UnifiedCe,
};
const BINNED_CE: Variant = Variant {
    input: NumericInput::Binned,
    head: NumericHead::Bins,
    loss: LossMode::UnifiedCe,
};
const FREQUENCY_L2: Variant = Variant {
    input: NumericInput::Frequency,
    head: NumericHead::Scalar,
    loss: LossMode::RegressionL2,
};

const ABLATION_PRETRAIN_STEPS: u64 = 3000;
const ABLATION_FINETUNE_EPOCHS: usize = 15;

/// Test RMSE after pretraining with `variant` and fine-tuning end to end.
fn ablation_rmse(
    variant: Variant,
    seed: u64,
    schema: &Schema,
    train: &[WindowedSample],
    test: &[WindowedSample],
) -> f64 {
    let config = ModelConfig {
        numeric_input: variant.input,
        numeric_head: variant.head,
        t_max: 10,
        ..ModelConfig::desk()
    };
    let mut model = Model::new(config, schema, &mut seeded(derive_seed(seed, INIT))).unwrap();
    let pre = TrainConfig {
        loss_mode: variant.loss,
        epochs: 1000,
        max_steps: Some(ABLATION_PRETRAIN_STEPS),
        seed,
        ..TrainConfig::desk()
    };
    pretrain(&mut model, schema, train, &pre, &mut NoObserver).unwrap();
    let tune = TrainConfig {
        epochs: ABLATION_FINETUNE_EPOCHS,
        seed,
        ..TrainConfig::desk()
    };
    finetune(&mut model, schema, train, TaskKind::Regression, &tune, &mut NoObserver).unwrap();
    evaluate(&model, schema, test).unwrap().rmse.unwrap()
}

fn directional_ablation() -> Verdict {
    let start = Instant::now();
    let (mut freq_wins, mut ce_wins) = (0, 0);
    let mut rows = Vec::new();
    for seed in SEEDS {
        let generator = PollutionConfig {
            n_entities: 12,
            rows: 600,
            noise: 0.0,
            bins: 50,
        };
        let (schema, series) = gen_pollution_like(&generator, &mut seeded(seed)).unwrap();
        let split = split_by_entity(series, 0.25, seed).unwrap();
        let train: Vec<_> = split.train.iter().flat_map(|s| window(s, 10, 5)).collect();
        let test: Vec<_> = split.test.iter().flat_map(|s| window(s, 10, 10)).collect();
        let freq = ablation_rmse(FREQUENCY_CE, seed, &schema, &train, &test);
        let binned = ablation_rmse(BINNED_CE, seed, &schema, &train, &test);
        let l2 = ablation_rmse(FREQUENCY_L2, seed, &schema, &train, &test);
        freq_wins += usize::from(freq < binned);
        ce_wins += usize::from(freq < l2);
        rows.push(format!("seed {seed}: freq {freq:.4} binned {binned:.4} l2 {l2:.4}"));
    }
    let elapsed = start.elapsed();
    verdict(
        freq_wins >= 2 && ce_wins >= 2 && within(elapsed, 1800),
        format!(
            "frequency beats binned in {freq_wins}/3, unified CE beats L2 in {ce_wins}/3 (need 2 each); {}; {:.0}s (limit 1800s)",
            rows.join("; "),
            elapsed.as_secs_f64()
        ),
    )
}

const PERMUTATIONS: usize = 1000;

/// Standard deviation of the ROC AUC of `scores` under random relabelling.
fn permutation_sigma(scores: &[f64], truth: &[bool], rng: &mut Rng) -> f64 {
    let mut labels = truth.to_vec();
    let aucs: Vec<f64> = (0..PERMUTATIONS)
        .map(|_| {
            labels.shuffle(rng);
            pairwise_auc(scores, &labels).unwrap()
        })
        .collect();
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (aucs.len() - 1) as f64).sqrt()
}

/// Test ROC AUC and its permutation threshold for one dataset variant.
fn churn_run(seed: u64, schema: &Schema, series: &[TimeSeries]) -> (f64, f64) {
    let split = split_by_entity(series.to_vec(), 0.3, seed).unwrap();
    let train: Vec<_> = split.train.iter().map(WindowedSample::whole).collect();
    let test: Vec<_> = split.test.iter().map(WindowedSample::whole).collect();
    let config = ModelConfig {
        t_max: 64,
        n_row_types: schema.row_types.len(),
        ..ModelConfig::desk()
    };
    let mut model = Model::new(config, schema, &mut seeded(derive_seed(seed, INIT))).unwrap();
    let pre = TrainConfig {
        epochs: 1000,
        max_steps: Some(200),
        seed,
        ..TrainConfig::desk()
    };
    pretrain(&mut model, schema, &train, &pre, &mut NoObserver).unwrap();
    let tune = TrainConfig {
        epochs: 5,
        seed,
        ..TrainConfig::desk()
    };
    finetune(&mut model, schema, &train, TaskKind::Binary, &tune, &mut NoObserver).unwrap();
    let scores = predict(&model, schema, &test, 64).unwrap();
    let truth: Vec<bool> = test.iter().map(|s| s.label.unwrap().as_f64() > 0.5).collect();
    let auc = pairwise_auc(&scores, &truth).unwrap();
    let sigma = permutation_sigma(&scores, &truth, &mut seeded(derive_seed(seed, 3)));
    (auc, 0.5 + 3.0 * sigma)
}

fn multi_row_type_capability() -> Verdict {
    let start = Instant::now();
    let mut passes = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let generator = TransactionsConfig {
            n_entities: 200,
            ..TransactionsConfig::default()
        };
        let (schema, series) = gen_multitype_transactions(&generator, &mut seeded(seed)).unwrap();
        assert_eq!(schema.row_types.len(), 3);
        let (flat_schema, flat_series) = flatten_to_single_type(&schema, &series).unwrap();
        let (auc, threshold) = churn_run(seed, &schema, &series);
        let (flat_auc, _) = churn_run(seed, &flat_schema, &flat_series);
        passes += usize::from(auc > threshold);
        rows.push(format!(
            "seed {seed}: auc {auc:.3} > {threshold:.3}, flattened {flat_auc:.3}"
        ));
    }
    let elapsed = start.elapsed();
    verdict(
        passes == SEEDS.len() && within(elapsed, 1800),
        format!(
            "{passes}/3 seeds above 0.5 + 3 sigma of a {PERMUTATIONS}-permutation null; {}; {:.0}s (limit 1800s)",
            rows.join("; "),
            elapsed.as_secs_f64()
        ),
    )
}

fn determinism_and_persistence() -> Verdict {
    let (schema, series) = gen_pollution_like(
        &PollutionConfig {
            n_entities: 4,
            rows: 80,
            noise: 0.1,
            bins: 10,
        },
        &mut seeded(9),
    )
    .unwrap();
    let samples: Vec<_> = series.iter().flat_map(|s| window(s, 8, 4)).collect();
    let cfg = TrainConfig {
        max_steps: Some(10),
        seed: 9,
        ..TrainConfig::desk()
    };
    let run = || {
        let config = ModelConfig {
            t_max: 8,
            ..ModelConfig::desk()
        };
        let mut model = Model::new(config, &schema, &mut seeded(derive_seed(9, INIT))).unwrap();
        let report = pretrain(&mut model, &schema, &samples, &cfg, &mut NoObserver).unwrap();
        let snap = Snapshot {
            model: &model,
            optimizer: Some(&report.optimizer),
            rng: Some(&report.rng),
            step: report.losses.len() as u64,
            train: Some(&cfg),
        };
        (encode_checkpoint(&schema, &snap).unwrap(), model)
    };
    let (first, model) = run();
    let (second, _) = run();
    let restored = decode_checkpoint(&first, &schema).unwrap().model;
    let rows: Vec<_> = samples[..6]
        .iter()
        .map(|s| encode_rows(s, &model.layout, &schema).unwrap())
        .collect();
    let forward = |m: &Model| {
        let mut tape = Tape::with_params(&m.store);
        let out = m.encode(&mut tape, &batch_refs(&rows), true, None).unwrap();
        tape.value(out.hidden).data().to_vec()
    };
    let (a, b) = (forward(&model), forward(&restored));
    let same_forward = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    verdict(
        first == second && same_forward,
        format!(
            "checkpoints of two seeded runs identical: {} ({} bytes); restored forward bitwise identical: {same_forward}",
            first == second,
            first.len()
        ),
    )
}

fn windowing_arithmetic() -> Verdict {
    let mut rng = seeded(10);
    let (mut overlaps, mut miscounts) = (0, 0);
    for _ in 0..1000 {
        let len = rng.random_range(0..2000);
        let spans: Vec<(usize, usize)> = window_starts(len, 10, 10).map(|i| (i * 10, i * 10 + 10)).collect();
        miscounts += usize::from(spans.len() != len / 10 || spans.iter().any(|&(_, end)| end > len));
        for (i, a) in spans.iter().enumerate() {
            overlaps += spans[i + 1..].iter().filter(|b| a.0 < b.1 && b.0 < a.1).count();
        }
    }
    verdict(
        overlaps == 0 && miscounts == 0,
        format!("1000 series lengths: {overlaps} overlapping window pairs, {miscounts} wrong window counts"),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("gradient correctness", gradient_correctness),
        ("distribution correctness", distribution_correctness),
        ("masking statistics", masking_statistics),
        ("padding invariance", padding_invariance),
        ("metric oracles", metric_oracles),
        ("overfit sanity", overfit_sanity),
        ("directional ablation", directional_ablation),
        ("multi-row-type capability", multi_row_type_capability),
        ("determinism and persistence", determinism_and_persistence),
        ("windowing arithmetic", windowing_arithmetic),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        let status = if v.passed { "PASS" } else { "FAIL" };
        println!("{status} {}. {name}: {}", i + 1, v.detail);
        if !v.passed {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
