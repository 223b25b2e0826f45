use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn unittab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unittab"))
        .args(args)
        .env_remove("UNITTAB_SEED")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["gen-data", "--out", out];
    args.extend_from_slice(extra);
    unittab(&args)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_csv_schema_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    let out = gen(
        &dir,
        &[
            "--kind",
            "pollution_like",
            "--entities",
            "12",
            "--rows",
            "1000",
            "--seed",
            "7",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest = json(&dir.join("manifest.json"));
    assert_eq!(manifest["rows"], 12000);
    assert_eq!(manifest["entities"], 12);
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["schema_hash"].as_str().unwrap().len(), 64);
    assert!(dir.join("schema.json").is_file());
    let csv = fs::read_to_string(dir.join("data.csv")).unwrap();
    assert_eq!(csv.lines().count(), 12001);
}

#[test]
fn gen_data_is_reproducible_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "--kind",
        "multitype_transactions",
        "--entities",
        "20",
        "--mean-length",
        "30",
    ];
    let run = |name: &str, seed: &str| {
        let dir = tmp.path().join(name);
        let mut a = args.to_vec();
        a.extend(["--seed", seed]);
        assert_eq!(code(&gen(&dir, &a)), 0);
        fs::read(dir.join("data.csv")).unwrap()
    };
    let first = run("a", "3");
    assert_eq!(first, run("b", "3"));
    assert_ne!(first, run("c", "4"));
    let manifest = json(&tmp.path().join("a/manifest.json"));
    assert!(manifest["rows_per_type"].as_object().unwrap().len() >= 2);
    assert!(manifest["labelled_positive"].as_u64().is_some());
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gen(&tmp.path().join("d"), &["--kind", "weather", "--seed", "1"]);
    assert_eq!(code(&out), 2);

    let out = gen(&tmp.path().join("d"), &["--kind", "pollution_like"]);
    assert_eq!(code(&out), 2, "missing seed");

    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = gen(&blocker.join("sub"), &["--kind", "pollution_like", "--seed", "1"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let config = tmp.path().join("bad.json");
    fs::write(&config, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = unittab(&["pretrain", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    let out = unittab(&["grad-check", "--op", "frobnicate"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(
        code(&gen(
            &data,
            &[
                "--kind",
                "pollution_like",
                "--entities",
                "4",
                "--rows",
                "40",
                "--seed",
                "1"
            ]
        )),
        0
    );
    let missing = tmp.path().join("nope.ckpt");
    let out = unittab(&[
        "finetune",
        "--csv",
        data.join("data.csv").to_str().unwrap(),
        "--schema",
        data.join("schema.json").to_str().unwrap(),
        "--task",
        "regression",
        "--window",
        "5",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("nope.ckpt"));

    let out = unittab(&["eval", "--run", tmp.path().join("norun").to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn grad_check_reports_through_the_exit_code() {
    assert_eq!(code(&unittab(&["grad-check", "--op", "softmax"])), 0);
    assert_eq!(code(&unittab(&["grad-check", "--op", "softmax", "--inject-bug"])), 1);
    assert_eq!(code(&unittab(&["grad-check", "--op", "layer_norm", "--seed", "3"])), 0);
}

#[test]
fn pretrain_finetune_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_owned();
    let data = tmp.path().join("data");
    assert_eq!(
        code(&gen(
            &data,
            &[
                "--kind",
                "pollution_like",
                "--entities",
                "6",
                "--rows",
                "60",
                "--seed",
                "2"
            ]
        )),
        0
    );
    let config = tmp.path().join("config.json");
    let doc = serde_json::json!({
        "model": { "t_max": 6 },
        "train": { "max_steps": 12 },
        "data": {
            "csv": p("data/data.csv"),
            "schema": p("data/schema.json"),
            "window": 6,
            "train_stride": 3,
            "test_stride": 6,
            "test_fraction": 0.34
        }
    });
    fs::write(&config, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    let cfg = config.to_str().unwrap();

    let pre = p("pre");
    let out = unittab(&[
        "pretrain",
        "--config",
        cfg,
        "--seed",
        "5",
        "--out",
        &pre,
        "--checkpoint-every",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(Path::new(&pre).join("model.ckpt").is_file());
    assert!(Path::new(&pre).join("checkpoints").read_dir().unwrap().count() >= 2);
    let written = json(&Path::new(&pre).join("config.json"));
    assert_eq!(written["train"]["seed"], 5);
    let log = fs::read_to_string(Path::new(&pre).join("metrics.ndjson")).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["split"] == "train" && v["metric"] == "loss")
        .map(|v| v["value"].as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 12);

    let ft = p("ft");
    let ckpt = p("pre/model.ckpt");
    let out = unittab(&[
        "finetune",
        "--config",
        cfg,
        "--seed",
        "5",
        "--out",
        &ft,
        "--checkpoint",
        &ckpt,
        "--task",
        "regression",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = json(&Path::new(&ft).join("eval.json"));
    assert!(report["rmse"].as_f64().is_some_and(f64::is_finite), "{report}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("| RMSE |"));

    let out = unittab(&["eval", "--run", &ft]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let out = unittab(&[
        "eval",
        "--config",
        &p("ft/config.json"),
        "--checkpoint",
        &p("ft/model.ckpt"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let eval = Path::new(&ft).join("eval.json");
    let tampered = fs::read_to_string(&eval)
        .unwrap()
        .replacen("\"rmse\": ", "\"rmse\": 1", 1);
    fs::write(&eval, tampered).unwrap();
    assert_eq!(code(&unittab(&["eval", "--run", &ft])), 1);

    let out = unittab(&[
        "eval",
        "--config",
        &p("ft/config.json"),
        "--checkpoint",
        &p("pre/model.ckpt"),
    ]);
    assert_eq!(
        code(&out),
        1,
        "a model without a task head cannot be evaluated: {}",
        stderr(&out)
    );
}

#[test]
fn seeded_runs_repeat_and_the_environment_seed_yields_to_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_owned();
    let data = tmp.path().join("data");
    assert_eq!(
        code(&gen(
            &data,
            &[
                "--kind",
                "pollution_like",
                "--entities",
                "4",
                "--rows",
                "40",
                "--seed",
                "9"
            ]
        )),
        0
    );
    let run = |out: &str, seed: Option<&str>, env: Option<&str>| {
        let (csv, schema) = (p("data/data.csv"), p("data/schema.json"));
        let mut args = vec![
            "pretrain",
            "--csv",
            &csv,
            "--schema",
            &schema,
            "--window",
            "8",
            "--max-steps",
            "4",
            "--out",
            out,
        ];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_unittab"));
        cmd.args(&args).env_remove("UNITTAB_SEED");
        if let Some(e) = env {
            cmd.env("UNITTAB_SEED", e);
        }
        let status = cmd.output().unwrap();
        assert_eq!(code(&status), 0, "{}", stderr(&status));
        fs::read(Path::new(out).join("model.ckpt")).unwrap()
    };
    let a = run(&p("a"), Some("1"), None);
    assert_eq!(a, run(&p("b"), Some("1"), None));
    assert_eq!(a, run(&p("c"), None, Some("1")));
    assert_eq!(a, run(&p("d"), Some("1"), Some("2")));
    assert_ne!(a, run(&p("e"), None, Some("2")));
}
