use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dscl_core::cli::{build_report, cmd_gen, cmd_train, read_run, ExperimentConfig};
use dscl_core::harness::{EvalMode, RunMetrics};
use serde_json::{json, Value};

fn dscl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dscl"))
        .args(args)
        .current_dir(cwd)
        .env("DSCL_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn tiny_config(out: &Path, arch: &str, method: &str, seeds: &[u64]) -> Value {
    json!({
        "arch": {"kind": arch, "config": {"input_size": 32, "width_mult": 0.0625, "head_channels": 8}},
        "method": {"method": method, "lambda": 1.0},
        "data": {"source": "fig1", "image_size": 32, "n_per_class": 12, "seed": 3},
        "train": {"lr_grid": [0.05], "batch_size": 8, "max_epochs": 2},
        "out_dir": out,
        "seeds": seeds,
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn parse(v: Value) -> ExperimentConfig {
    serde_json::from_value(v).unwrap()
}

fn stderr_error(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("stderr has a line");
    serde_json::from_str(line).expect("stderr is json")
}

#[test]
fn dry_run_reports_full_size_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dscl(&["train", "--preset", "capacity-check"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["param_counts"]["ds"]["fe_params"], 12_572_672);
    assert_eq!(v["param_counts"]["resnet18"]["fe_params"], 11_176_512);
    assert_eq!(v["param_counts"]["color"]["fe_params"], 1_402_432);
    let pct = v["ds_to_standard_fe_percent"].as_f64().unwrap();
    assert!((pct - 112.49).abs() < 0.01, "{pct}");
    // nothing is trained or written
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dscl(&["train", "--preset", "nope"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_error(&o)["error"]["kind"], "config");

    let o = dscl(&["train", "--bogus-flag"], tmp.path());
    assert_eq!(o.status.code(), Some(2));

    let mut bad = tiny_config(&tmp.path().join("r"), "ds", "finetune", &[0]);
    bad["train"]["lr_decay_factor"] = json!(1.0);
    let p = write_config(tmp.path(), "bad.json", &bad);
    let o = dscl(&["train", "--config", p.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));

    // a corpus with an empty class directory
    for split in ["train", "test"] {
        fs::create_dir_all(tmp.path().join("corpus").join(split).join("a")).unwrap();
    }
    let cfg = json!({
        "arch": {"kind": "ds", "config": {"input_size": 32, "width_mult": 0.0625, "head_channels": 8}},
        "method": {"method": "finetune"},
        "data": {"source": "corpus", "train": "corpus/train", "test": "corpus/test", "n_tasks": 1, "split_seed": 0},
        "out_dir": "runs",
        "seeds": [0],
    });
    let p = write_config(tmp.path(), "corpus.json", &cfg);
    let o = dscl(&["train", "--config", p.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    let e = stderr_error(&o);
    assert_eq!(e["error"]["kind"], "data");
    assert_eq!(e["error"]["exit_code"], 3);

    let o = dscl(&["report", "does-not-exist"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_error(&o)["error"]["kind"], "report");
}

#[test]
fn generation_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&tmp.path().join("r"), "ds", "finetune", &[0]);
    let a = cmd_gen(parse(cfg.clone()), Some(tmp.path().join("a")), Some(11)).unwrap();
    let b = cmd_gen(parse(cfg.clone()), Some(tmp.path().join("b")), Some(11)).unwrap();
    let c = cmd_gen(parse(cfg), Some(tmp.path().join("c")), Some(12)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a["files"], c["files"]);
    for f in ["train.dsds", "test.dsds", "manifest.json"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(f)).unwrap(),
            fs::read(tmp.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(a["tasks"], json!([[0, 1], [2, 3]]));
}

#[test]
fn training_twice_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let mut metrics = Vec::new();
    for run in ["first", "second"] {
        let out = tmp.path().join(run);
        let cfg = parse(tiny_config(&out, "ds", "ewc", &[0, 1]));
        let m = cmd_train(&cfg).unwrap();
        assert_eq!(m.iter().map(|r| r.seed).collect::<Vec<_>>(), [0, 1]);
        let mut files = Vec::new();
        for seed in [0, 1] {
            let dir = cfg.run_dir(seed);
            let stored: ExperimentConfig =
                serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
            assert_eq!(stored.seeds, [seed]);
            files.push(fs::read(dir.join("metrics.json")).unwrap());
        }
        metrics.push(files);
    }
    assert_eq!(metrics[0], metrics[1]);
    assert_ne!(metrics[0][0], metrics[0][1], "seeds should differ");
}

#[test]
fn report_over_one_run_repeats_its_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let p = write_config(tmp.path(), "c.json", &tiny_config(&out, "resnet18", "si", &[5]));
    let o = dscl(&["train", "--config", p.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = out.join("resnet18-si-seed5");
    let o = dscl(&["report", run.to_str().unwrap(), "--out", "rep"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let m: RunMetrics = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    let acc = fs::read_to_string(tmp.path().join("rep/table_acc.csv")).unwrap();
    let forg = fs::read_to_string(tmp.path().join("rep/table_forg.csv")).unwrap();
    assert_eq!(acc.lines().next().unwrap(), "mode,arch,si_mean,si_sample_std,si_n");
    assert_eq!(
        acc.lines().nth(1).unwrap(),
        format!("aware,resnet18,{:.6},0.000000,1", m.aware.mean_acc)
    );
    assert_eq!(
        acc.lines().nth(2).unwrap(),
        format!("agnostic,resnet18,{:.6},0.000000,1", m.agnostic.mean_acc)
    );
    assert_eq!(
        forg.lines().nth(1).unwrap(),
        format!("aware,resnet18,{:.6},0.000000,1", m.aware.mean_forgetting)
    );
    let curves = fs::read_to_string(tmp.path().join("rep/curves_aware.csv")).unwrap();
    let row = curves.lines().find(|l| l.starts_with("resnet18,si,1,0,")).unwrap();
    assert!(row.contains(&format!("{:.6}", m.aware.matrix[1][0].unwrap())));
}

#[test]
fn report_is_order_independent_and_rejects_mixed_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let mut dirs = Vec::new();
    for (arch, method) in [("resnet18", "finetune"), ("ds", "finetune"), ("resnet18", "mas")] {
        let cfg = parse(tiny_config(&out, arch, method, &[0, 1]));
        cmd_train(&cfg).unwrap();
        dirs.extend([cfg.run_dir(0), cfg.run_dir(1)]);
    }
    let runs: Vec<_> = dirs.iter().map(|d| read_run(d).unwrap()).collect();
    let modes = [EvalMode::Aware, EvalMode::Agnostic];
    let base = build_report(&runs, &modes).unwrap();
    let mut rev = runs.clone();
    rev.reverse();
    assert_eq!(build_report(&rev, &modes).unwrap(), base);
    let mut rot = runs.clone();
    rot.rotate_left(3);
    assert_eq!(build_report(&rot, &modes).unwrap(), base);

    let table = base.get("table_acc.csv").unwrap();
    assert!(table.contains(",mas_n"));
    // ds has no mas runs
    assert!(table.lines().any(|l| l.starts_with("aware,ds,") && l.ends_with(",,,")));

    let mut dup = runs.clone();
    dup.push(runs[0].clone());
    assert!(build_report(&dup, &modes).is_err());

    let mut other = tiny_config(&tmp.path().join("other"), "ds", "finetune", &[0]);
    other["train"]["max_epochs"] = json!(1);
    let cfg = parse(other);
    cmd_train(&cfg).unwrap();
    let mut mixed = runs;
    mixed.push(read_run(&cfg.run_dir(0)).unwrap());
    let err = build_report(&mixed, &modes).unwrap_err();
    assert_eq!(err.kind(), "report");
}
