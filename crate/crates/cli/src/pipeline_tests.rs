use super::*;
use std::path::Path;

fn dkan(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("dkan").chain(args.iter().copied()))
}

fn dkan_err(args: &[&str]) -> CliError {
    let cli = Cli::try_parse_from(std::iter::once("dkan").chain(args.iter().copied())).unwrap();
    run(cli).unwrap_err()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth_and_split(root: &Path, name: &str) -> PathBuf {
    let data = root.join("data");
    if !data.exists() {
        assert_eq!(dkan(&["synth", "--out", p(&data), "--per-category", "30", "--seed", "3"]), 0);
    }
    let out = root.join(format!("split_{name}"));
    assert_eq!(
        dkan(&[
            "split", "--data", p(&data), "--name", name, "--k", "2", "--test-per-category", "8",
            "--base-per-category", "12", "--out", p(&out),
        ]),
        0
    );
    out.join("partition.jsonl")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn end_to_end_pipeline_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let partition = synth_and_split(root, "split1");
    let pre = root.join("pre");
    assert_eq!(
        dkan(&["pretrain", "--preset", "desk", "--pretrain-iterations", "15", "--partition", p(&partition), "--out", p(&pre)]),
        0
    );
    assert!(pre.join("manifest.json").exists());
    assert_eq!(std::fs::read_to_string(pre.join("train_log.jsonl")).unwrap().lines().count(), 15);

    let fine = root.join("fine");
    assert_eq!(
        dkan(&[
            "finetune", "--preset", "desk", "--iterations", "5", "--partition", p(&partition), "--teacher",
            p(&pre.join("base.ckpt")), "--out", p(&fine),
        ]),
        0
    );
    let log = std::fs::read_to_string(fine.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "loss_rpn", "loss_rcnn", "loss_fka", "loss_lka", "loss_total"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    let manifest = json(&fine.join("manifest.json"));
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 2);

    let ev = root.join("eval");
    assert_eq!(
        dkan(&["eval", "--partition", p(&partition), "--checkpoint", p(&fine.join("student.ckpt")), "--out", p(&ev)]),
        0
    );
    let report = json(&ev.join("report.json"));
    for key in ["ap_base", "ap_novel", "ap_all"] {
        assert!((0.0..=1.0).contains(&report[key].as_f64().unwrap()));
    }

    let ev2 = root.join("eval_dets");
    assert_eq!(
        dkan(&["eval", "--partition", p(&partition), "--detections", p(&ev.join("detections.jsonl")), "--out", p(&ev2)]),
        0
    );
    assert_eq!(report["per_category_ap"], json(&ev2.join("report.json"))["per_category_ap"]);

    let rep = root.join("report");
    let r = p(&ev.join("report.json")).to_string();
    let tagged: Vec<String> = ["none", "fka", "lka", "both"].iter().map(|t| format!("{r}={t}")).collect();
    let mut args = vec!["report", "--out", p(&rep)];
    args.extend(tagged.iter().map(String::as_str));
    assert_eq!(dkan(&args), 0);
    let md = std::fs::read_to_string(rep.join("report.md")).unwrap();
    assert!(md.contains("none") && md.contains("both"));
    assert!(md.contains('✓'));
    assert!(rep.join("confusion_lka.svg").exists());

    let other = synth_and_split(root, "split2");
    let ev3 = root.join("eval_split2");
    assert_eq!(
        dkan(&["eval", "--partition", p(&other), "--checkpoint", p(&fine.join("student.ckpt")), "--out", p(&ev3)]),
        0
    );
    let a = format!("{r}=a");
    let b = format!("{}=b", p(&ev3.join("report.json")));
    let bad = root.join("bad");
    let e = dkan_err(&["report", "--out", p(&bad), &a, &b]);
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("different category split"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(dkan(&["synth", "--out", p(&data), "--per-category", "20", "--size", "32"]), 0);
    let out = dir.path().join("s");
    let e = dkan_err(&["split", "--data", p(&data), "--name", "split9", "--out", p(&out)]);
    assert_eq!(e.exit_code(), 1);
    assert!(e.to_string().contains("split1"));
    assert_eq!(dkan(&["pretrain", "--dry-run", "--tau", "0"]), 1);
    assert_eq!(dkan(&["no-such-command"]), 1);
}

#[test]
fn missing_teacher_exits_two_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let partition = synth_and_split(dir.path(), "split1");
    let missing = dir.path().join("nowhere").join("base.ckpt");
    let out = dir.path().join("fine");
    let e = dkan_err(&["finetune", "--partition", p(&partition), "--teacher", p(&missing), "--preset", "desk", "--out", p(&out)]);
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains(p(&missing)));
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "tau = 3\n# comment\nalpha = 50\npreset = desk\n").unwrap();
    let cli = Cli::try_parse_from(["dkan", "pretrain", "--dry-run", "--config", p(&cfg), "--lambda2", "0.1"]).unwrap();
    let Command::Pretrain(a) = cli.command else {
        panic!("expected pretrain");
    };
    let text = render_config(&resolve(&a.train).unwrap());
    for line in ["input_size = 64", "tau = 3", "alpha = 50", "lambda_lka = 0.1", "batch_size = 4"] {
        assert!(text.lines().any(|l| l == line), "missing {line:?} in\n{text}");
    }
}
