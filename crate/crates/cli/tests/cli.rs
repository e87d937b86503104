use std::path::Path;
use std::process::{Command, Output};

fn beamtree(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beamtree"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn generate_train_eval_parse() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let listing = stdout(&beamtree(
        &[
            "gen-data",
            "--out",
            "data",
            "--train-count",
            "60",
            "--dev-count",
            "20",
            "--test-count",
            "20",
            "--train-max-length",
            "20",
            "--test-lengths",
            "25-40",
            "--seed",
            "3",
        ],
        cwd,
    ));
    let names: Vec<&str> = listing.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(names, ["train", "dev", "test_len_25_40"]);
    assert!(cwd.join("data/train.tsv.meta").exists());

    let overrides = [
        "--train=data/train.tsv",
        "--dev=data/dev.tsv",
        "--test=data/test_len_25_40.tsv",
        "--encoder=bt_cell",
        "--beam_size=2",
        "--topk=onesoft",
        "--d_e=8",
        "--d_h=8",
        "--hidden=8",
        "--max_epochs=2",
        "--out_dir=run",
    ];
    let mut args = vec!["train", "--seed", "4"];
    args.extend(overrides);
    let summary: serde_json::Value = serde_json::from_str(stdout(&beamtree(&args, cwd)).trim()).unwrap();
    assert_eq!(summary["epochs_run"], 2);
    let in_run = summary["test_accuracy"]["test_len_25_40"].as_f64().unwrap();
    assert!(cwd.join("run/best.ckpt.config").exists());

    let eval = stdout(&beamtree(
        &[
            "eval",
            "--checkpoint",
            "run/best.ckpt",
            "--split",
            "data/test_len_25_40.tsv",
            "--split",
            "data/dev.tsv",
        ],
        cwd,
    ));
    let lines: Vec<serde_json::Value> = eval.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["accuracy"].as_f64().unwrap(), in_run);
    assert_eq!(lines[1]["count"], 20);

    let out = beamtree(
        &[
            "parse",
            "--checkpoint",
            "run/best.ckpt",
            "--input",
            "[MAX 2 [MIN 8 3 ] 1 ]",
            "--gold",
        ],
        cwd,
    );
    let text = stdout(&out);
    let mut total = 0.0;
    for line in text.lines() {
        let (p, tree) = line.split_once('\t').unwrap();
        total += p.parse::<f64>().unwrap();
        assert!(tree.starts_with('(') && tree.contains("[MIN"), "{tree}");
    }
    assert!((total - 1.0).abs() < 1e-5, "{text}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("span F1"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&beamtree(&["gradcheck"], dir.path()));
    let results: Vec<&str> = text.lines().filter(|l| !l.starts_with('\t')).collect();
    assert!(results.len() >= 6);
    assert!(results.iter().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn bad_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = beamtree(&["train", "--encoder=nope"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    let out = beamtree(
        &["eval", "--checkpoint", "missing.ckpt", "--split", "x.tsv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}
