use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn calltok(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calltok"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = calltok(args);
    assert!(
        out.status.success(),
        "calltok {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Small corpus: 2 call types x 2 callers x 4 samples, 2 layers.
fn synth(root: &Path, extra: &[&str]) {
    let mut args = vec![
        "synth",
        "--out",
        p(root),
        "--n-calltype",
        "2",
        "--n-caller",
        "2",
        "--samples-per-pair",
        "4",
        "--layers",
        "2",
        "--dim",
        "4",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synth_is_valid_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, &[]);
    synth(&b, &[]);
    calltok::corpus::load_manifest(&a.join("manifest.json")).unwrap();
    assert_eq!(tree(&a), tree(&b));
    let prov = fs::read_to_string(a.join("provenance.json")).unwrap();
    assert!(prov.contains("\"seed\": 7") && prov.contains("config_hash"));
}

#[test]
fn invalid_output_dir_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    fs::write(&file, "x").unwrap();
    let out = calltok(&["synth", "--out", p(&file)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error:"), "{err}");
    assert_eq!(fs::read_to_string(&file).unwrap(), "x");
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn full_command_chain() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let out = dir.path().join("out");
    synth(&corpus, &[]);
    let common = |cmd: &'static str| vec![cmd, "--corpus", p(&corpus), "--out", p(&out)];

    // VQ grid: 6 rows.
    let mut args = common("train");
    args.extend(["--quantizer", "vq", "--epochs", "1", "--vocab-size", "8"]);
    ok(&args);
    let grid = fs::read_to_string(out.join("grid_vq.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 6);
    assert_eq!(grid.lines().filter(|l| l.contains(",true,ok,")).count(), 1);

    // GVQ grid: 72 rows.
    let mut args = common("train");
    args.extend(["--quantizer", "gvq", "--epochs", "1", "--vocab-size", "8"]);
    ok(&args);
    assert_eq!(
        fs::read_to_string(out.join("grid_gvq.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 72
    );

    // Single point: 1 row.
    let single = dir.path().join("single");
    ok(&[
        "train",
        "--corpus",
        p(&corpus),
        "--out",
        p(&single),
        "--quantizer",
        "vq",
        "--single-point",
        "--epochs",
        "1",
        "--vocab-size",
        "8",
    ]);
    assert_eq!(
        fs::read_to_string(single.join("grid_vq.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    for kind in ["vq", "gvq"] {
        let mut args = common("tokenize");
        args.extend(["--quantizer", kind]);
        let msg = ok(&args);
        assert!(msg.contains("ordering: pass"), "{msg}");
        let text = fs::read_to_string(out.join(format!("tokens_{kind}.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), 1 + 16 * 2);
    }

    // Layer subset.
    let subset = dir.path().join("subset.jsonl");
    let mut args = common("tokenize");
    args.extend(["--quantizer", "vq", "--layers", "1", "--tokens", p(&subset)]);
    ok(&args);
    let file = calltok::TokenFile::read(&subset).unwrap();
    assert_eq!(file.layers(), vec![1]);
    assert_eq!(file.sequences.len(), 16);

    let mut args = common("dist-report");
    args.extend(["--quantizer", "vq", "--dump-matrix"]);
    ok(&args);
    let csv = fs::read_to_string(out.join("distances_vq.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    let svg = fs::read_to_string(out.join("distances_vq.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
    assert!(!svg.contains("<script"));
    assert!(out.join("distances_vq_layer0.cdst").is_file());

    ok(&common("classify"));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(
        lines[1].starts_with("CTID,synthetic,2,50.00,"),
        "{}",
        lines[1]
    );
    assert!(
        lines[2].starts_with("CLID,synthetic,2,50.00,"),
        "{}",
        lines[2]
    );
    let uar = fs::read_to_string(out.join("uar_layers.csv")).unwrap();
    // 2 tasks x 2 layers x 3 methods x 2 splits.
    assert_eq!(uar.lines().count(), 1 + 24);
    for task in ["ctid", "clid"] {
        let svg = fs::read_to_string(out.join(format!("uar_{task}.svg"))).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 3);
    }
}

#[test]
fn single_layer_and_empty_categories() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let out = dir.path().join("out");
    ok(&[
        "synth",
        "--out",
        p(&corpus),
        "--n-calltype",
        "2",
        "--n-caller",
        "1",
        "--samples-per-pair",
        "4",
        "--layers",
        "1",
        "--dim",
        "4",
    ]);
    ok(&[
        "train",
        "--corpus",
        p(&corpus),
        "--out",
        p(&out),
        "--single-point",
        "--epochs",
        "1",
        "--vocab-size",
        "6",
    ]);
    ok(&["tokenize", "--corpus", p(&corpus), "--out", p(&out)]);
    ok(&["dist-report", "--corpus", p(&corpus), "--out", p(&out)]);
    let svg = fs::read_to_string(out.join("distances_vq.svg")).unwrap();
    // One layer: points only; one caller: both inter-caller series omitted.
    assert_eq!(svg.matches("<polyline").count(), 0);
    assert_eq!(svg.matches("<circle").count(), 2);
    assert_eq!(svg.matches("no pairs (omitted)").count(), 2);
    let csv = fs::read_to_string(out.join("distances_vq.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",0,NA,NA,")).count(), 2);
}

#[test]
fn missing_inputs_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let out = dir.path().join("out");
    synth(&corpus, &[]);

    let r = calltok(&["tokenize", "--corpus", p(&corpus), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(1));
    let err = String::from_utf8(r.stderr).unwrap();
    assert!(err.starts_with("error: checkpoint not found"), "{err}");
    assert!(err.contains("vq.ckpt"));

    let r = calltok(&["classify", "--corpus", p(&corpus), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(1));
    let err = String::from_utf8(r.stderr).unwrap();
    assert!(err.starts_with("error: token file not found"), "{err}");
    assert!(err.contains(p(&out.join("tokens_vq.jsonl"))), "{err}");
}

#[test]
fn config_file_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"seed": 3, "synth": {"n_calltype": 2, "n_caller": 2, "samples_per_pair": 3, "layers": 1, "dim": 3}}"#,
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth", "--config", p(&cfg), "--out", p(&a)]);
    ok(&["synth", "--config", p(&cfg), "--out", p(&b), "--seed", "4"]);
    let pa = fs::read_to_string(a.join("provenance.json")).unwrap();
    let pb = fs::read_to_string(b.join("provenance.json")).unwrap();
    assert!(pa.contains("\"seed\": 3"));
    assert!(pb.contains("\"seed\": 4"));
    let m = calltok::corpus::load_manifest(&a.join("manifest.json")).unwrap();
    assert_eq!(m.records.len(), 12);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{not json").unwrap();
    let r = calltok(&["synth", "--config", p(&bad), "--out", p(&a)]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn thread_env_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let r = Command::new(env!("CARGO_BIN_EXE_calltok"))
        .args(["synth", "--out", p(&dir.path().join("x"))])
        .env("CALLTOK_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8(r.stderr)
        .unwrap()
        .contains("CALLTOK_THREADS"));
    let r = Command::new(env!("CARGO_BIN_EXE_calltok"))
        .args([
            "synth",
            "--out",
            p(&dir.path().join("y")),
            "--samples-per-pair",
            "3",
        ])
        .env("CALLTOK_THREADS", "2")
        .output()
        .unwrap();
    assert!(r.status.success());
}
