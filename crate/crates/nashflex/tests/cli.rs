use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_nashflex");

fn run(args: &[&str]) -> i32 {
    let out = Command::new(BIN).args(args).output().expect("spawn binary");
    out.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_STAGE: &str = r#"{"grid": {"resolution": 64}, "stage": {"lambda": 60, "tau": 1.5}}"#;

#[test]
fn malformed_config_exits_2_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("broken.json", "{\"stage\": "),
        ("typo.json", r#"{"stage": {"lamda": 60}}"#),
        ("foreign.json", r#"{"iterate": {}}"#),
        ("range.json", r#"{"stage": {"delta": -1}}"#),
    ] {
        let cfg = write(tmp.path(), name, text);
        let out = tmp.path().join(format!("out_{name}"));
        assert_eq!(run(&["stage", "--config", s(&cfg), "--out", s(&out)]), 2, "{name}");
        assert!(!out.exists(), "{name} created output");
    }
    let out = tmp.path().join("missing");
    assert_eq!(run(&["stage", "--config", s(&tmp.path().join("nope.json")), "--out", s(&out)]), 2);
    assert!(!out.exists());
    assert_eq!(run(&["stage"]), 2, "no output directory");
    assert_eq!(run(&["frobnicate", "--out", s(&out)]), 2);
}

#[test]
fn identical_configs_give_byte_identical_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "stage.json", SMALL_STAGE);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for d in [&a, &b] {
        assert_eq!(run(&["stage", "--config", s(&cfg), "--out", s(d), "--seed", "7"]), 0);
    }
    let ma = std::fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("manifest.json")).unwrap());
    assert_eq!(std::fs::read(a.join("certificate.csv")).unwrap(), std::fs::read(b.join("certificate.csv")).unwrap());
    assert_eq!(run(&["stage", "--config", s(&cfg), "--out", s(&c), "--seed", "8"]), 0);
    let m = manifest(&c);
    assert_eq!(m["seed"], 8);
    assert_eq!(m["config_sha256"], manifest(&a)["config_sha256"]);
    // every artifact is listed with its checksum
    for art in m["artifacts"].as_array().unwrap() {
        assert!(c.join(art["path"].as_str().unwrap()).is_file());
    }
}

#[test]
fn precondition_violation_exits_3_with_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "low.json", r#"{"grid": {"resolution": 64}, "stage": {"lambda": 20, "tau": 1.2}}"#);
    let out = tmp.path().join("o");
    assert_eq!(run(&["stage", "--config", s(&cfg), "--out", s(&out)]), 3);
    let m = manifest(&out);
    assert_eq!(m["status"], "precondition_violation");
    let pre = m["preconditions"].as_array().unwrap();
    assert!(pre.iter().any(|p| p["outcome"] == "violated_and_aborted" && p["name"] == "lambda >= lambda0"));
}

#[test]
fn numerical_failure_exits_4() {
    // The band iteration after the collar layer runs at the layer frequency and its
    // decomposition breaks down.
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "x.json", r#"{"extend": {"problem": {"nx": 2048, "nt": 64}, "params": {"k": 4}, "iterate": {"q_max": 1}}}"#);
    let out = tmp.path().join("o");
    assert_eq!(run(&["extend", "--config", s(&cfg), "--out", s(&out)]), 4);
    let m = manifest(&out);
    assert_eq!(m["status"], "numerical_failure");
    assert!(m["error"].as_str().unwrap().contains("decomposition"));
    assert!(out.join("convergence.csv").is_file() && out.join("gap.json").is_file());
}

#[test]
fn extend_on_circle_problem_file_reports_positive_gap() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "circle.json", r#"{"nx": 512, "nt": 32, "epsilon": 0.2, "metric": {"kind": "flat"}, "curve": {"kind": "circle", "normal": {"kind": "inward"}}}"#);
    let cfg = write(tmp.path(), "run.json", r#"{"extend": {"problem_file": "circle.json", "params": {"k": 1.6}}, "out": "result"}"#);
    assert_eq!(run(&["extend", "--config", s(&cfg)]), 0);
    let out = tmp.path().join("result");
    let gap: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("gap.json")).unwrap()).unwrap();
    assert_eq!(gap["schema"], "nashflex.gap");
    assert!(gap["report"]["min"].as_f64().unwrap() > 0.0);
    let csv = std::fs::read_to_string(out.join("gap.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 512);
    assert!(std::fs::read_to_string(out.join("u.obj")).unwrap().starts_with("# nashflex mesh 512x32"));

    // verify re-reads the saved map and reproduces the gap
    let vcfg = write(
        tmp.path(),
        "verify.json",
        r#"{"verify": {"input": "result/u_value.json", "problem_file": "circle.json", "suite": []}}"#,
    );
    let vout = tmp.path().join("v");
    assert_eq!(run(&["verify", "--config", s(&vcfg), "--out", s(&vout)]), 0);
    let (a, b) = (manifest(&out), manifest(&vout));
    let diff = (a["measured"]["gap.min"].as_f64().unwrap() - b["measured"]["gap.min"].as_f64().unwrap()).abs();
    assert!(diff < 1e-6, "{diff}");
}

#[test]
fn shortness_loss_halves_the_collar_depth() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "deep.json", r#"{"extend": {"problem": {"nx": 512, "nt": 32, "epsilon": 1.6}, "params": {"k": 1.6}}, "export": {"mesh": false, "fields": false}}"#);
    let out = tmp.path().join("o");
    let code = run(&["extend", "--config", s(&cfg), "--out", s(&out)]);
    let m = manifest(&out);
    let pre = m["preconditions"].as_array().unwrap();
    assert!(pre.iter().any(|p| p["outcome"] == "violated_and_retried"), "{m}");
    assert!(m["measured"]["extend.halvings"].as_f64().unwrap() >= 1.0);
    assert!(m["measured"]["extend.epsilon"].as_f64().unwrap() < 1.0);
    assert!(code == 0 || code == 3, "{code}");
}

#[test]
fn ladder_csv_has_slope_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "ladder.json",
        r#"{"ladder": {"resolution": 96, "delta": 0.09, "tau": 1.5, "lambdas": [40, 60, 90]}}"#,
    );
    let out = tmp.path().join("o");
    assert_eq!(run(&["ladder", "--config", s(&cfg), "--out", s(&out)]), 0);
    let csv = std::fs::read_to_string(out.join("ladder.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = header.iter().position(|h| *h == "slope_e_c0").unwrap();
    for l in &lines[1..] {
        let v: f64 = l.split(',').nth(col).unwrap().parse().unwrap();
        assert!(v.is_finite() && v < 0.0);
    }
}

#[test]
fn iterate_writes_one_csv_row_per_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "it.json",
        r#"{"grid": {"resolution": 128}, "iterate": {"schedule": {"a": 32, "b": 1.1, "theta": 0.45, "delta1": 0.25, "q_max": 2, "tau": 1.5,
            "policy": {"kind": "geometric", "delta_ratio": 0.25, "lambda_ratio": 2.0, "lambda1": 1.5}}}}"#,
    );
    let out = tmp.path().join("o");
    assert_eq!(run(&["iterate", "--config", s(&cfg), "--out", s(&out)]), 0);
    let m = manifest(&out);
    let completed = m["measured"]["iterate.completed"].as_f64().unwrap() as usize;
    assert_eq!(completed, 2);
    let csv = std::fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + completed);
    let conv: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("convergence.json")).unwrap()).unwrap();
    assert_eq!(conv["schema"], "nashflex.convergence");
    assert_eq!(conv["version"], 1);
}

#[test]
fn stage_mesh_oscillates_at_the_corrugation_wavelength() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "stage.json", r#"{"grid": {"resolution": 128}, "stage": {"lambda": 60, "tau": 1.5, "amplitude": {"kind": "constant", "fraction": 0.5}}}"#);
    let out = tmp.path().join("o");
    assert_eq!(run(&["stage", "--config", s(&cfg), "--out", s(&out)]), 0);
    let obj = std::fs::read_to_string(out.join("v.obj")).unwrap();
    let verts: Vec<[f64; 3]> = obj
        .lines()
        .filter(|l| l.starts_with("v "))
        .map(|l| {
            let v: Vec<f64> = l[2..].split_whitespace().map(|x| x.parse().unwrap()).collect();
            [v[0], v[1], v[2]]
        })
        .collect();
    assert_eq!(verts.len(), 128 * 128);
    let row = &verts[64 * 128..65 * 128];
    let maxima: Vec<f64> = (1..127).filter(|&i| row[i][2] > row[i - 1][2] && row[i][2] >= row[i + 1][2]).map(|i| row[i][0]).collect();
    assert!(maxima.len() >= 4, "{maxima:?}");
    let spacing = (maxima[maxima.len() - 1] - maxima[0]) / (maxima.len() - 1) as f64;
    let expected = std::f64::consts::TAU / 60f64.powf(1.5);
    assert!((spacing / expected - 1.0).abs() < 0.05, "{spacing} vs {expected}");
}

#[test]
fn torus_mesh_is_closed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "t.json",
        r#"{"grid": {"resolution": 128}, "embed_torus": {"schedule": {"a": 32, "b": 1.1, "theta": 0.45, "delta1": 0.5, "q_max": 1, "tau": 2.0,
            "policy": {"kind": "geometric", "delta_ratio": 0.25, "lambda_ratio": 2.0, "lambda1": 1.2}}}}"#,
    );
    let out = tmp.path().join("o");
    assert_eq!(run(&["embed-torus", "--config", s(&cfg), "--out", s(&out)]), 0);
    let obj = std::fs::read_to_string(out.join("u.obj")).unwrap();
    let faces = obj.lines().filter(|l| l.starts_with("f ")).count();
    assert_eq!(faces, 2 * 128 * 128);
}

#[test]
fn verify_suite_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(run(&["verify", "--out", s(&out), "--seed", "3"]), 0);
    let m = manifest(&out);
    for c in ["decompose", "newton", "frames", "mollify", "holder", "rigidity"] {
        assert_eq!(m["measured"][format!("{c}.pass")], 1.0, "{c}");
    }
}

#[test]
fn shipped_example_configs_plan() {
    use nashflex::cli::config::{parse_config, plan};
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        // problem files carry no command and are loaded by the extend config
        let raw: serde_json::Value = serde_json::from_str(&text).unwrap();
        if raw.get("command").is_none() {
            continue;
        }
        let cfg = parse_config(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let cmd = cfg.command.unwrap();
        plan(&cfg, cmd, &dir).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert_eq!(seen, 6);
}
