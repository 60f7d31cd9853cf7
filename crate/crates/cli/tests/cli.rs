use std::fs;
use std::path::Path;
use std::process::Command;

const TINY: &[&str] = &[
    "--set",
    "channels=4",
    "--set",
    "layers=2",
    "--set",
    "stack_n=1",
    "--set",
    "epochs_cell=1",
    "--set",
    "epochs_path=1",
    "--set",
    "epochs_train=1",
    "--set",
    "synth_train=8",
    "--set",
    "synth_val=4",
    "--set",
    "synth_size=16",
    "--set",
    "crop=16x16",
];

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("rspnet").chain(args.iter().copied());
    let code = rspnet_cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn tiny(cmd: &str, extra: &[&str]) -> Vec<String> {
    std::iter::once(cmd)
        .chain(TINY.iter().copied())
        .chain(extra.iter().copied())
        .map(String::from)
        .collect()
}

fn run_owned(args: &[String]) -> (i32, String, String) {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run(&refs)
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_one_on_stderr() {
    let (code, out, err) = run(&["frobnicate"]);
    assert_eq!(code, 1);
    assert!(out.is_empty());
    assert!(err.contains("Usage"));
    let (code, _, err) = run(&["grad-flow", "--bogus"]);
    assert_eq!(code, 1);
    assert!(err.contains("--bogus"));
    let (code, _, err) = run(&["grad-flow", "--set", "no_such_key=1"]);
    assert_eq!(code, 1);
    assert!(err.contains("no_such_key"));
    let (code, _, _) = run(&["grad-flow", "--activation", "tanh"]);
    assert_eq!(code, 1);
}

#[test]
fn help_goes_to_stdout() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    for sub in [
        "search-cell",
        "search-paths",
        "train",
        "eval",
        "synth-data",
        "grad-flow",
        "count-params",
        "selftest",
    ] {
        assert!(out.contains(sub), "missing {sub}");
    }
}

#[test]
fn missing_input_file_is_a_runtime_failure() {
    let (code, _, err) = run(&["count-params", "--genotype", "/nonexistent/g.txt"]);
    assert_eq!(code, 2);
    assert!(err.contains("/nonexistent/g.txt"));
}

#[test]
fn malformed_genotype_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let g = p(dir.path(), "g.txt");
    fs::write(&g, "channels 16\nedge 0 1 sparkle\n").unwrap();
    let (code, _, _) = run(&["count-params", "--genotype", &g]);
    assert_eq!(code, 1);
}

#[test]
fn count_params_prints_both_variants() {
    let dir = tempfile::tempdir().unwrap();
    let g = p(dir.path(), "g.txt");
    fs::write(
        &g,
        "channels 16\nrsp 0\nnodes 2\nedge 0 1 conv3x3\nedge 0 2 conv5x5\nedge 1 2 dilated3x3\n",
    )
    .unwrap();
    let (code, out, err) = run(&["count-params", "--genotype", &g]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("plain") && out.contains("rsp"), "{out}");
}

#[test]
fn grad_flow_reports_all_architectures() {
    let (code, out, _) = run(&["grad-flow", "--depth", "8"]);
    assert_eq!(code, 0);
    for arch in ["architecture=plain", "architecture=residual", "architecture=csp"] {
        assert!(out.contains(arch));
    }
    assert!(out.contains("bypass_exact=true"));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "run.cfg");
    fs::write(&cfg, "# desk run\nlayers = 3\n").unwrap();
    let g = p(dir.path(), "g.txt");
    fs::write(
        &g,
        "channels 16\nrsp 0\nnodes 2\nedge 0 1 identity\nedge 0 2 identity\nedge 1 2 identity\n",
    )
    .unwrap();
    let m = p(dir.path(), "m.txt");
    fs::write(
        &m,
        "k 2\nmode pathnorm\nlayer 0 inputs 0\nlayer 1 inputs 1,0\nlayer 2 inputs 2,1\n",
    )
    .unwrap();
    let (code, _, err) = run(&["count-params", "--config", &cfg, "--genotype", &g, "--macro", &m]);
    assert_eq!(code, 0, "{err}");
    let (code, _, _) = run(&[
        "count-params",
        "--config",
        &cfg,
        "--set",
        "layers=2",
        "--genotype",
        &g,
        "--macro",
        &m,
    ]);
    assert_eq!(code, 1);
}

#[test]
fn full_pipeline_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut files = Vec::new();
    for round in 0..2 {
        let (g, mg, model) = (
            p(d, &format!("g{round}.txt")),
            p(d, &format!("m{round}.txt")),
            p(d, &format!("model{round}.json")),
        );
        let (m1, m2, m3) = (
            p(d, &format!("c{round}.csv")),
            p(d, &format!("s{round}.csv")),
            p(d, &format!("t{round}.csv")),
        );
        let (code, out, err) = run_owned(&tiny("search-cell", &["--seed", "7", "--out", &g, "--metrics", &m1]));
        assert_eq!(code, 0, "{err}");
        assert!(out.starts_with("params="));
        let (code, _, err) = run_owned(&tiny(
            "search-paths",
            &["--seed", "7", "--genotype", &g, "--out", &mg, "--metrics", &m2],
        ));
        assert_eq!(code, 0, "{err}");
        let (code, out, err) = run_owned(&tiny(
            "train",
            &[
                "--seed",
                "7",
                "--genotype",
                &g,
                "--macro",
                &mg,
                "--out",
                &model,
                "--metrics",
                &m3,
            ],
        ));
        assert_eq!(code, 0, "{err}");
        let summary = out.lines().last().unwrap().to_string();
        let (_, e1, _) = run_owned(&tiny("eval", &["--model", &model]));
        let (_, e2, _) = run_owned(&tiny("eval", &["--model", &model]));
        assert_eq!(e1, e2);
        assert_eq!(e1.trim(), summary);
        files.push([g, mg, m1, m2, m3, model]);
    }
    for (a, b) in files[0].iter().zip(&files[1]) {
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{a} vs {b}");
    }
    let csv = fs::read_to_string(&files[0][4]).unwrap();
    assert!(csv.starts_with("epoch,phase,loss,miou\n1,train,"));
}

#[test]
fn synth_data_writes_pgm_pairs_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let data = p(dir.path(), "data");
    let (code, _, err) = run(&[
        "synth-data",
        "--out",
        &data,
        "--count",
        "3",
        "--size",
        "16",
        "--seed",
        "4",
    ]);
    assert_eq!(code, 0, "{err}");
    let mut names: Vec<String> = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "0000.img.pgm",
            "0000.lab.pgm",
            "0001.img.pgm",
            "0001.lab.pgm",
            "0002.img.pgm",
            "0002.lab.pgm"
        ]
    );
    assert!(fs::read(dir.path().join("data/0000.img.pgm"))
        .unwrap()
        .starts_with(b"P5"));

    let g = p(dir.path(), "g.txt");
    fs::write(
        &g,
        "channels 4\nrsp 0\nnodes 2\nedge 0 1 conv3x3\nedge 0 2 identity\nedge 1 2 identity\n",
    )
    .unwrap();
    let model = p(dir.path(), "model.json");
    let (code, _, err) = run_owned(&tiny("train", &["--genotype", &g, "--out", &model, "--f64"]));
    assert_eq!(code, 0, "{err}");
    let (code, out, err) = run_owned(&tiny("eval", &["--model", &model, "--data", &data]));
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("params=") && out.contains(" miou="));
}

#[test]
fn selftest_passes() {
    let (code, out, err) = run(&["selftest", "--seeds", "2"]);
    assert_eq!(code, 0, "{out}{err}");
    assert!(out.contains("selftest passed"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_rspnet");
    let bad = Command::new(bin).arg("nope").output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("Usage"));
    let missing = Command::new(bin)
        .args(["eval", "--model", "/nonexistent.json"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    let ok = Command::new(bin)
        .args(["grad-flow", "--depth", "3", "--arch", "csp"])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
}
