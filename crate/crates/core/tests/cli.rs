use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use lattice_tn::cli::{labels_path, run};
use proptest::prelude::*;

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cli(args: &[&str], stdin: &str) -> Output {
    let mut input = stdin.as_bytes();
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("lattice-tn").chain(args.iter().copied());
    let code = run(argv, &mut input, &mut out, &mut err);
    Output {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

const SMALL: &[&str] = &[
    "--synthetic",
    "200",
    "--d-model",
    "16",
    "--heads",
    "2",
    "--seed",
    "3",
];

/// Checkpoint trained once and shared by the tests in this file.
fn trained() -> &'static Path {
    static CKPT: OnceLock<PathBuf> = OnceLock::new();
    CKPT.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let ckpt = dir.join("small.ckpt");
        let mut args = vec![
            "train",
            "--epochs",
            "3",
            "--learning-rate",
            "0.01",
            "--checkpoint",
        ];
        args.push(ckpt.to_str().unwrap());
        args.extend(SMALL);
        let o = cli(&args, "");
        assert_eq!(o.code, 0, "{}", o.stderr);
        ckpt
    })
}

fn with_ckpt<'a>(command: &'a str, ckpt: &'a Path, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![command, "--checkpoint", ckpt.to_str().unwrap()];
    args.extend(extra);
    args
}

#[test]
fn train_writes_checkpoint_labels_and_log_lines() {
    let ckpt = trained();
    assert!(ckpt.is_file());
    let labels = std::fs::read_to_string(labels_path(ckpt)).unwrap();
    assert_eq!(labels.lines().count(), 113);
}

#[test]
fn eval_reports_table_and_json() {
    let ckpt = trained();
    let mut extra = SMALL.to_vec();
    extra.extend(["--split", "test"]);
    let o = cli(&with_ckpt("eval", ckpt, &extra), "");
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.contains("token accuracy"), "{}", o.stdout);

    extra.push("--json");
    let o = cli(&with_ckpt("eval", ckpt, &extra), "");
    assert_eq!(o.code, 0, "{}", o.stderr);
    let v: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
    let acc = v["token_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn eval_accepts_matching_labels_and_rejects_others() {
    let ckpt = trained();
    let good = labels_path(ckpt);
    let mut extra = SMALL.to_vec();
    extra.extend(["--labels", good.to_str().unwrap()]);
    assert_eq!(cli(&with_ckpt("eval", ckpt, &extra), "").code, 0);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("labels.tsv");
    std::fs::write(
        &bad,
        "0\tO\n1\tB-CARDINAL\n2\tM-CARDINAL\n3\tE-CARDINAL\n4\tS-CARDINAL\n",
    )
    .unwrap();
    let mut extra = SMALL.to_vec();
    extra.extend(["--labels", bad.to_str().unwrap()]);
    let o = cli(&with_ckpt("eval", ckpt, &extra), "");
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("incompatible"), "{}", o.stderr);
}

#[test]
fn eval_on_empty_split_is_a_data_error() {
    let o = cli(
        &with_ckpt("eval", trained(), &["--synthetic", "1", "--split", "test"]),
        "",
    );
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("empty"), "{}", o.stderr);
}

#[test]
fn eval_with_disjoint_vocabulary_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("foreign.tsv");
    std::fs::write(&corpus, "ㄅ\tO\nㄆ\tO\n").unwrap();
    let extra = ["--corpus", corpus.to_str().unwrap(), "--split", "all"];
    let o = cli(&with_ckpt("eval", trained(), &extra), "");
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("no characters"), "{}", o.stderr);
}

#[test]
fn normalize_keeps_one_line_per_input_line() {
    let input = "今天气温-3℃。\n\n比分3:2\r\n";
    let o = cli(&with_ckpt("normalize", trained(), &[]), input);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let lines: Vec<&str> = o.stdout.lines().collect();
    assert_eq!(lines.len(), 3, "{:?}", o.stdout);
    assert_eq!(lines[1], "");
    assert!(
        !lines[0].chars().any(|c| c.is_ascii_digit()),
        "{}",
        lines[0]
    );
}

#[test]
fn zero_epochs_saves_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("init.ckpt");
    let mut args = vec![
        "train",
        "--epochs",
        "0",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ];
    args.extend(SMALL);
    let o = cli(&args, "");
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.contains("no training epochs"));
    assert!(ckpt.is_file());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cli(&["frobnicate"], "").code, 1);
    assert_eq!(cli(&["train"], "").code, 1);
    assert_eq!(
        cli(
            &[
                "train",
                "--checkpoint",
                "x",
                "--d-model",
                "30",
                "--heads",
                "7"
            ],
            ""
        )
        .code,
        1
    );
    let o = cli(
        &[
            "eval",
            "--checkpoint",
            "x",
            "--corpus",
            "/nonexistent/c.tsv",
        ],
        "",
    );
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("file not found"), "{}", o.stderr);
}

#[test]
fn help_exits_zero() {
    let o = cli(&["--help"], "");
    assert_eq!(o.code, 0);
    assert!(o.stdout.contains("normalize"));
}

#[test]
fn missing_checkpoint_file_is_a_data_error() {
    let o = cli(
        &["normalize", "--checkpoint", "/nonexistent/model.ckpt"],
        "a\n",
    );
    assert_eq!(o.code, 2);
}

#[test]
fn lattice_prints_tokens_and_distances() {
    let o = cli(&["lattice", "学习", "--distances"], "");
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.contains("d_hh"));
    assert!(o.stdout.contains("d_tt"));
}

#[test]
fn synthesize_output_parses_back() {
    let o = cli(&["synthesize", "--synthetic", "5", "--data-seed", "2"], "");
    assert_eq!(o.code, 0);
    let corpus = lattice_tn::dataset::parse_corpus(&o.stdout).unwrap();
    assert_eq!(corpus.len(), 5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normalize_never_crashes(lines in prop::collection::vec("[^\n]{0,160}", 0..4)) {
        let mut input = lines.join("\n");
        if !lines.is_empty() {
            input.push('\n');
        }
        let o = cli(&with_ckpt("normalize", trained(), &[]), &input);
        prop_assert_eq!(o.code, 0, "{}", o.stderr);
        prop_assert_eq!(o.stdout.matches('\n').count(), lines.len());
    }
}
