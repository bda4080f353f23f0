use std::fs;
use std::path::Path;

use clap::error::ErrorKind;
use clap::Parser;
use treplina::data::Vocab;
use treplina::model::{Checkpoint, Model, ModelConfig};
use treplina_cli::setup::{model_seq_len, Corpus};
use treplina_cli::{
    cmd_eval, cmd_gen_data, cmd_sweep, cmd_train, resolve_layers, Cli, Command, EvalRecord, Method, SweepReport,
    TrainReport,
};

fn parse(argv: &[&str]) -> Command {
    let argv: Vec<&str> = std::iter::once("treplina").chain(argv.iter().copied()).collect();
    Cli::try_parse_from(argv).unwrap().command
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(path: &Path, n: usize, extra: &[&str]) {
    let n = n.to_string();
    let mut argv = vec![
        "gen-data",
        "--out",
        s(path),
        "--n",
        &n,
        "--base-vocab",
        "10",
        "--cipher-seed",
        "2",
        "--min-len",
        "2",
        "--max-len",
        "3",
        "--seed",
        "4",
    ];
    argv.extend_from_slice(extra);
    let Command::GenData(a) = parse(&argv) else { panic!() };
    cmd_gen_data(&a).unwrap();
}

/// Tiny and fast: one or two blocks, short sequences, a few pretraining steps.
const FAST: &[&str] = &[
    "--max-src-len",
    "8",
    "--max-tgt-len",
    "6",
    "--lr",
    "5e-3",
    "--grad-accum",
    "1",
    "--micro-batch",
    "8",
    "--pretrain-steps",
    "5",
    "--dev-cap",
    "8",
    "--eval-batch",
    "32",
];

fn log_text(dir: &Path, prefix: &str) -> String {
    let entry = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            name.starts_with(prefix) && name.ends_with(".log")
        })
        .expect("timestamped log file");
    fs::read_to_string(entry).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_writes_a_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    gen(&a, 1000, &["--fertility", "2"]);
    gen(&b, 1000, &["--fertility", "2"]);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 1001);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let side_a = fs::read_to_string(dir.path().join("a.csv.spec.json")).unwrap();
    assert_eq!(side_a, fs::read_to_string(dir.path().join("b.csv.spec.json")).unwrap());
    assert!(side_a.contains("\"reverse\"") && side_a.contains("\"fertility\": 2"));
}

#[test]
fn bad_reorder_rule_is_a_usage_error() {
    let err = Cli::try_parse_from(["treplina", "gen-data", "--out", "x.csv", "--rule", "shuffle"]).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::ValueValidation);
    assert!(Cli::try_parse_from(["treplina", "gen-data", "--out", "x.csv", "--rule", "rotate-2"]).is_ok());
}

#[test]
fn paper_layers_map_by_fractional_depth() {
    let Command::Sweep(a) = parse(&["sweep", "--data", "d.csv", "--out-dir", "o", "--paper-layers"]) else {
        panic!()
    };
    assert_eq!(resolve_layers(&a), (vec![1, 2, 3, 4], 2));
    let Command::Sweep(a) = parse(&[
        "sweep",
        "--data",
        "d.csv",
        "--out-dir",
        "o",
        "--paper-layers",
        "--n-layers",
        "8",
    ]) else {
        panic!()
    };
    assert_eq!(resolve_layers(&a), (vec![1, 3, 4, 5, 6, 8], 4));
    let Command::Sweep(a) = parse(&["sweep", "--data", "d.csv", "--out-dir", "o", "--layers", "3,1,3"]) else {
        panic!()
    };
    assert_eq!(resolve_layers(&a).0, vec![1, 3]);
}

#[test]
fn out_of_range_layer_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    gen(&data, 30, &[]);
    let out = dir.path().join("out");
    let mut argv = vec!["sweep", "--data", s(&data), "--out-dir", s(&out), "--layers", "1,5"];
    argv.extend_from_slice(FAST);
    let Command::Sweep(a) = parse(&argv) else { panic!() };
    let err = cmd_sweep(&a).unwrap_err();
    assert!(format!("{err:#}").contains("outside 1..=4"), "{err:#}");
    assert!(!out.exists());
}

#[test]
fn small_sweep_counts_runs_and_warns_on_heavy_cka_weight() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    gen(&data, 40, &[]);
    let out = dir.path().join("sweep");
    let mut argv = vec![
        "sweep",
        "--data",
        s(&data),
        "--out-dir",
        s(&out),
        "--n-layers",
        "2",
        "--lambda",
        "0.3",
        "--jobs",
        "2",
    ];
    argv.extend_from_slice(FAST);
    let Command::Sweep(a) = parse(&argv) else { panic!() };
    let report = cmd_sweep(&a).unwrap();
    assert_eq!(report.records.len(), 1 + 1 + 2 * 2);
    assert_eq!(report.summary.repina_layer, 1);
    assert!(report.records.iter().all(|r| r.cka.len() == 2));
    assert_eq!(SweepReport::read(&out.join("sweep.jsonl")).unwrap(), report);
    assert!(log_text(&out, "sweep-").contains("WARN lambda 0.3"));
    let plot = fs::read_to_string(out.join("sweep_plot.csv")).unwrap();
    assert_eq!(plot.lines().count(), 7);
    assert!(plot.lines().nth(1).unwrap().starts_with("NoAlign,,"));
}

#[test]
fn train_weights_select_the_method() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    gen(&data, 30, &[]);
    for (lambda, mu, method) in [("0", "0", Method::NoAlign), ("0", "0.05", Method::RepinaOnly)] {
        let out = dir.path().join(format!("t{lambda}{mu}"));
        let mut argv = vec![
            "train",
            "--data",
            s(&data),
            "--out-dir",
            s(&out),
            "--epochs",
            "2",
            "--lambda",
            lambda,
            "--mu",
            mu,
            "--n-layers",
            "2",
        ];
        argv.extend_from_slice(FAST);
        let Command::Train(a) = parse(&argv) else { panic!() };
        let report = cmd_train(&a).unwrap();
        assert_eq!(report.summary.method, method);
        assert_eq!(report.epochs.len(), 2);
        assert_eq!(TrainReport::read(&out.join("train_report.jsonl")).unwrap(), report);
        for f in ["best.ckpt.json", "final.ckpt.json", "train_log.jsonl"] {
            assert!(out.join(f).exists(), "{f}");
        }
        let logs = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
        assert_eq!(logs.contains("\"l_repina\":0.0"), method == Method::RepinaOnly);
    }
}

#[test]
fn dev_evaluation_is_capped() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    gen(&data, 6000, &[]);
    let out = dir.path().join("t");
    let argv = [
        "train",
        "--data",
        s(&data),
        "--out-dir",
        s(&out),
        "--epochs",
        "1",
        "--n-layers",
        "1",
        "--max-src-len",
        "6",
        "--max-tgt-len",
        "4",
        "--micro-batch",
        "64",
        "--grad-accum",
        "1",
        "--pretrain-steps",
        "0",
        "--eval-batch",
        "100",
        "--lambda",
        "0",
        "--mu",
        "0",
    ];
    let Command::Train(a) = parse(&argv) else { panic!() };
    let report = cmd_train(&a).unwrap();
    assert_eq!(report.summary.n_dev, 1000);
    assert_eq!(report.epochs[0].dev.n_examples, 500);
}

fn untrained_checkpoint(data: &Path, path: &Path) {
    let Command::Eval(a) = parse(&["eval", "--data", s(data), "--checkpoint", "x", "--out-dir", "o"]) else {
        panic!()
    };
    let corpus = Corpus::load(&a.data).unwrap();
    let vocab: Vocab = corpus.vocab();
    let model = Model::new(ModelConfig::toy(vocab.len(), model_seq_len(256, 256), 0)).unwrap();
    let mut ckpt = Checkpoint::from_model(&model, 0);
    ckpt.vocabulary = Some(vocab.tokens().to_vec());
    ckpt.save(path).unwrap();
}

#[test]
fn zero_shot_on_an_untrained_model_scores_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    gen(&data, 60, &[]);
    let ckpt = dir.path().join("untrained.ckpt.json");
    untrained_checkpoint(&data, &ckpt);
    let out = dir.path().join("eval");
    let Command::Eval(a) = parse(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--mode",
        "zero-shot",
        "--max-tgt-len",
        "8",
        "--out-dir",
        s(&out),
    ]) else {
        panic!()
    };
    let rec = cmd_eval(&a).unwrap();
    assert_eq!(rec.mode, "zero-shot");
    assert_eq!(rec.split, "dev");
    assert_eq!(rec.report.n_examples, 6);
    assert!(rec.report.composite < 10.0, "{rec:?}");
    assert_eq!(EvalRecord::read(&out.join("eval_report.json")).unwrap(), rec);
}

#[test]
fn unusual_shot_count_warns_but_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    gen(&data, 60, &[]);
    let ckpt = dir.path().join("untrained.ckpt.json");
    untrained_checkpoint(&data, &ckpt);
    let out = dir.path().join("eval");
    let Command::Eval(a) = parse(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--mode",
        "few-shot",
        "--k",
        "2",
        "--max-tgt-len",
        "4",
        "--out-dir",
        s(&out),
    ]) else {
        panic!()
    };
    assert_eq!(cmd_eval(&a).unwrap().mode, "few-shot-2");
    assert!(log_text(&out, "eval-").contains("WARN few-shot k = 2"));
}

#[test]
fn corrupt_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    gen(&data, 20, &[]);
    let ckpt = dir.path().join("bad.ckpt.json");
    fs::write(&ckpt, b"{\"format\": \"treplina-ckpt-1\", \"config\": ").unwrap();
    let Command::Eval(a) = parse(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out-dir",
        s(dir.path()),
    ]) else {
        panic!()
    };
    let err = cmd_eval(&a).unwrap_err();
    assert!(format!("{err:#}").contains("corrupt"), "{err:#}");
}
