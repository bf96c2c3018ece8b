mod common;

use macow::cli::{run, EXIT_IO, EXIT_OK, EXIT_USAGE};
use macow::tensor::mcwt;

fn s(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_without_data_is_usage_error() {
    assert_eq!(run(["macow", "train", "--checkpoint", "x.ckpt"]), EXIT_USAGE);
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(run(["macow", "frobnicate"]), EXIT_USAGE);
    assert_eq!(run(["macow", "verify", "--precision", "f16"]), EXIT_USAGE);
}

#[test]
fn missing_checkpoint_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.pgm");
    let ck = dir.path().join("nope.ckpt");
    assert_eq!(run(["macow", "sample", "--checkpoint", s(&ck), "--out", s(&out)]), EXIT_IO);
}

#[test]
fn verify_f64_passes() {
    assert_eq!(run(["macow", "verify", "--precision", "f64"]), EXIT_OK);
}

#[test]
fn train_eval_sample_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = common::mixture_data(64, 16, 1);
    let train_path = dir.path().join("train.mcwt");
    let test_path = dir.path().join("test.mcwt");
    mcwt::save(train.images(), &train_path).unwrap();
    mcwt::save(test.images(), &test_path).unwrap();
    let cfg = dir.path().join("toy.cfg");
    std::fs::write(&cfg, "levels = 1\ndepths = [1]\nhidden_channels = 4\nimage = 8x8x1\nn_bits = 5\n").unwrap();
    let ck = dir.path().join("m.ckpt");
    let args = [
        "macow", "train", "--data", s(&train_path), "--config", s(&cfg), "--checkpoint", s(&ck), "--steps", "6",
        "--batch-size", "8", "--mode", "unif",
    ];
    assert_eq!(run(args), EXIT_OK);
    let log = std::fs::read_to_string(ck.with_extension("csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,loss_nats,bpd,lr,grad_norm");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("1,"));

    // resuming to a later step appends to the log
    let mut resume = args.to_vec();
    resume[9] = "9";
    resume.push("--resume");
    assert_eq!(run(resume), EXIT_OK);
    assert_eq!(std::fs::read_to_string(ck.with_extension("csv")).unwrap().lines().count(), 10);

    assert_eq!(run(["macow", "eval", "--data", s(&test_path), "--checkpoint", s(&ck), "--k", "4"]), EXIT_OK);
    let out = dir.path().join("grid.pgm");
    assert_eq!(run(["macow", "sample", "--checkpoint", s(&ck), "--n", "4", "--out", s(&out)]), EXIT_OK);
    let bytes = std::fs::read(&out).unwrap();
    assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
}

#[test]
fn corrupt_data_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.mcwt");
    std::fs::write(&data, b"not a tensor").unwrap();
    let ck = dir.path().join("m.ckpt");
    assert_eq!(run(["macow", "train", "--data", s(&data), "--checkpoint", s(&ck)]), EXIT_IO);
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.cfg");
    std::fs::write(&cfg, "levels = 1\ndepths = [1]\nhidden_channels = 2\nimage = 4x4x1\n").unwrap();
    let out = dir.path().join("bench.csv");
    let code = run([
        "macow", "bench", "--config", s(&cfg), "--sizes", "4,8", "--n", "2", "--repeats", "1", "--out", s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let csv = std::fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "size,batch,ms_per_datapoint,conv_applications");
    assert!(lines[1].starts_with("4,2,") && lines[1].ends_with(",8"));
    assert!(lines[2].starts_with("8,2,") && lines[2].ends_with(",16"));
}
