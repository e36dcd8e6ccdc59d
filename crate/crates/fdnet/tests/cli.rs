//! End-to-end checks of the command-line binary: artifact determinism,
//! command wiring and exit codes.

use std::path::Path;
use std::process::Command;

fn fdnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fdnet"))
}

/// Tiny-universe flags shared by every invocation.
fn tiny_flags(root: &Path) -> Vec<String> {
    [
        "--data.root",
        &root.display().to_string(),
        "--data.synth.num_sequences",
        "4",
        "--data.train_sequences",
        "4",
        "--data.val_sequences",
        "2",
        "--data.test_sequences",
        "2",
        "--data.synth.frames",
        "8",
        "--data.synth.height",
        "16",
        "--data.synth.width",
        "16",
        "--model.input_height",
        "16",
        "--model.input_width",
        "16",
        "--model.flow_hidden",
        "8",
        "--model.def_hidden",
        "8",
        "--model.flow_head_hidden",
        "8",
        "--data.j",
        "3",
        "--data.k",
        "2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn hash_tree(dir: &Path) -> Vec<(String, u64)> {
    let mut entries = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                let mut h = 1469598103934665603u64;
                for b in bytes {
                    h ^= b as u64;
                    h = h.wrapping_mul(1099511628211);
                }
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                entries.push((rel, h));
            }
        }
    }
    entries.sort();
    entries
}

#[test]
fn gen_data_is_byte_identical_for_same_seed() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let root = tmp.path().join(name);
        let out = fdnet()
            .arg("gen-data")
            .args(tiny_flags(&root))
            .args(["--seed", "11"])
            .arg("--out")
            .arg(&root)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(hash_tree(&tmp.path().join("a")), hash_tree(&tmp.path().join("b")));
}

#[test]
fn full_pipeline_runs_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    let gen = fdnet()
        .arg("gen-data")
        .args(tiny_flags(&root))
        .output()
        .unwrap();
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));

    // Two identical short training runs produce identical metrics CSVs.
    for run in ["r1", "r2"] {
        let out_dir = tmp.path().join(run);
        let st = fdnet()
            .arg("train")
            .args(tiny_flags(&root))
            .args([
                "--train.max_iterations",
                "4",
                "--train.batch_size",
                "2",
                "--train.eval_every",
                "2",
                "--train.checkpoint_every",
                "2",
                "--seed",
                "3",
            ])
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    }
    let m1 = std::fs::read(tmp.path().join("r1/metrics.csv")).unwrap();
    let m2 = std::fs::read(tmp.path().join("r2/metrics.csv")).unwrap();
    assert_eq!(m1, m2, "training metrics differ across identical runs");

    // Evaluate the trained checkpoint and the persistence baseline.
    let eval = fdnet()
        .arg("evaluate")
        .args(tiny_flags(&root))
        .args(["--split", "test"])
        .arg("--checkpoint")
        .arg(tmp.path().join("r1/latest.fdck"))
        .arg("--out")
        .arg(tmp.path().join("eval"))
        .output()
        .unwrap();
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let stdout = String::from_utf8_lossy(&eval.stdout);
    assert!(stdout.contains("AVG"), "summary row missing: {stdout}");
    assert!(tmp.path().join("eval/report_model_test.csv").is_file());
    assert!(tmp.path().join("eval/curves_model_test.csv").is_file());

    let base = fdnet()
        .arg("evaluate")
        .args(tiny_flags(&root))
        .args(["--split", "test", "--baseline", "persistence"])
        .arg("--out")
        .arg(tmp.path().join("eval"))
        .output()
        .unwrap();
    assert!(base.status.success(), "{}", String::from_utf8_lossy(&base.stderr));
    assert!(tmp.path().join("eval/report_persistence_test.csv").is_file());

    // Predict: K files + strip, deterministic across runs.
    for pd in ["p1", "p2"] {
        let st = fdnet()
            .arg("predict")
            .args(tiny_flags(&root))
            .arg("--checkpoint")
            .arg(tmp.path().join("r1/latest.fdck"))
            .arg("--input")
            .arg(root.join("test/test_0000"))
            .args(["--horizon", "3"])
            .arg("--out")
            .arg(tmp.path().join(pd))
            .output()
            .unwrap();
        assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    }
    for k in 0..3 {
        let name = format!("frame_pred_{k:03}.pgm");
        let a = std::fs::read(tmp.path().join("p1").join(&name)).unwrap();
        let b = std::fs::read(tmp.path().join("p2").join(&name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical predict runs");
        // 8-bit output contract.
        let (_, _, pixels) = fdnet::data::io::decode_pgm(&a).unwrap();
        assert!(!pixels.is_empty());
    }
    assert!(tmp.path().join("p1/strip.pgm").is_file());

    // Render a dataset sequence.
    let render = fdnet()
        .arg("render")
        .args(tiny_flags(&root))
        .arg("--input")
        .arg(root.join("val/val_0000"))
        .args(["--max-frames", "5"])
        .arg("--out")
        .arg(tmp.path().join("rend"))
        .output()
        .unwrap();
    assert!(render.status.success(), "{}", String::from_utf8_lossy(&render.stderr));
    assert!(tmp.path().join("rend/strip.pgm").is_file());
}

#[test]
fn resume_via_cli_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    fdnet()
        .arg("gen-data")
        .args(tiny_flags(&root))
        .output()
        .unwrap();
    let out_dir = tmp.path().join("run");
    let first = fdnet()
        .arg("train")
        .args(tiny_flags(&root))
        .args(["--train.max_iterations", "3", "--train.batch_size", "2", "--train.eval_every", "0", "--train.checkpoint_every", "0"])
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let resumed = fdnet()
        .arg("train")
        .args(tiny_flags(&root))
        .args(["--train.max_iterations", "6", "--train.batch_size", "2", "--train.eval_every", "0", "--train.checkpoint_every", "0"])
        .arg("--resume")
        .arg(out_dir.join("latest.fdck"))
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(resumed.status.success(), "{}", String::from_utf8_lossy(&resumed.stderr));
    let stdout = String::from_utf8_lossy(&resumed.stdout);
    assert!(stdout.contains("6 iterations"), "{stdout}");

    // Digest mismatch (different loss lambdas) is refused without --force.
    let refused = fdnet()
        .arg("train")
        .args(tiny_flags(&root))
        .args(["--train.max_iterations", "6", "--loss.lambda_gdl", "0.5"])
        .arg("--resume")
        .arg(out_dir.join("latest.fdck"))
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(refused.status.code(), Some(1), "digest mismatch should be a validation error");
}

#[test]
fn exit_codes_match_error_classes() {
    let tmp = tempfile::tempdir().unwrap();
    // Unknown command -> validation (1).
    let bad_cmd = fdnet().arg("transmogrify").output().unwrap();
    assert_eq!(bad_cmd.status.code(), Some(1));

    // Invalid config value (negative blob radius) -> validation (1), named field.
    let bad_cfg = fdnet()
        .args(["gen-data", "--data.synth.radius", "[-1.0, 2.0]"])
        .arg("--out")
        .arg(tmp.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(bad_cfg.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_cfg.stderr).contains("radius"));

    // Unknown config key -> validation (1).
    let bad_key = fdnet().args(["train", "--train.warp_factor", "2"]).output().unwrap();
    assert_eq!(bad_key.status.code(), Some(1));

    // Missing dataset -> I/O (3).
    let missing = fdnet()
        .args(["train", "--data.root", "/definitely/not/here"])
        .arg("--out")
        .arg(tmp.path().join("y"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));
}
