//! End-to-end exit-code and format contract for the `nullora` binary:
//! 0 success, 1 usage, 2 data/format, 3 invariant failure, 4 divergence.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nullora::io::{self, Dtype, TensorFile};
use nullora::numerics::gaussian_matrix;
use nullora::training::gen_planted_task;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_nullora")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn nullora")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Single-layer planted checkpoint written to `dir/name`; returns the path.
fn planted_ckpt(dir: &Path, name: &str, d: usize, nullity: usize, seed: u64) -> PathBuf {
    let task = gen_planted_task(d, d, nullity, 4, seed).unwrap();
    let mut file = TensorFile::new();
    file.insert("layer0", Dtype::F64, task.w0).unwrap();
    let path = dir.join(name);
    io::write_tensor_file(&path, &file).unwrap();
    path
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = planted_ckpt(dir.path(), "ckpt.nlrt", 8, 2, 1);
    let ckpt = ckpt.to_str().unwrap();

    for args in [
        vec!["analyze", ckpt, "--bogus-flag"],
        vec!["definitely-not-a-subcommand"],
        vec!["init", ckpt, "--out", "a.nlrt", "--mode", "ablation"], // missing --rank
        vec!["init", ckpt, "--out", "a.nlrt", "--mode", "null", "--rank", "4"],
        vec!["init", ckpt, "--out", "a.nlrt", "--mode", "ablation", "--rank", "3"], // odd
        vec!["init", ckpt, "--out", "a.nlrt", "--mode", "lora", "--rank", "4", "--max-rank", "2"],
        vec!["analyze", ckpt, "--tau", "0"],
        vec![
            "train", "--ckpt", ckpt, "--adapter", "a.nlrt", "--task", "planted:8x8:2",
        ], // malformed grammar
    ] {
        let out = run_in(dir.path(), &args);
        assert_eq!(code(&out), 1, "args {args:?}\nstderr: {}", stderr(&out));
    }

    // Invalid thread bound is rejected before any work.
    let out = Command::new(bin())
        .current_dir(dir.path())
        .env("NULLORA_THREADS", "zero")
        .args(["analyze", ckpt])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = planted_ckpt(dir.path(), "ckpt.nlrt", 8, 2, 1);
    let ckpt = ckpt.to_str().unwrap();

    // Missing file.
    let out = run_in(dir.path(), &["analyze", "missing.nlrt"]);
    assert_eq!(code(&out), 2);

    // Garbage bytes.
    std::fs::write(dir.path().join("junk.nlrt"), b"not a tensor file").unwrap();
    let out = run_in(dir.path(), &["analyze", "junk.nlrt"]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));

    // Planted task whose regenerated weight does not match the checkpoint.
    let out = run_in(
        dir.path(),
        &["init", ckpt, "--out", "adapter.nlrt", "--mode", "null"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let out = run_in(
        dir.path(),
        &[
            "train", "--ckpt", ckpt, "--adapter", "adapter.nlrt", "--task", "planted:8x8:2:4",
            "--steps", "1", "--seed", "999",
        ],
    );
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("does not match"), "{}", stderr(&out));

    // Task data file without the required tensors.
    let empty = TensorFile::new();
    io::write_tensor_file(&dir.path().join("empty.nlrt"), &empty).unwrap();
    let out = run_in(
        dir.path(),
        &[
            "train", "--ckpt", ckpt, "--adapter", "adapter.nlrt", "--task", "data:empty.nlrt",
            "--steps", "1",
        ],
    );
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn verify_invariant_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = planted_ckpt(dir.path(), "ckpt.nlrt", 12, 3, 5);
    let ckpt_str = ckpt.to_str().unwrap();
    let out = run_in(
        dir.path(),
        &["init", ckpt_str, "--out", "adapter.nlrt", "--mode", "null"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    // Fresh adapter against its own checkpoint: all pass, exit 0, both
    // profiles.
    for profile in ["default", "strict"] {
        let out = run_in(
            dir.path(),
            &[
                "verify", "--ckpt", ckpt_str, "--adapter", "adapter.nlrt", "--tol-profile",
                profile,
            ],
        );
        assert_eq!(code(&out), 0, "profile {profile}: {}", stderr(&out));
        assert!(stdout(&out).contains("overall: PASS"));
    }

    // Perturbed checkpoint: the stored basis no longer annihilates W0^T.
    let original = io::read_tensor_file(&ckpt).unwrap();
    let mut perturbed = TensorFile::new();
    let noisy = original
        .get("layer0")
        .unwrap()
        .matrix
        .add(&gaussian_matrix(12, 12, 77, 0.05));
    perturbed.insert("layer0", Dtype::F64, noisy).unwrap();
    io::write_tensor_file(&dir.path().join("perturbed.nlrt"), &perturbed).unwrap();
    let out = run_in(
        dir.path(),
        &["verify", "--ckpt", "perturbed.nlrt", "--adapter", "adapter.nlrt"],
    );
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
}

#[test]
fn training_divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = planted_ckpt(dir.path(), "ckpt.nlrt", 8, 2, 3);
    let ckpt = ckpt.to_str().unwrap();
    let out = run_in(
        dir.path(),
        &["init", ckpt, "--out", "adapter.nlrt", "--mode", "null"],
    );
    assert_eq!(code(&out), 0);
    let out = run_in(
        dir.path(),
        &[
            "train", "--ckpt", ckpt, "--adapter", "adapter.nlrt", "--task", "planted:8x8:2:4",
            "--steps", "200", "--optimizer", "sgd", "--lr", "1e9", "--weight-decay", "0",
            "--seed", "3",
        ],
    );
    assert_eq!(code(&out), 4, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));
}

#[test]
fn init_is_deterministic_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = planted_ckpt(dir.path(), "ckpt.nlrt", 10, 2, 9);
    let ckpt = ckpt.to_str().unwrap();
    for (mode, extra) in [
        ("null", vec![]),
        ("ablation", vec!["--rank", "4", "--seed", "3"]),
        ("lora", vec!["--rank", "4", "--seed", "3"]),
    ] {
        let mut args_a = vec!["init", ckpt, "--out", "a.nlrt", "--mode", mode];
        args_a.extend(&extra);
        let mut args_b = vec!["init", ckpt, "--out", "b.nlrt", "--mode", mode];
        args_b.extend(&extra);
        assert_eq!(code(&run_in(dir.path(), &args_a)), 0);
        assert_eq!(code(&run_in(dir.path(), &args_b)), 0);
        let a = std::fs::read(dir.path().join("a.nlrt")).unwrap();
        let b = std::fs::read(dir.path().join("b.nlrt")).unwrap();
        assert_eq!(a, b, "mode {mode} produced differing adapter bytes");
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = planted_ckpt(dir.path(), "ckpt.nlrt", 16, 4, 11);
    let ckpt = ckpt.to_str().unwrap();
    let mut trained = Vec::new();
    for (adapter, threads) in [("t1.nlrt", "1"), ("t4.nlrt", "4")] {
        let out = run_in(
            dir.path(),
            &["init", ckpt, "--out", adapter, "--mode", "null"],
        );
        assert_eq!(code(&out), 0);
        let out = Command::new(bin())
            .current_dir(dir.path())
            .env("NULLORA_THREADS", threads)
            .args([
                "train", "--ckpt", ckpt, "--adapter", adapter, "--task", "planted:16x16:4:4",
                "--steps", "20", "--lr", "1e-2", "--weight-decay", "0", "--batch", "2",
                "--seed", "11",
            ])
            .output()
            .unwrap();
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        trained.push(std::fs::read(dir.path().join(adapter)).unwrap());
    }
    assert_eq!(trained[0], trained[1], "trained bytes differ across thread counts");
}

#[test]
fn analyze_aggregates_mean_deficiency() {
    // Ten 64x64 layers with nullities averaging 3.2/64 = 5%.
    let dir = tempfile::tempdir().unwrap();
    let mut file = TensorFile::new();
    let nullities = [3usize, 3, 3, 3, 3, 3, 3, 3, 4, 4];
    for (i, nullity) in nullities.iter().enumerate() {
        let task = gen_planted_task(64, 64, *nullity, 4, 100 + i as u64).unwrap();
        file.insert(&format!("layer{i:02}"), Dtype::F64, task.w0).unwrap();
    }
    io::write_tensor_file(&dir.path().join("ten.nlrt"), &file).unwrap();

    let out = run_in(
        dir.path(),
        &["analyze", "ten.nlrt", "--json", "report.json"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("mean deficiency: 5.00%"), "{}", stdout(&out));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    let layers = report.as_array().unwrap();
    assert_eq!(layers.len(), 10);
    let mean: f64 = layers
        .iter()
        .map(|l| l["deficiency_pct"].as_f64().unwrap())
        .sum::<f64>()
        / 10.0;
    assert!((mean - 5.0).abs() < 1e-9);
}

#[test]
fn full_rank_checkpoint_yields_skipped_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let mut file = TensorFile::new();
    file.insert(
        "dense",
        Dtype::F64,
        nullora::matrix::DenseMatrix::identity(6),
    )
    .unwrap();
    io::write_tensor_file(&dir.path().join("full.nlrt"), &file).unwrap();

    let out = run_in(
        dir.path(),
        &["init", "full.nlrt", "--out", "adapter.nlrt", "--mode", "null"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("skipped"), "{}", stdout(&out));
    assert!(stdout(&out).contains("warning"), "{}", stdout(&out));

    // Verify has nothing to check and exits 0; merge reproduces the input.
    let out = run_in(
        dir.path(),
        &["verify", "--ckpt", "full.nlrt", "--adapter", "adapter.nlrt"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let out = run_in(
        dir.path(),
        &[
            "merge", "--ckpt", "full.nlrt", "--adapter", "adapter.nlrt", "--out", "merged.nlrt",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert_eq!(
        std::fs::read(dir.path().join("full.nlrt")).unwrap(),
        std::fs::read(dir.path().join("merged.nlrt")).unwrap()
    );
}

#[test]
fn data_task_matches_planted_task() {
    let dir = tempfile::tempdir().unwrap();
    let task = gen_planted_task(12, 12, 3, 16, 21).unwrap();
    let mut ckpt = TensorFile::new();
    ckpt.insert("layer0", Dtype::F64, task.w0.clone()).unwrap();
    io::write_tensor_file(&dir.path().join("ckpt.nlrt"), &ckpt).unwrap();
    let mut data = TensorFile::new();
    data.insert("inputs", Dtype::F64, task.inputs.clone()).unwrap();
    data.insert("targets", Dtype::F64, task.targets.clone()).unwrap();
    io::write_tensor_file(&dir.path().join("task.nlrt"), &data).unwrap();

    for (adapter, task_arg) in [("p.nlrt", "planted:12x12:3:16"), ("d.nlrt", "data:task.nlrt")] {
        let out = run_in(
            dir.path(),
            &["init", "ckpt.nlrt", "--out", adapter, "--mode", "null"],
        );
        assert_eq!(code(&out), 0);
        let out = run_in(
            dir.path(),
            &[
                "train", "--ckpt", "ckpt.nlrt", "--adapter", adapter, "--task", task_arg,
                "--steps", "30", "--lr", "1e-2", "--weight-decay", "0", "--batch", "4",
                "--seed", "21",
            ],
        );
        assert_eq!(code(&out), 0, "task {task_arg}: {}", stderr(&out));
    }
    assert_eq!(
        std::fs::read(dir.path().join("p.nlrt")).unwrap(),
        std::fs::read(dir.path().join("d.nlrt")).unwrap(),
        "planted and data-backed training diverged"
    );
}

#[test]
fn train_smoke_run_rewrites_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = planted_ckpt(dir.path(), "ckpt.nlrt", 8, 2, 13);
    let ckpt = ckpt.to_str().unwrap();
    assert_eq!(
        code(&run_in(
            dir.path(),
            &["init", ckpt, "--out", "adapter.nlrt", "--mode", "null"],
        )),
        0
    );
    let before = std::fs::read(dir.path().join("adapter.nlrt")).unwrap();
    let out = run_in(
        dir.path(),
        &[
            "train", "--ckpt", ckpt, "--adapter", "adapter.nlrt", "--task", "planted:8x8:2:4",
            "--steps", "1", "--lr", "1e-2", "--weight-decay", "0", "--seed", "13",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let after = std::fs::read(dir.path().join("adapter.nlrt")).unwrap();
    assert_ne!(before, after, "one step must update the trainables");

    // A bad log directory is rejected before any training happens.
    let out = run_in(
        dir.path(),
        &[
            "train", "--ckpt", ckpt, "--adapter", "adapter.nlrt", "--task", "planted:8x8:2:4",
            "--steps", "1", "--log", "no/such/dir/h.csv",
        ],
    );
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn ablation_verify_reports_not_applicable() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = planted_ckpt(dir.path(), "ckpt.nlrt", 10, 2, 31);
    let ckpt = ckpt.to_str().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "init", ckpt, "--out", "abl.nlrt", "--mode", "ablation", "--rank", "4", "--seed", "2",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let out = run_in(
        dir.path(),
        &["verify", "--ckpt", ckpt, "--adapter", "abl.nlrt"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("not applicable"), "{text}");
    assert!(text.contains("overall: PASS"), "{text}");
}
