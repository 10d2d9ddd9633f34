//! End-to-end checks of the `dfwd` binary: artifacts, determinism, and the
//! exit-code contract (0 ok, 1 usage/config, 2 verification, 3 divergence).
//! Everything runs on the built-in synthetic dataset so no files are needed.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dfwd"))
}

/// Fresh scratch directory under the target-specific temp root.
fn outdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dfwd-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

const SMALL: &[&str] = &["--set", "arch=mlp(24,24)", "--set", "epochs=2", "--set", "batch_size=64"];

#[test]
fn train_writes_artifacts_and_reruns_bitwise_identically() {
    let out1 = outdir("train1");
    let st = bin()
        .args(["train", "--seed", "11", "--out"])
        .arg(&out1)
        .args(SMALL)
        .output()
        .unwrap();
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    for f in ["checkpoint.dfwd", "train_metrics.csv", "manifest.txt"] {
        assert!(out1.join(f).exists(), "{f} missing from {}", out1.display());
    }
    let manifest = std::fs::read_to_string(out1.join("manifest.txt")).unwrap();
    assert!(manifest.contains("command = train"));
    assert!(manifest.contains("checkpoint_sha256 = "));
    assert!(manifest.contains("seed = 11"), "resolved config must pin the seed:\n{manifest}");
    let metrics = std::fs::read_to_string(out1.join("train_metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,mean_loss,test_accuracy,wall_secs,sep_unit0"));
    assert_eq!(metrics.lines().count(), 3, "header + one row per epoch");

    let out2 = outdir("train2");
    let st = bin()
        .args(["train", "--seed", "11", "--out"])
        .arg(&out2)
        .args(SMALL)
        .output()
        .unwrap();
    assert!(st.status.success());
    let a = std::fs::read(out1.join("checkpoint.dfwd")).unwrap();
    let b = std::fs::read(out2.join("checkpoint.dfwd")).unwrap();
    assert_eq!(a, b, "same config + seed must reproduce the checkpoint bitwise");
}

#[test]
fn eval_and_robustness_consume_a_trained_checkpoint() {
    let tdir = outdir("consume-train");
    let st = bin()
        .args(["train", "--seed", "3", "--out"])
        .arg(&tdir)
        .args(SMALL)
        .output()
        .unwrap();
    assert!(st.status.success());
    let ckpt = tdir.join("checkpoint.dfwd");

    let edir = outdir("consume-eval");
    let st = bin()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .args(["--seed", "3", "--out"])
        .arg(&edir)
        .output()
        .unwrap();
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    let csv = std::fs::read_to_string(edir.join("eval_metrics.csv")).unwrap();
    assert!(csv.starts_with("unit,decode_accuracy,separation"));
    // two hidden units plus the overall row
    assert_eq!(csv.lines().count(), 4);

    let rdir = outdir("consume-rob");
    let st = bin()
        .args(["robustness", "--kinds", "quant,impulse", "--checkpoint"])
        .arg(&ckpt)
        .args(["--seed", "3", "--out"])
        .arg(&rdir)
        .output()
        .unwrap();
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    let csv = std::fs::read_to_string(rdir.join("robustness.csv")).unwrap();
    assert!(csv.starts_with("kind,level,param,accuracy"));
    // clean row + 5 impulse levels + 4 quantization widths
    assert_eq!(csv.lines().count(), 11, "{csv}");
    assert!(csv.contains("none,0,"));
    assert!(csv.contains("quant,4,4,"));
}

#[test]
fn profile_emits_the_documented_schema_with_measured_peaks() {
    let dir = outdir("profile");
    let st = bin()
        .args([
            "profile", "--depths", "2,3", "--width", "16", "--batch", "8", "--reps", "3",
            "--warmups", "1", "--out",
        ])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(st.status.success(), "stderr: {}", String::from_utf8_lossy(&st.stderr));
    let csv = std::fs::read_to_string(dir.join("profile.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "strategy,depth,batch,param_elems,opt_elems,act_elems_peak,measured_peak_bytes,\
         backward_ms_median,backward_ms_iqr,critical_ms_median,critical_ms_iqr"
    );
    // 4 strategies × 2 depths, and the binary's tracking allocator means
    // measured_peak_bytes is never the empty fallback
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 8);
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 11);
        assert!(fields[6].parse::<u64>().unwrap() > 0, "measured peak missing in {row}");
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    // unknown config key: usage/config error naming the key
    let st = bin()
        .args(["train", "--set", "grou_size=2", "--out"])
        .arg(outdir("code1"))
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&st.stderr).contains("grou_size"));

    // malformed flag value
    let st = bin().args(["train", "--set", "epochs", "--out"]).arg(outdir("code1b")).output().unwrap();
    assert_eq!(st.status.code(), Some(1));

    // full property suite passes
    let st = bin().args(["verify", "--out"]).arg(outdir("code2")).output().unwrap();
    assert_eq!(st.status.code(), Some(0), "{}", String::from_utf8_lossy(&st.stderr));
    let stdout = String::from_utf8_lossy(&st.stdout);
    assert!(stdout.contains("ok loss/unit_loss_delta"));
    assert!(stdout.contains("checks passed"));

    // an absurd learning rate must abort as divergence, not unwind
    let st = bin()
        .args(["train", "--set", "lr=1e30", "--set", "epochs=2", "--set", "arch=mlp(16,16)", "--out"])
        .arg(outdir("code3"))
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(3), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(String::from_utf8_lossy(&st.stderr).contains("non-finite"));
}
