use std::path::Path;
use std::process::{Command, Output};

fn dim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dim"))
        .env("DIM_THREADS", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    let text = format!(
        "[model]\nlayers = 1\nhidden = 8\nstate = 4\ntime_freq_dim = 8\n\
         [optimizer]\nbatch_size = 2\nsteps = 3\nema_decay = 0.9\n{extra}\
         [run]\noutput = \"{}\"\n",
        dir.join("run").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn flops_all_lists_every_architecture() {
    let o = dim(&["flops", "--arch", "all", "--size", "S", "--patch", "4", "--resolutions", "256,512"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for label in ["dit", "diffussm", "dim", "dim_both_directions", "dim_walker"] {
        assert!(out.contains(&format!("\n{label},")), "missing csv row {label}");
    }
    assert!(out.contains("arch,256x256,512x512"));
}

#[test]
fn flops_dim_xl_rows_scale_by_four() {
    let o = dim(&["flops", "--arch", "dim", "--size", "XL", "--patch", "2", "--resolutions", "256,512,1024,2048"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let row: Vec<u128> = out
        .lines()
        .find(|l| l.starts_with("dim,"))
        .unwrap()
        .split(',')
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(row.len(), 4);
    assert!(row.windows(2).all(|w| w[1] == 4 * w[0]));
}

#[test]
fn flops_writes_csv_file() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    let o = dim(&["flops", "--arch", "dit", "--resolutions", "256", "--csv", csv.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(!stdout(&o).contains("arch,256x256"));
    assert!(std::fs::read_to_string(csv).unwrap().starts_with("arch,256x256\ndit,"));
}

#[test]
fn usage_errors_exit_with_two() {
    let unknown = dim(&["flops", "--arch", "transformer"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(stderr(&unknown).contains("dit, diffussm, dim, all"));
    assert_eq!(dim(&["flops", "--resolutions", ""]).status.code(), Some(2));
    assert_eq!(dim(&["flops", "--resolutions", "100"]).status.code(), Some(2));
    assert_eq!(dim(&["flops", "--patch", "3"]).status.code(), Some(2));
    assert_eq!(dim(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dim(&["train", "--config", "/nonexistent/run.cfg"]).status.code(), Some(2));
    assert!(dim(&["--help"]).status.success());
}

#[test]
fn bad_thread_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = Command::new(env!("CARGO_BIN_EXE_dim"))
        .env("DIM_THREADS", "zero")
        .args(["train", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("DIM_THREADS"));
}

#[test]
fn config_typo_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\nnmae = two_mode_latent\n");
    let o = dim(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nmae"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn train_then_sample_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = dim(&["train", "--config", cfg.to_str().unwrap(), "--progress", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for key in ["\"step\"", "\"loss\"", "\"grad_norm\"", "\"wall_clock_s\"", "\"tokens_per_sec\""] {
        assert!(metrics.lines().all(|l| l.contains(key)));
    }
    let ck = run.join("checkpoint.dimc");
    assert_eq!(&std::fs::read(&ck).unwrap()[..4], b"DIMC");

    let out = dir.path().join("s");
    let ck_arg = ck.to_str().unwrap();
    let o = dim(&["sample", "--checkpoint", ck_arg, "--count", "2", "--steps", "5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(out.join("samples.dimt")).unwrap();
    assert_eq!(&bytes[..4], b"DIMT");

    let bad_class = dim(&["sample", "--checkpoint", ck_arg, "--class", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(bad_class.status.code(), Some(2));
    let missing = dim(&["sample", "--checkpoint", "/nonexistent.dimc"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn image_and_video_samples_write_ppm() {
    for (name, files) in [("checker_images", vec!["samples.ppm"]), ("moving_bar_video", vec!["frame_000.ppm", "frame_007.ppm"])] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), &format!("[data]\nname = {name}\n"));
        let cfg_text = std::fs::read_to_string(&cfg).unwrap().replace("steps = 3", "steps = 1");
        std::fs::write(&cfg, cfg_text).unwrap();
        let o = dim(&["train", "--config", cfg.to_str().unwrap(), "--progress", "0"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = dir.path().join("s");
        let ck = dir.path().join("run").join("checkpoint.dimc");
        let o = dim(&[
            "sample", "--checkpoint", ck.to_str().unwrap(), "--count", "2", "--class", "0", "--steps", "2",
            "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        for f in files {
            assert_eq!(&std::fs::read(out.join(f)).unwrap()[..2], b"P6", "{name}: {f}");
        }
    }
}

#[test]
fn check_passes_on_a_fresh_build() {
    let o = dim(&["check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("scan_vs_kernel") && out.contains("PASS"));
    assert!(!out.contains("FAIL"));
}
