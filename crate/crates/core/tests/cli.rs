use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tvwflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvwflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_is_deterministic_and_writes_preview_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.tvwf");
    let b = dir.path().join("b.tvwf");
    for out in [&a, &b] {
        let o = tvwflow(&["generate", "square", "--n", "24", "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(a.with_extension("pgm").exists());
    let manifest = fs::read_to_string(a.with_extension("manifest.txt")).unwrap();
    assert!(manifest.starts_with("command=generate\n"));
    assert!(manifest.contains("kind=square\n"));
    assert!(manifest.contains("n=24\n"));
}

#[test]
fn zero_variance_noise_keeps_bytes_and_metrics_report_inf() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean.tvwf");
    let noisy = dir.path().join("noisy.tvwf");
    assert!(tvwflow(&["generate", "pyramid", "--n", "16", "--out", p(&clean)]).status.success());
    let o = tvwflow(&["noise", "--input", p(&clean), "--variance", "0", "--seed", "3", "--out", p(&noisy)]);
    assert!(o.status.success());
    assert_eq!(fs::read(&clean).unwrap(), fs::read(&noisy).unwrap());

    let o = tvwflow(&["metrics", p(&clean), p(&noisy)]);
    assert!(o.status.success());
    let line = String::from_utf8(o.stdout).unwrap();
    let fields: Vec<&str> = line.trim().split(',').collect();
    assert_eq!(fields.len(), 6);
    assert_eq!(fields[0], "inf");
    assert_eq!(fields[2], fields[3]);
}

#[test]
fn evolve_writes_outputs_and_reruns_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("sq.tvwf");
    assert!(tvwflow(&["generate", "square", "--n", "12", "--out", p(&input)]).status.success());
    let run = dir.path().join("run");
    let o = tvwflow(&[
        "evolve", "--input", p(&input), "--steps", "3", "--eps", "1e-3", "--frame-stride", "2", "--out-dir", p(&run),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("time_steps=3"));
    assert!(stdout.contains("newton_iterations="));
    for name in ["diagnostics.csv", "final.tvwf", "final.pgm", "frame_000000.tvwf", "frame_000002.pgm", "manifest.txt"] {
        assert!(run.join(name).exists(), "missing {name}");
    }
    let csv = fs::read_to_string(run.join("diagnostics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let rerun = dir.path().join("rerun");
    let manifest = run.join("manifest.txt");
    let o = tvwflow(&["evolve", "--config", p(&manifest), "--out-dir", p(&rerun)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv, fs::read_to_string(rerun.join("diagnostics.csv")).unwrap());
}

#[test]
fn denoise_writes_result_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean.tvwf");
    let noisy = dir.path().join("noisy.tvwf");
    assert!(tvwflow(&["generate", "pyramid", "--n", "16", "--out", p(&clean)]).status.success());
    assert!(tvwflow(&["noise", "--input", p(&clean), "--variance", "0.001", "--out", p(&noisy)])
        .status
        .success());
    let out = dir.path().join("tv");
    let o = tvwflow(&[
        "denoise", "--method", "tv", "--alpha", "0.02", "--input", p(&noisy), "--reference", p(&clean), "--out-dir",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("psnr,psnr_input,discrete_tv,staircase_metric"));
    let values: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(values[0] > values[1], "denoising should raise PSNR: {values:?}");
    assert!(out.join("result.tvwf").exists() && out.join("result.pgm").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tvwflow(&["evolve", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(tvwflow(&["evolve", "--out-dir", p(dir.path())]).status.code(), Some(1));

    let missing = dir.path().join("missing.tvwf");
    let o = tvwflow(&["evolve", "--input", p(&missing), "--out-dir", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));

    let config = dir.path().join("bad.txt");
    fs::write(&config, "command=evolve\nsteps=2\nunknown_key=1\n").unwrap();
    assert_eq!(tvwflow(&["evolve", "--config", p(&config)]).status.code(), Some(1));

    let input = dir.path().join("sq.tvwf");
    assert!(tvwflow(&["generate", "square", "--n", "12", "--out", p(&input)]).status.success());
    let o = tvwflow(&[
        "evolve", "--input", p(&input), "--steps", "2", "--max-inner", "1", "--strict", "--out-dir",
        p(&dir.path().join("strict")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(tvwflow(&["evolve", "--input", p(&input), "--dt", "-1", "--out-dir", p(dir.path())]).status.code(), Some(1));
}
