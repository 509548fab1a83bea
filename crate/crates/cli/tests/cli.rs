use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn trackany(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trackany"))
        .args(args)
        .env_remove("TRACKANY_BACKEND")
        .env_remove("TRACKANY_EROSION")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn synth(dir: &Path, frames: usize) {
    let spec = dir.join("spec.json");
    fs::write(&spec, format!(r#"{{"sequences": 2, "frames": {frames}}}"#)).unwrap();
    let out = trackany(&["synth", "--spec", spec.to_str().unwrap(), "--out", dir.join("data").to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_eval_replay_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 10);
    let (data, out) = (tmp.path().join("data"), tmp.path().join("out"));
    let run = trackany(&["eval", "--dataset", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--erosion", "0.5"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert_eq!(stdout, fs::read_to_string(out.join("results.txt")).unwrap());
    assert!(out.join("results.json").is_file());

    let log = out.join("logs/synth000.jsonl");
    let video = data.join("JPEGImages/480p/synth000");
    let ok = trackany(&["replay", "--log", log.to_str().unwrap(), "--video", video.to_str().unwrap()]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let text = String::from_utf8(ok.stdout).unwrap();
    assert!(text.lines().last().unwrap().starts_with("replay ok: "), "{text}");
    assert_eq!(text.lines().count(), 10 + 1);

    // The default synthetic backend has no erosion, so the replay diverges.
    let other = trackany(&["replay", "--log", log.to_str().unwrap(), "--video", video.to_str().unwrap(), "--backend", "synthetic"]);
    assert_eq!(code(&other), 4);

    let mut lines: Vec<String> = fs::read_to_string(&log).unwrap().lines().map(str::to_string).collect();
    lines[3] = lines[3].replacen("\"frame\":", "\"frame\":1", 1);
    let tampered = tmp.path().join("tampered.jsonl");
    fs::write(&tampered, lines.join("\n") + "\n").unwrap();
    let bad = trackany(&["replay", "--log", tampered.to_str().unwrap(), "--video", video.to_str().unwrap()]);
    assert_eq!(code(&bad), 4);
    assert!(!bad.stderr.is_empty());
}

#[test]
fn config_and_backend_errors_set_the_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 4);
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    let base = ["eval", "--dataset", data.to_str().unwrap(), "--out", out.to_str().unwrap()];

    let bad_backend = trackany(&[&base[..], &["--backend", "magic"]].concat());
    assert_eq!(code(&bad_backend), 2);
    let bad_tau = trackany(&[&base[..], &["--tau", "1.5"]].concat());
    assert_eq!(code(&bad_tau), 2);
    let remote = trackany(&[&base[..], &["--backend", "remote:http://127.0.0.1:9", "--timeout-ms", "300", "--retries", "0"]].concat());
    assert_eq!(code(&remote), 3, "{}", String::from_utf8_lossy(&remote.stderr));
    assert_eq!(code(&trackany(&["eval"])), 2);
}

#[test]
fn environment_variables_stand_in_for_flags() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 6);
    let out = Command::new(env!("CARGO_BIN_EXE_trackany"))
        .arg("eval")
        .env("TRACKANY_DATASET", tmp.path().join("data"))
        .env("TRACKANY_OUT", tmp.path().join("out"))
        .env("TRACKANY_BACKEND", "magic")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_trackany"))
        .args(["eval", "--backend", "synthetic"])
        .env("TRACKANY_DATASET", tmp.path().join("data"))
        .env("TRACKANY_OUT", tmp.path().join("out"))
        .env("TRACKANY_BACKEND", "magic")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("out/results.json").is_file());
}
