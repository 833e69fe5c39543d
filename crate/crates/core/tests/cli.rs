use std::process::Command;

fn run(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_clozeread")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(run(&["--no-such-flag", "gradcheck"]).0, 2);
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let (code, err) = run(&["--config", "/nonexistent/run.toml", "render-demo"]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn resume_without_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = run(&["--out", dir.path().to_str().unwrap(), "train", "--resume"]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn unknown_noise_preset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = run(&["--out", dir.path().to_str().unwrap(), "render-demo", "--noise", "fog"]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn render_demo_writes_images() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = run(&["--out", dir.path().to_str().unwrap(), "render-demo", "--text", "gate"]);
    assert_eq!(code, 0, "{err}");
    let pgm = std::fs::read(dir.path().join("render.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
}
