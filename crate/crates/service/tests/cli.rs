use std::path::Path;
use std::process::{Command, Output};

use makeup_core::raster::RasterImage;

fn makeup(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_makeup"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MAKEUP_BACKEND")
        .output()
        .unwrap()
}

fn write_fixture(dir: &Path, name: &str) {
    let out = makeup(
        &["fixture", "--name", name, "--size", "64", "--out", &format!("{name}.png"), "--labels-out", &format!("{name}_labels.png")],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn color_command_writes_the_output() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "face-a");
    let out = makeup(
        &[
            "color", "--image", "face-a.png", "--labels", "face-a_labels.png", "--lips", "#B03A4A", "--alpha", "0.8",
            "--backend", "toy", "--inversion-steps", "6", "--reverse-steps", "6", "--out", "o.png",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let img = RasterImage::load(dir.path().join("o.png")).unwrap();
    assert_eq!(img.dims(), (64, 64));
}

#[test]
fn missing_image_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = makeup(&["color", "--lips", "#B03A4A", "--out", "o.png"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--image") && err.contains("Usage"), "{err}");
}

#[test]
fn pipeline_errors_exit_1_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "face-a");
    let out = makeup(
        &["color", "--image", "face-a.png", "--labels", "face-a_labels.png", "--lips", "#B03A4A", "--alpha", "1.5", "--out", "o.png"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
    assert!(!dir.path().join("o.png").exists());

    let out = makeup(&["color", "--image", "absent.png", "--lips", "#B03A4A", "--out", "o.png"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn transfer_command_runs_on_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "face-a");
    write_fixture(dir.path(), "face-b");
    let out = makeup(
        &[
            "transfer", "--image", "face-a.png", "--labels", "face-a_labels.png", "--reference", "face-b.png",
            "--reference-labels", "face-b_labels.png", "--inversion-steps", "6", "--reverse-steps", "6", "--out", "t.png",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(RasterImage::load(dir.path().join("t.png")).unwrap().dims(), (64, 64));
}

#[test]
fn debug_dir_receives_masks() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "face-a");
    let out = makeup(
        &[
            "color", "--image", "face-a.png", "--fixture", "face-a", "--skin", "#E0B090", "--alpha", "0.5",
            "--inversion-steps", "4", "--reverse-steps", "4", "--out", "o.png", "--debug-dir", "dbg",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["x0_hat.png", "x_new.png", "mask-eyeshadow.png", "mask-lips.png"] {
        assert!(dir.path().join("dbg").join(f).exists(), "{f}");
    }
}

#[test]
fn schema_command_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = makeup(&["schema"], dir.path());
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["title"], "MakeupSpec");
}
