use std::path::{Path, PathBuf};
use std::process::Command;

use defectloc::env::{detect_sequence, EnvConfig, OraclePolicy};
use defectloc::features::{registry_lookup, ExternalProvider, FeatureExtractor, PROVIDER_ENV};
use defectloc::geometry::BBox;
use defectloc::imaging::GrayImage;
use defectloc::Error;
use serde_json::{json, Map, Value};

const PROVIDER: &str = r#"
import sys
from PIL import Image

print("DIM 3", flush=True)
for line in sys.stdin:
    cmd, _, arg = line.strip().partition(" ")
    if cmd == "QUIT":
        break
    img = Image.open(arg).convert("L")
    px = img.tobytes()
    mean = sum(px) / len(px) / 255.0
    print(f"{mean} {img.width} {img.height}", flush=True)
"#;

fn python() -> Option<&'static str> {
    Command::new("python3")
        .args(["-c", "import PIL"])
        .status()
        .ok()
        .filter(|s| s.success())
        .map(|_| "python3")
}

fn script(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("provider.py");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn python_provider_embeds_states() {
    let Some(py) = python() else {
        eprintln!("python3 with Pillow unavailable, skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let path = script(dir.path(), PROVIDER);
    let p = ExternalProvider::spawn(py, &[path.display().to_string()]).unwrap();
    assert_eq!(p.dim(), 3);
    let img = GrayImage::from_fn(224, 224, |x, _| if x < 112 { 0.0 } else { 1.0 });
    let v = p.extract(&img).unwrap();
    assert!((v[0] - 0.5).abs() < 1e-3, "{v:?}");
    assert_eq!(&v[1..], &[224.0, 224.0]);
    assert_eq!(p.metadata()["command"], py);
}

#[test]
fn provider_drives_an_episode_through_the_registry() {
    let Some(py) = python() else {
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let path = script(dir.path(), PROVIDER);
    let mut params = Map::new();
    params.insert("command".into(), json!(py));
    params.insert("args".into(), Value::Array(vec![json!(path.display().to_string())]));
    let ex = registry_lookup("external", &params).unwrap();
    let img = GrayImage::from_fn(64, 64, |x, y| ((x / 8 + y / 8) % 2) as f32);
    let gt = vec![BBox::new(8.0, 8.0, 40.0, 40.0)];
    let cfg = EnvConfig::default();
    let seq = detect_sequence(&img, &gt, &OraclePolicy { cfg }, ex.as_ref(), &cfg, 1).unwrap();
    assert_eq!(seq.detections.len(), 1);
    assert!(seq.total_steps > 0);
}

#[test]
fn bad_handshake_and_missing_command_are_provider_errors() {
    let Some(py) = python() else {
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let path = script(dir.path(), "print('HELLO')\n");
    let err = ExternalProvider::spawn(py, &[path.display().to_string()]).err().unwrap();
    assert!(matches!(err, Error::Provider(_)), "{err}");
    let err = ExternalProvider::spawn("/nonexistent/provider", &[]).err().unwrap();
    assert!(matches!(err, Error::Provider(_)), "{err}");

    let crash = script(dir.path(), "print('DIM 2', flush=True)\n");
    let p = ExternalProvider::spawn(py, &[crash.display().to_string()]).unwrap();
    let err = p.extract(&GrayImage::filled(224, 224, 0.5)).unwrap_err();
    assert!(matches!(err, Error::Provider(_)), "{err}");
}

#[test]
fn env_var_names_the_provider() {
    let Some(py) = python() else {
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let path = script(dir.path(), PROVIDER);
    // a single-word command keeps this independent of how the variable is split
    let wrapper = dir.path().join("provider.sh");
    std::fs::write(&wrapper, format!("#!/bin/sh\nexec {py} {}\n", path.display())).unwrap();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&wrapper, std::fs::Permissions::from_mode(0o755)).unwrap();
    }
    // SAFETY: this test binary reads PROVIDER_ENV only here
    unsafe { std::env::set_var(PROVIDER_ENV, &wrapper) };
    let ex = registry_lookup("external", &Map::new()).unwrap();
    assert_eq!(ex.dim(), 3);
}
