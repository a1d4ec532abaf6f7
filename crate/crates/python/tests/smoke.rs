//! Runs the Python smoke script when the extension is importable.

use std::path::Path;
use std::process::Command;

#[test]
fn python_smoke_script() {
    let importable = Command::new("python3")
        .args(["-c", "import dgm_py"])
        .status()
        .map(|s| s.success())
        .unwrap_or(false);
    if !importable {
        eprintln!("dgm_py is not installed; run `pip install ./crates/python` first");
        return;
    }
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("python/smoke_test.py");
    let out = Command::new("python3").arg(script).output().unwrap();
    assert!(out.status.success(), "{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}
