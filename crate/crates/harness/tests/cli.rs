use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tilebt_harness::programs::{CHAINED_ARITHMETIC, OVERLAPPING};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tilebt-cli-{}-{name}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn tilebt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tilebt")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn build(dir: &Path, source: &str) -> (String, String) {
    let s = dir.join("prog.s");
    let image = dir.join("prog.bin");
    let elvt = dir.join("prog.elvt");
    fs::write(&s, source).unwrap();
    let out = tilebt(&["asm", s.to_str().unwrap(), "-o", image.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = tilebt(&["translate", image.to_str().unwrap(), "-o", elvt.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (image.to_str().unwrap().into(), elvt.to_str().unwrap().into())
}

#[test]
fn asm_translate_run_round_trip() {
    let dir = scratch("round");
    let (image, elvt) = build(&dir, OVERLAPPING);
    for rdi in ["0", "7", "0x2A"] {
        let reg = format!("rdi={rdi}");
        let a = tilebt(&["run-source", &image, "--reg", &reg]);
        let b = tilebt(&["run", &elvt, "--reg", &reg]);
        assert_eq!(code(&a), code(&b), "rdi={rdi}");
        assert_eq!(a.stdout, b.stdout);
    }
    assert_eq!(code(&tilebt(&["run", &elvt, "--reg", "RDI=7"])), 7);
    let out = tilebt(&["--json", "run", &elvt]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["regs"]["RAX"], "0xc2");
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn metrics_reads_the_symbol_sidecar() {
    let dir = scratch("metrics");
    let (image, elvt) = build(&dir, CHAINED_ARITHMETIC);
    let out = tilebt(&["--json", "metrics", &elvt, "--symbols", &format!("{image}.syms")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["expansion"].as_f64().unwrap() > 1.0);
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn exit_codes() {
    assert_eq!(code(&tilebt(&["difftest", "--seeds", "0..5"])), 0);
    assert_eq!(code(&tilebt(&["difftest", "--seeds", "5..1"])), 2);
    assert_eq!(code(&tilebt(&["run", "/nonexistent/image.elvt"])), 2);
    let dir = scratch("trap");
    let (image, elvt) = build(&dir, "int3\n");
    assert_eq!(code(&tilebt(&["run-source", &image])), 3);
    assert_eq!(code(&tilebt(&["run", &elvt])), 3);
    fs::remove_dir_all(dir).unwrap();
}
