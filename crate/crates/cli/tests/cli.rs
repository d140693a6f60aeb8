use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 6] = ["--set", "corpus.identities=2", "--set", "corpus.frames=12", "--set", "corpus.test_clips=1"];

fn masktalk(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_masktalk"))
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .args(args)
        .output()
        .expect("spawn masktalk")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn prepare(dir: &Path) {
    let mut args = vec!["prepare-data", "--out", "data"];
    args.extend(SMALL);
    let out = masktalk(dir, &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn first_clip(dir: &Path) -> std::path::PathBuf {
    let mut clips: Vec<_> = std::fs::read_dir(dir.join("data"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    clips.sort();
    clips.remove(0)
}

#[test]
fn prepare_data_writes_documented_formats() {
    let tmp = tempfile::tempdir().unwrap();
    prepare(tmp.path());
    let palette = std::fs::read_to_string(tmp.path().join("data/palette.txt")).unwrap();
    let lines: Vec<&str> = palette.lines().filter(|l| !l.trim().is_empty()).collect();
    assert!(!lines.is_empty());
    for l in &lines {
        let (id, name) = l.split_once(" -> ").unwrap_or_else(|| panic!("bad palette line {l:?}"));
        id.trim().parse::<u8>().unwrap();
        assert!(!name.trim().is_empty());
    }
    let clip = first_clip(tmp.path());
    assert!(clip.join("frames/frame_00000.png").is_file());
    assert!(clip.join("masks/frame_00011.png").is_file());
    assert!(!clip.join("masks/frame_00012.png").exists());
    let mel = std::fs::read(clip.join("audio.mel")).unwrap();
    let t = u32::from_le_bytes(mel[0..4].try_into().unwrap()) as usize;
    let bins = u32::from_le_bytes(mel[4..8].try_into().unwrap()) as usize;
    assert_eq!(bins, 80);
    assert!(t > 0);
    assert_eq!(mel.len(), 8 + 4 * t * bins);
}

#[test]
fn invalid_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = masktalk(tmp.path(), &["prepare-data", "--set", "no.such.key=1"]);
    assert_eq!(code(&out), 2);
    let out = masktalk(tmp.path(), &["prepare-data", "--set", "corpus.frames=many"]);
    assert_eq!(code(&out), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_masktalk"))
        .current_dir(tmp.path())
        .env("MASKTALK_CORPUS_SEED", "-3")
        .args(["prepare-data"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_input_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = masktalk(tmp.path(), &["infer", "--masks", "nowhere", "--reference", "nothing.png", "--out", "o"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_edit_spec_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("spec.txt"), "teleport mouth 3\n").unwrap();
    let out = masktalk(
        tmp.path(),
        &["edit", "--masks", "m", "--reference", "r.png", "--spec", "spec.txt", "--out", "o"],
    );
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn diverging_training_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec![
        "train-tsg",
        "--set",
        "corpus.frames=40",
        "--set",
        "sync.steps=20",
        "--set",
        "tsg.lr=1e30",
        "--set",
        "tsg.phase1_steps=5",
        "--set",
        "tsg.phase2_steps=0",
    ];
    args.extend(&SMALL[..2]);
    args.extend(&SMALL[4..]);
    let out = masktalk(tmp.path(), &args);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
