use std::collections::BTreeMap;

use dmc::manifest::{input_key, sha256_file, sha256_hex, verify_input, Manifest, StageRecord};
use dmc::Error;

fn record(command: &str, outputs: &[(&str, &str)]) -> StageRecord {
    StageRecord {
        command: command.into(),
        config: BTreeMap::from([("k".to_string(), "5".to_string())]),
        inputs: BTreeMap::new(),
        outputs: outputs.iter().map(|(f, h)| (f.to_string(), h.to_string())).collect(),
        seed: 3,
        started_unix: 0,
        wall_clock_secs: 0.5,
    }
}

#[test]
fn sha256_known_value() {
    assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

#[test]
fn changed_outputs_are_stale() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("scores.csv");
    std::fs::write(&f, "row\n").unwrap();
    let mut m = Manifest::default();
    m.record(record("score", &[("scores.csv", &sha256_file(&f).unwrap())]));
    m.save(dir.path()).unwrap();
    let m = Manifest::load_or_default(dir.path()).unwrap();
    assert_eq!(m.verify_output(dir.path(), "scores.csv").unwrap().command, "score");

    std::fs::write(&f, "row\n0\n").unwrap();
    let e = m.verify_output(dir.path(), "scores.csv").unwrap_err();
    assert!(matches!(e, Error::Stale { .. }));
    assert_eq!(e.exit_code(), 3);
    assert!(matches!(m.verify_output(dir.path(), "model.dmcw"), Err(Error::Stale { .. })));
}

#[test]
fn rerecording_replaces_the_stage() {
    let mut m = Manifest::default();
    m.record(record("score", &[("a", "1")]));
    m.record(record("generate", &[("b", "2")]));
    m.record(record("score", &[("a", "3")]));
    assert_eq!(m.stages.len(), 2);
    assert_eq!(m.stage("score").unwrap().outputs["a"], "3");
    assert_eq!(m.producer("b").unwrap().command, "generate");
}

#[test]
fn inputs_are_checked_by_hash() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("src.dmcd");
    std::fs::write(&f, [1u8, 2, 3]).unwrap();
    let mut r = record("score", &[]);
    r.inputs.insert(input_key(&f), sha256_file(&f).unwrap());
    verify_input(&r, &f).unwrap();
    std::fs::write(&f, [1u8, 2, 4]).unwrap();
    assert!(matches!(verify_input(&r, &f), Err(Error::Stale { .. })));
    assert!(matches!(verify_input(&r, &dir.path().join("other")), Err(Error::Stale { .. })));
}

#[test]
fn unknown_manifest_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.json"), r#"{"version": 9, "stages": []}"#).unwrap();
    assert!(matches!(Manifest::load_or_default(dir.path()), Err(Error::Format { .. })));
}
