use dmc::config::KEYS;
use dmc::{Error, Mode, RunConfig};

fn config_err(r: dmc::Result<RunConfig>) -> String {
    match r {
        Err(Error::Config(m)) => m,
        Err(other) => panic!("expected a config error, got {other}"),
        Ok(_) => panic!("expected a config error"),
    }
}

#[test]
fn defaults_follow_the_published_settings() {
    let c = RunConfig::default();
    assert_eq!(c.k().unwrap(), 5);
    assert_eq!(c.get("xi"), "50");
    assert_eq!(c.get("lambda"), "0.1");
    assert_eq!(c.get("kappa"), "90");
    assert_eq!(c.get("count"), "1000000");
    let iql = c.iql().unwrap();
    assert_eq!((iql.lr, iql.batch_tar, iql.batch_src), (3e-4, 128, 128));
    assert_eq!((iql.polyak, iql.gamma, iql.lambda, iql.xi), (5e-3, 0.99, 0.1, 50.0));
    assert_eq!(c.diffusion().unwrap().lr, 3e-4);
    assert_eq!(c.mode().unwrap(), Mode::Dmc);
    c.validate().unwrap();
}

#[test]
fn every_key_is_documented_once() {
    let mut keys: Vec<&str> = KEYS.iter().map(|k| k.0).collect();
    assert!(KEYS.iter().all(|k| !k.2.is_empty()));
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), KEYS.len());
    assert_eq!(RunConfig::default().values().len(), KEYS.len());
}

#[test]
fn unknown_keys_are_errors() {
    let m = config_err(RunConfig::parse("k = 5\nkk = 3\n", "run.cfg"));
    assert!(m.contains("run.cfg:2") && m.contains("kk"), "{m}");
    let mut c = RunConfig::default();
    assert!(matches!(c.set_pair("rl.temperature=0.2"), Err(Error::Config(_))));
}

#[test]
fn duplicate_and_malformed_lines_are_errors() {
    assert!(config_err(RunConfig::parse("k = 5\nk = 6\n", "c")).contains("already set on line 1"));
    assert!(config_err(RunConfig::parse("just words\n", "c")).contains("c:1"));
}

#[test]
fn comments_and_overrides() {
    let mut c = RunConfig::parse("# header\nk = 7 # inline\n\nxi = 25\n", "c").unwrap();
    assert_eq!(c.k().unwrap(), 7);
    c.set_pair("k=9").unwrap();
    assert_eq!(c.k().unwrap(), 9);
    assert_eq!(c.iql().unwrap().xi, 25.0);
}

#[test]
fn render_parses_back() {
    let mut c = RunConfig::default();
    c.set("rl.hidden", "16,8").unwrap();
    c.set("src", "a b.dmcd").unwrap();
    assert_eq!(RunConfig::parse(&c.render(), "rendered").unwrap(), c);
    assert_eq!(RunConfig::from_values(c.values()).unwrap(), c);
}

#[test]
fn baseline_modes_drop_the_regularizer() {
    let mut c = RunConfig::default();
    c.set("rl.mode", "pooled").unwrap();
    assert_eq!(c.iql().unwrap().lambda, 0.0);
    c.set("rl.mode", "target").unwrap();
    assert_eq!(c.mode().unwrap(), Mode::TargetOnly);
    c.set("rl.mode", "mixed").unwrap();
    assert!(c.validate().is_err());
}

#[test]
fn invalid_values_fail_validation() {
    for (k, v) in [
        ("k", "0"),
        ("k", "five"),
        ("count", "0"),
        ("rl.hidden", "16,,8"),
        ("env.shift", "wind"),
        ("diffusion.sigma_min", "100"),
        ("collect.src_quality", "great"),
    ] {
        let mut c = RunConfig::default();
        c.set(k, v).unwrap();
        let e = c.validate().unwrap_err();
        assert_eq!(e.exit_code(), 3, "{k} = {v}: {e}");
    }
}

#[test]
fn target_environment_halves_gravity() {
    let c = RunConfig::default();
    let (s, t) = (c.source_spec().unwrap(), c.target_spec().unwrap());
    assert_eq!(t.gravity, s.gravity / 2.0);
    let mut c = c;
    c.set("env.shift", "kinematic").unwrap();
    let t = c.target_spec().unwrap();
    assert_eq!((t.joint_clip[1], t.gravity), (0.3, s.gravity));
}

#[test]
fn required_paths_are_reported() {
    let c = RunConfig::default();
    assert!(matches!(c.src(), Err(Error::Config(m)) if m.contains("src")));
}
