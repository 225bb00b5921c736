use std::process::{Command, Output};

fn telerisk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_telerisk")).args(args).output().unwrap()
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "split_fraction = 1.5\n").unwrap();
    let out = telerisk(&["model", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn unparsable_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(telerisk(&["synth", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    let data = dir.path().join("nowhere");
    std::fs::write(&cfg, format!("[paths]\ndata_dir = {:?}\noutput_dir = {:?}\n", data, dir.path().join("out"))).unwrap();
    let out = telerisk(&["predict", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.json"));
}

#[test]
fn seed_override_changes_the_population() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, sub: &str| {
        let cfg = dir.path().join(format!("{sub}.toml"));
        std::fs::write(
            &cfg,
            format!(
                "[population]\nn_reference = 2\nn_modeling = 2\nn_heldout = 1\ntrajectories_per_driver = 1\npoints_per_trajectory = 20\n[paths]\ndata_dir = {:?}\n",
                dir.path().join(sub)
            ),
        )
        .unwrap();
        let out = telerisk(&["synth", "--config", cfg.to_str().unwrap(), "--seed", seed]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(dir.path().join(sub).join("reference.csv")).unwrap()
    };
    assert_eq!(run("3", "a"), run("3", "b"));
    assert_ne!(run("3", "c"), run("4", "d"));
}
