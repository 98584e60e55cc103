use std::path::Path;
use std::process::{Command, Output};

fn mmunet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmunet")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), "epochs = 3\nbatch_size = 2\nwidth_mult = 1/16\n").unwrap();

    let o = mmunet(&["synth", "--seed", "5", "--count", "2", "--size", "32", "--out", "data"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(d.join("data/images")).unwrap().count(), 2);

    let o = mmunet(&["train", "--config", "tiny.cfg", "--data", "data", "--out", "run"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines[0], "epoch,loss,lr,wd,f1_train");
    assert_eq!(lines.len(), 5);
    assert!(d.join("run/final.mmun").exists() && d.join("run/best.mmun").exists());

    let o = mmunet(&["eval", "--checkpoint", "run/final.mmun", "--data", "data"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("ACC SE SP F1"));
    let values: Vec<f64> = lines.next().unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 4);

    let image = std::fs::read_dir(d.join("data/images")).unwrap().next().unwrap().unwrap().path();
    let o = mmunet(&["predict", "--checkpoint", "run/final.mmun", "--image", image.to_str().unwrap(), "--out", "pred"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let written: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(written.len(), 2);
    for p in &written {
        assert!(d.join(p).exists(), "{p} missing");
    }
}

#[test]
fn ablate_is_rejected_outside_training() {
    let dir = tempfile::tempdir().unwrap();
    let o = mmunet(&["--ablate", "mmc", "synth", "--out", "x"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--ablate"));
    let o = mmunet(&["--ablate", "bn", "gradcheck"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "learning_rate = 1\n").unwrap();
    let o = mmunet(&["train", "--config", "bad.cfg", "--data", "data", "--out", "run"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = mmunet(&["gradcheck"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(!out.contains("FAIL"));
    assert!(out.contains("checks passed"));
}
