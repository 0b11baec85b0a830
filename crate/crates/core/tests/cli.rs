use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
world.frames=6
net.hidden_dim=16
net.n_layers=2
flow.n_steps=3
optim.lr=1e-3
optim.warmup_steps=5
schedule.base_steps=12
schedule.cycle_steps=6
schedule.batch=6
eval.n_eval=4
data.n_per_speaker=2
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cycleflow"));
    c.env_remove("CYCLEFLOW_OUT");
    c
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn write_cfg(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p
}

fn pipeline(dir: &Path) {
    let cfg = write_cfg(dir, SMALL);
    let out = dir.join("out");
    ok(&run(&["gen-data"], &cfg, &out));
    ok(&run(&["train"], &cfg, &out));
    ok(&run(&["convert", "--utt", "3", "--target", "6"], &cfg, &out));
    ok(&run(&["eval"], &cfg, &out));
}

const OUTPUTS: [&str; 10] = [
    "world.arrays",
    "dataset.arrays",
    "manifest.csv",
    "checkpoint_base.arrays",
    "checkpoint.arrays",
    "train_log.csv",
    "conversion.arrays",
    "contours.csv",
    "eval_report.csv",
    "run.cfg",
];

#[test]
fn pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for name in OUTPUTS {
        let pa = if name == "run.cfg" {
            a.path().join(name)
        } else {
            a.path().join("out").join(name)
        };
        let pb = if name == "run.cfg" {
            b.path().join(name)
        } else {
            b.path().join("out").join(name)
        };
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap(), "{name}");
    }
    let out = a.path().join("out");
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,l_pitch,l_mel,l_xx,l_yy,l_xyx,l_xyy,total\n"));
    assert_eq!(log.lines().count(), 1 + 12 + 6);
    let contours = std::fs::read_to_string(out.join("contours.csv")).unwrap();
    assert_eq!(contours.lines().count(), 1 + 6);
    let report = std::fs::read_to_string(out.join("eval_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 4 + 1);
    assert!(report.lines().last().unwrap().starts_with("mean,"));
    assert!(!report.contains('\r'));
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 16);
}

#[test]
fn zero_n_eval_is_rejected_with_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        &format!("{SMALL}eval.n_eval=0\n").replace("eval.n_eval=4\n", ""),
    );
    let o = run(&["eval"], &cfg, &dir.path().join("out"));
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=config key=eval.n_eval "), "{err}");
}

#[test]
fn unknown_and_malformed_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    for (text, key) in [
        ("flow.sigmaa=1\n", "flow.sigmaa"),
        ("cycle.l2=-1\n", "cycle.l2"),
        ("flow.n_steps=x\n", "flow.n_steps"),
    ] {
        let cfg = write_cfg(dir.path(), text);
        let o = run(&["gen-data"], &cfg, &dir.path().join("out"));
        assert!(!o.status.success());
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.starts_with(&format!("error kind=config key={key} ")), "{err}");
    }
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    let o = run(&["train"], &cfg, &dir.path().join("empty"));
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error kind=missing_file "));
    let o = run(&["gen-data"], &dir.path().join("nope.cfg"), &dir.path().join("out"));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error kind=missing_file "));
}

#[test]
fn env_var_overrides_out_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    let env_out = dir.path().join("from_env");
    let o = bin()
        .env("CYCLEFLOW_OUT", &env_out)
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("from_flag"))
        .output()
        .unwrap();
    ok(&o);
    assert!(env_out.join("world.arrays").exists());
    assert!(!dir.path().join("from_flag").exists());
}

#[test]
fn seed_flag_changes_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    let out = dir.path().join("out");
    ok(&run(&["gen-data"], &cfg, &out));
    ok(&run(&["train"], &cfg, &out));
    let a = std::fs::read(out.join("checkpoint.arrays")).unwrap();
    ok(&bin()
        .args(["train", "--seed", "5", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap());
    assert_ne!(a, std::fs::read(out.join("checkpoint.arrays")).unwrap());
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    let out = dir.path().join("out");
    ok(&run(&["gen-data"], &cfg, &out));
    ok(&run(&["train"], &cfg, &out));
    let p = out.join("checkpoint.arrays");
    let text = std::fs::read_to_string(&p).unwrap();
    std::fs::write(&p, &text[..text.len() / 3]).unwrap();
    let o = run(&["eval"], &cfg, &out);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error kind=corrupt "));
}

#[test]
fn shipped_config_parses_and_validates() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.cfg");
    let cfg = cycleflow::cli::RunConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg, cycleflow::cli::RunConfig::default());
}
