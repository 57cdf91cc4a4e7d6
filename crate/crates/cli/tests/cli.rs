use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"
seed = 3

[dataset.synth]
n_classes = 4
samples_per_class = 8
image_size = 32

[pretrain]
epochs = 2

[train]
epochs = 3
steps_per_epoch = 3
batch_size = 2

[eval]
episodes = 12

[ablation]
seeds = [3]
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_priorcascade"));
    c.env_remove("PRIORCASCADE_OUT").env("RUST_LOG", "warn");
    c
}

struct Run {
    dir: TempDir,
}

impl Run {
    fn new(config: &str) -> Run {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("exp.toml"), config).unwrap();
        Run { dir }
    }

    fn tiny() -> Run {
        Run::new(TINY)
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("exp.toml")
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = bin();
        c.current_dir(self.dir.path())
            .arg("--config")
            .arg(self.config())
            .arg("--out")
            .arg(self.out())
            .args(args);
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        o
    }

    fn variant(&self) -> PathBuf {
        self.out().join("seed3/split0/t2-different-augmented")
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Relative path to contents of every file under `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let o = bin().arg("frobnicate").output().unwrap();
    assert_eq!(code(&o), 1);
    let o = bin().args(["eval", "--episodes", "many"]).output().unwrap();
    assert_eq!(code(&o), 1);
    assert_eq!(code(&bin().arg("--help").output().unwrap()), 0);
}

#[test]
fn invalid_config_names_the_field() {
    let run = Run::new("[train]\nmomentum = 2.0\n");
    let o = run.run(&["train"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("train.momentum"), "{}", stderr(&o));

    let run = Run::new("[train]\nlearning_rate = 0.1\n");
    assert_eq!(code(&run.run(&["gen-data"])), 1);

    let run = Run::tiny();
    let o = run.cmd(&["gen-data"]).arg("--config").arg("missing.toml").output().unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_dataset_is_a_config_error() {
    let run = Run::tiny();
    let o = run.run(&["train"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("gen-data"));
}

#[test]
fn gen_data_writes_manifest_and_is_reproducible() {
    let a = Run::tiny();
    a.ok(&["gen-data"]);
    let manifest = json(&a.out().join("data/manifest.json"));
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 4 * 8);
    assert_eq!(manifest["seed"], 3);
    assert!(a.out().join("data/splits.txt").exists());
    assert!(a.out().join("config.gen-data.toml").exists());
    assert!(!a.out().join(".lock").exists());

    let b = Run::tiny();
    b.ok(&["gen-data"]);
    assert_eq!(tree(&a.out().join("data")), tree(&b.out().join("data")));
}

#[test]
fn gen_data_refuses_a_populated_dir_without_force() {
    let run = Run::tiny();
    run.ok(&["gen-data"]);
    let stray = run.out().join("data/stray.txt");
    fs::write(&stray, "old").unwrap();
    assert_eq!(code(&run.run(&["gen-data"])), 1);
    assert!(stray.exists());
    run.ok(&["gen-data", "--force"]);
    assert!(!stray.exists());
    assert_eq!(json(&run.out().join("data/manifest.json"))["entries"].as_array().unwrap().len(), 32);
}

#[test]
fn seed_flag_and_env_output_root() {
    let run = Run::tiny();
    let root = run.dir.path().join("from-env");
    let o = bin()
        .current_dir(run.dir.path())
        .env("PRIORCASCADE_OUT", &root)
        .arg("--config")
        .arg(run.config())
        .args(["--seed", "9", "gen-data"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&root.join("data/manifest.json"))["seed"], 9);
    let snap = fs::read_to_string(root.join("config.gen-data.toml")).unwrap();
    assert!(snap.contains("seed = 9"));
}

#[test]
fn lock_held_by_a_live_process_is_refused() {
    let run = Run::tiny();
    fs::create_dir_all(run.out()).unwrap();
    fs::write(run.out().join(".lock"), format!("{}\n", std::process::id())).unwrap();
    let o = run.run(&["gen-data"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("in use"));
}

#[test]
fn stale_lock_is_taken_over() {
    let run = Run::tiny();
    fs::create_dir_all(run.out()).unwrap();
    let mut child = bin().arg("--version").stdout(Stdio::null()).spawn().unwrap();
    let dead = child.id();
    child.wait().unwrap();
    fs::write(run.out().join(".lock"), format!("{dead}\n")).unwrap();
    run.ok(&["gen-data"]);
}

#[test]
fn train_writes_one_checkpoint_per_network_and_reproduces_from_snapshot() {
    let run = Run::tiny();
    run.ok(&["gen-data"]);
    run.ok(&["train"]);
    let v = run.variant();
    let ckpts: Vec<_> = fs::read_dir(&v)
        .unwrap()
        .filter_map(|e| {
            let n = e.unwrap().file_name().into_string().unwrap();
            n.starts_with("cascade-g").then_some(n)
        })
        .collect();
    assert_eq!(ckpts.len(), 2, "{ckpts:?}");
    assert!(v.join("train_log.jsonl").exists());
    assert!(run.out().join("seed3/split0/backbone.ckpt").exists());

    let snap = run.out().join("config.train.toml");
    let other = run.dir.path().join("rerun");
    let o = bin()
        .arg("--config")
        .arg(&snap)
        .arg("--out")
        .arg(&other)
        .arg("gen-data")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let o = bin().arg("--config").arg(&snap).arg("--out").arg(&other).arg("train").output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let rerun = other.join("seed3/split0/t2-different-augmented");
    for f in ["cascade-g1.ckpt", "cascade-g2.ckpt"] {
        assert_eq!(fs::read(v.join(f)).unwrap(), fs::read(rerun.join(f)).unwrap(), "{f}");
    }
    let losses = |p: &Path| -> Vec<f64> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap())
            .filter(|r| r["kind"] == "step")
            .map(|r| r["loss"].as_f64().unwrap())
            .collect()
    };
    assert_eq!(losses(&v.join("train_log.jsonl")), losses(&rerun.join("train_log.jsonl")));

    let o = run.run(&["train"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("already trained"));
}

#[test]
fn interrupted_training_resumes_to_the_same_result() {
    let config = TINY.replace("epochs = 3\n", "epochs = 40\n");
    let full = Run::new(&config);
    full.ok(&["gen-data"]);
    full.ok(&["train"]);

    let cut = Run::new(&config);
    cut.ok(&["gen-data"]);
    let state = cut.variant().join("train_state.ckpt");
    let mut child = cut.cmd(&["train"]).stdout(Stdio::null()).stderr(Stdio::null()).spawn().unwrap();
    let start = Instant::now();
    while !state.exists() && start.elapsed() < Duration::from_secs(60) {
        std::thread::sleep(Duration::from_millis(2));
    }
    std::thread::sleep(Duration::from_millis(20));
    child.kill().unwrap();
    child.wait().unwrap();
    let interrupted = !cut.variant().join("cascade-g2.ckpt").exists();
    cut.ok(&["train"]);
    for f in ["cascade-g1.ckpt", "cascade-g2.ckpt"] {
        assert_eq!(
            fs::read(full.variant().join(f)).unwrap(),
            fs::read(cut.variant().join(f)).unwrap(),
            "{f} (interrupted: {interrupted})"
        );
    }
    assert!(!state.exists());
}

#[test]
fn eval_reports_follow_the_flags_and_are_deterministic() {
    let run = Run::tiny();
    run.ok(&["gen-data"]);
    run.ok(&["train"]);
    run.ok(&["eval", "--episodes", "50"]);
    let one = json(&run.variant().join("eval-1shot.json"));
    assert_eq!(one["n_episodes"], 50);
    assert_eq!(one["shots"], 1);
    run.ok(&["eval", "--episodes", "20", "--shots", "5"]);
    let five = json(&run.variant().join("eval-5shot.json"));
    assert_eq!(five["shots"], 5);
    assert_eq!(five["n_episodes"], 20);
    let snap = fs::read_to_string(run.out().join("config.eval.toml")).unwrap();
    assert!(snap.contains("shots = 5"));

    run.ok(&["eval", "--episodes", "50"]);
    let again = json(&run.variant().join("eval-1shot.json"));
    assert_eq!(one, again);
}

#[test]
fn eval_rejects_checkpoints_of_another_config() {
    let run = Run::tiny();
    run.ok(&["gen-data"]);
    run.ok(&["train"]);
    let changed = run.dir.path().join("changed.toml");
    fs::write(&changed, TINY.replace("epochs = 3\n", "epochs = 4\n")).unwrap();
    let o = bin()
        .arg("--config")
        .arg(&changed)
        .arg("--out")
        .arg(run.out())
        .arg("eval")
        .arg("--checkpoints")
        .arg(run.variant())
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("fingerprint"), "{}", stderr(&o));
}

#[test]
fn eval_before_training_and_corrupt_checkpoints() {
    let run = Run::tiny();
    run.ok(&["gen-data"]);
    assert_eq!(code(&run.run(&["eval"])), 1);
    run.ok(&["train"]);
    fs::write(run.out().join("seed3/split0/backbone.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&run.run(&["eval"])), 2);
}

#[test]
fn viz_writes_panels_and_index_deterministically() {
    let run = Run::tiny();
    run.ok(&["gen-data"]);
    run.ok(&["train"]);
    run.ok(&["viz", "--panels", "4"]);
    let dir = run.variant().join("viz");
    let first = tree(&dir);
    assert_eq!(first.len(), 5);
    let index = json(&dir.join("index.json"));
    assert_eq!(index["panels"].as_array().unwrap().len(), 4);
    assert_eq!(index["columns"], "abcdef");
    let img = image_size(&dir.join("panel-00.png"));
    assert_eq!(img, (6 * 32, 32));

    run.ok(&["viz", "--panels", "4"]);
    assert_eq!(first, tree(&dir));

    run.ok(&["viz", "--panels", "2", "--columns", "d,e,f"]);
    assert_eq!(image_size(&dir.join("panel-01.png")), (3 * 32, 32));
    assert!(!dir.join("panel-02.png").exists());
    assert_eq!(json(&dir.join("index.json"))["columns"], "def");
    assert_eq!(code(&run.run(&["viz", "--columns", "d,z"])), 1);
}

fn image_size(path: &Path) -> (u32, u32) {
    let bytes = fs::read(path).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    let w = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    (w, h)
}

#[test]
fn ablate_eval_only_marks_untrained_variants_absent() {
    let run = Run::tiny();
    run.ok(&["gen-data"]);
    let o = run.ok(&["ablate", "--eval-only"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().filter(|l| l.contains("absent")).count(), 3, "{text}");
    assert!(run.out().join("ablation.txt").exists());
}

#[test]
fn ablate_trains_and_tabulates_every_variant() {
    let run = Run::tiny();
    run.ok(&["gen-data"]);
    run.ok(&["ablate"]);
    let table = json(&run.out().join("ablation.json"));
    let rows = table["table"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let v = r["cells"][0].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&v));
    }
    assert_eq!(table["reports"].as_array().unwrap().len(), 3 * 4);
    let text = fs::read_to_string(run.out().join("ablation.txt")).unwrap();
    assert!(!text.contains("absent"));
    let again = run.ok(&["ablate", "--eval-only"]);
    assert_eq!(String::from_utf8_lossy(&again.stdout), text);
}
