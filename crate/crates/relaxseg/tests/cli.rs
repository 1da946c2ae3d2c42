use std::path::Path;
use std::process::{Command, Output};

fn config_text(out: &Path) -> String {
    format!(
        r#"output_dir = "{}"
[dataset]
volume_dims = [16, 16, 16]
n_samples = 6
n_test = 2
[network]
base_channels = 4
[stage1]
epochs = 1
[stage2]
epochs = 1
[stage3]
epochs = 1
combos_per_step = 2
[eval]
n_perm = 2
"#,
        out.display()
    )
}

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), config_text(&dir.path().join("out"))).unwrap();
        Run { dir }
    }

    fn out(&self) -> std::path::PathBuf {
        self.dir.path().join("out")
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_relaxseg"))
            .arg("--config")
            .arg(self.dir.path().join("run.toml"))
            .args(args)
            .env_remove("RELAXSEG_OUTPUT_DIR")
            .output()
            .unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_writes_containers_and_refuses_to_overwrite() {
    let r = Run::new();
    let data = r.dir.path().join("data");
    let d = data.to_str().unwrap();
    let o = r.cmd(&["gen-data", "--out", d]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let umrv = std::fs::read_dir(&data)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "umrv"))
        .count();
    assert_eq!(umrv, 6);
    let stdout = String::from_utf8_lossy(&o.stdout);
    let hash = relaxseg::dataset::file_hash(&data.join("manifest.json")).unwrap();
    assert!(stdout.contains(&hash), "{stdout}");

    let again = r.cmd(&["gen-data", "--out", d]);
    assert_eq!(code(&again), 1);
    assert_eq!(code(&r.cmd(&["gen-data", "--out", d, "--force"])), 0);
    assert_eq!(relaxseg::dataset::file_hash(&data.join("manifest.json")).unwrap(), hash);
}

#[test]
fn full_pipeline_and_report_rules() {
    let r = Run::new();
    // stage 3 before stage 2 exists
    let o = r.cmd(&["train", "--stage", "3"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Contrastive"), "{}", stderr(&o));

    for s in ["1", "2", "3"] {
        let o = r.cmd(&["train", "--stage", s]);
        assert_eq!(code(&o), 0, "stage {s}: {}", stderr(&o));
        assert!(r.out().join(format!("stage{s}.ckpt")).exists());
        let log = std::fs::read_to_string(r.out().join(format!("metrics/stage{s}.jsonl"))).unwrap();
        for line in log.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["loss"].as_f64().unwrap().is_finite());
        }
    }

    // stage 2 handed a stage-2 checkpoint as its init
    let wrong = r.out().join("stage2.ckpt");
    let o = r.cmd(&["train", "--stage", "2", "--init", wrong.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    let o = r.cmd(&["eval", "--report", "csv,md"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let reports = r.out().join("reports");
    let csv = std::fs::read_to_string(reports.join("stage3_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 15 * 3 + 2 * 3);
    relaxseg::report::sweep_from_csv(&csv).unwrap();
    assert!(reports.join("stage3_sweep.md").exists());
    assert!(!reports.join("stage3_sweep.png").exists());

    // a config that changes the data invalidates the checkpoint
    std::fs::remove_dir_all(&reports).unwrap();
    let o = r.cmd(&["--set", "dataset.seed=5", "eval"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(!reports.exists() || std::fs::read_dir(&reports).unwrap().next().is_none());
    let o = r.cmd(&["--set", "dataset.seed=5", "eval", "--report", "csv", "--allow-config-mismatch"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    let r = Run::new();
    assert_eq!(code(&r.cmd(&["ablate", "--axis", "colour"])), 1);
    assert_eq!(code(&r.cmd(&["train", "--stage", "7"])), 1);
    assert_eq!(code(&r.cmd(&["eval", "--report", "pdf"])), 1);
    assert_eq!(code(&r.cmd(&["--set", "network.base_channels=6", "train", "--stage", "1"])), 1);
    assert_eq!(code(&r.cmd(&["--set", "stage1.nonsense=1", "train", "--stage", "1"])), 1);
}

#[test]
fn missing_config_file_is_a_config_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_relaxseg"))
        .args(["--config", "/nonexistent/run.toml", "gen-data"])
        .output()
        .unwrap();
    assert_ne!(code(&o), 0);
}

#[test]
fn help_lists_config_keys() {
    let o = Command::new(env!("CARGO_BIN_EXE_relaxseg")).arg("--help").output().unwrap();
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["gen-data", "train", "eval", "ablate", "stage1", "combos_per_step", "output_dir", "n_perm"] {
        assert!(text.contains(key), "help lacks {key}");
    }
}
