use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vmdnn::analysis::ResultsTable;
use vmdnn::experiment::{Condition, ExperimentConfig, SplitSizes};
use vmdnn::network::VmdnnConfig;

fn vmdnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmdnn"))
        .args(args)
        .env("VMDNN_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.splits = SplitSizes { tr: 4, obj: 2, sub: 2, obj_sub: 2, gestureless: 2, clips: 4 };
    cfg.training.epochs = 2;
    cfg.pretraining.grasp_epochs = 1;
    cfg.pretraining.visual_epochs = 1;
    cfg.experiment.seeds = vec![3];
    cfg.experiment.conditions = vec![Condition::ALL[0], Condition::ALL[3]];
    cfg.experiment.analysis_trials = 2;
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn checkpoints(root: &Path) -> BTreeMap<String, Vec<u8>> {
    tree(root).into_iter().filter(|(k, _)| k.ends_with(".ckpt")).collect()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn default_config_is_a_valid_config() {
    let o = vmdnn(&["default-config"]);
    assert_eq!(code(&o), 0);
    let cfg = ExperimentConfig::from_json(&stdout(&o)).unwrap();
    assert!(cfg.violations().is_empty());
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = ExperimentConfig::from_json(&fs::read_to_string(root.join("desk.json")).unwrap()).unwrap();
    assert_eq!(desk, ExperimentConfig::desk());
    let tiny: VmdnnConfig = serde_json::from_str(&fs::read_to_string(root.join("tiny-network.json")).unwrap()).unwrap();
    assert_eq!(tiny, VmdnnConfig::tiny());
}

#[test]
fn invalid_config_exits_2_with_violations() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.task.group_size = 7;
    cfg.training.learning_rate = -1.0;
    let p = write_config(dir.path(), "bad.json", &cfg);
    let out = dir.path().join("out");
    let o = vmdnn(&["gen-data", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("pose values"), "{err}");
    assert!(err.contains("learning"), "{err}");
    assert!(!out.exists());
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = serde_json::to_value(small_config()).unwrap();
    v["training"]["epochz"] = serde_json::json!(3);
    let p = dir.path().join("typo.json");
    fs::write(&p, v.to_string()).unwrap();
    let o = vmdnn(&["gen-data", "--config", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("epochz"));
}

#[test]
fn bad_output_path_exits_3_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "c.json", &small_config());
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = blocker.join("out");
    let o = vmdnn(&["gen-data", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert_eq!(fs::read(&blocker).unwrap(), b"x");
    let o = vmdnn(&["gen-data", "--config", p.to_str().unwrap(), "--out", blocker.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn missing_prerequisites_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "c.json", &small_config());
    let out = dir.path().join("out");
    let o = vmdnn(&["train", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("data"), "{}", stderr(&o));

    assert_eq!(code(&vmdnn(&["gen-data", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()])), 0);
    let o = vmdnn(&["train", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("seed3.ckpt"), "{}", stderr(&o));
    let o = vmdnn(&["eval", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("models"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.training.learning_rate = 1e300;
    cfg.training.clip_norm = None;
    let p = write_config(dir.path(), "c.json", &cfg);
    let out = dir.path().join("out");
    assert_eq!(code(&vmdnn(&["gen-data", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()])), 0);
    let o = vmdnn(&["train", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap(), "--from-scratch"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(stderr(&o).contains("layer"), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_on_the_tiny_network() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny-network.json");
    let dir = tempfile::tempdir().unwrap();
    let o = vmdnn(&["gradcheck", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("max relative error"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "c.json", &small_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = vmdnn(&["gen-data", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(tree(&a.join("data")), tree(&b.join("data")));
    assert!(a.join("gen-data.manifest.json").exists());
    let before = tree(&a.join("data"));
    assert_eq!(code(&vmdnn(&["gen-data", "--config", p.to_str().unwrap(), "--out", a.to_str().unwrap()])), 0);
    assert_eq!(tree(&a.join("data")), before);
}

#[test]
fn full_pipeline_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "c.json", &small_config());
    let out = dir.path().join("out");
    let run = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd, "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap(), "--workers", "1"];
        args.extend_from_slice(extra);
        let o = vmdnn(&args);
        assert_eq!(code(&o), 0, "{cmd}: {}{}", stdout(&o), stderr(&o));
        o
    };
    run("gen-data", &[]);
    run("pretrain", &[]);
    run("train", &[]);
    let models = checkpoints(&out.join("models"));
    assert_eq!(models.len(), 2);
    run("train", &[]);
    assert_eq!(checkpoints(&out.join("models")), models, "retraining with the same seed changed the checkpoints");

    run("eval", &[]);
    let table = ResultsTable::read_csv(&out.join("results/success.csv")).unwrap();
    assert_eq!(table.rows.len(), 2 * 4);
    run("occlude", &[]);
    let occ = ResultsTable::read_csv(&out.join("results/occlusion.csv")).unwrap();
    assert_eq!(occ.rows.len(), 2 * 6);
    run("analyze", &[]);
    assert!(out.join("analysis/occlusion_correlation.csv").exists());
    let pcs = fs::read_to_string(out.join("analysis/mstnn_slow_seed3_m_s_intact.csv")).unwrap();
    assert!(pcs.starts_with("trial,step,layer,pc1,pc2,pc3"));
    for cmd in ["gen-data", "pretrain", "train", "eval", "occlude", "analyze"] {
        let m: serde_json::Value =
            serde_json::from_slice(&fs::read(out.join(format!("{cmd}.manifest.json"))).unwrap()).unwrap();
        assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
        assert_eq!(m["seeds"], serde_json::json!([3]));
    }

    // a manifest is a complete config: re-running from it reproduces the run
    let manifest = out.join("train.manifest.json");
    let o = vmdnn(&["train", "--config", manifest.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(checkpoints(&out.join("models")), models);
}

#[test]
fn teacher_as_model_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "c.json", &small_config());
    let out = dir.path().join("out");
    let base = ["--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert_eq!(code(&vmdnn(&[&["gen-data"], &base[..]].concat())), 0);
    let o = vmdnn(&[&["eval"], &base[..], &["--teacher-as-model"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = ResultsTable::read_csv(&out.join("results/success_teacher.csv")).unwrap();
    assert!(!t.rows.is_empty());
    assert!(t.rows.iter().all(|r| r.successes == r.n), "{t:?}");
    let o = vmdnn(&[&["occlude"], &base[..], &["--teacher-as-model"]].concat());
    assert_eq!(code(&o), 0);
    let t = ResultsTable::read_csv(&out.join("results/occlusion_teacher.csv")).unwrap();
    assert!(t.rows.iter().all(|r| r.successes == r.n));
}

#[test]
fn seed_flag_overrides_the_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.experiment.seeds = vec![1, 2];
    cfg.pretraining.enabled = false;
    let p = write_config(dir.path(), "c.json", &cfg);
    let out = dir.path().join("out");
    let base = ["--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert_eq!(code(&vmdnn(&[&["gen-data"], &base[..]].concat())), 0);
    let o = vmdnn(&[&["train"], &base[..], &["--seed", "9"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let names: Vec<String> = checkpoints(&out.join("models")).into_keys().collect();
    assert!(names.iter().all(|n| n.contains("seed9")), "{names:?}");
}

#[test]
fn schema_covers_every_config_key() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let schema: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("experiment.schema.json")).unwrap()).unwrap();
    let cfg = serde_json::to_value(ExperimentConfig::desk()).unwrap();
    fn walk(schema: &serde_json::Value, value: &serde_json::Value, path: &str) {
        if let Some(obj) = value.as_object() {
            assert_eq!(schema["additionalProperties"], serde_json::json!(false), "{path}");
            let props = schema["properties"].as_object().unwrap_or_else(|| panic!("{path} has no properties"));
            let mut a: Vec<&String> = obj.keys().collect();
            let mut b: Vec<&String> = props.keys().collect();
            a.sort();
            b.sort();
            assert_eq!(a, b, "{path}");
            for (k, v) in obj {
                walk(&props[k], v, &format!("{path}.{k}"));
            }
        }
    }
    walk(&schema, &cfg, "");
}
