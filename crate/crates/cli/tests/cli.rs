use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use vmfcomp_core::data::{load_dataset, save_dataset};
use vmfcomp_core::trainers::load_checkpoint;

const TINY: &str = r#"
[data]
per_domain = 8
[data.synth]
size = [32, 32]
[split]
label_fraction = 0.25
[train]
iterations = 3
lr = 0.001
pretrain_epochs = 0
[train.arch]
input_size = [32, 32]
feature_stride = 1
feature_channels = 8
num_kernels = 4
unet_widths = [4, 8]
head_width = 4
classifier_width = 4
classifier_hidden = 8
[eval]
probe_samples = 4
translation_shift = [2, 0]
"#;

struct Work {
    dir: TempDir,
}

impl Work {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cfg.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_vmfcomp"))
            .args(args)
            .current_dir(self.dir.path())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_slice(&std::fs::read(self.path(rel)).unwrap()).unwrap()
    }
}

fn tree(root: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p.clone());
            }
            out.insert(p.strip_prefix(root).unwrap().to_path_buf());
        }
    }
    out
}

#[test]
fn default_gen_writes_four_domains_and_is_idempotent() {
    let w = Work::new("");
    w.ok(&["gen", "--out", "data"]);
    for d in 0..4 {
        let n = std::fs::read_dir(w.path(&format!("data/{d}"))).unwrap().count();
        assert_eq!(n, 200, "domain {d}");
    }
    let first = w.json("data/run_manifest.json");
    let again = w.ok(&["gen", "--out", "data"]);
    assert!(again.contains("verified, unchanged"), "{again}");
    let second = w.json("data/run_manifest.json");
    assert_eq!(first["dataset_hash"], second["dataset_hash"]);
    assert_eq!(first["outputs"], second["outputs"]);
}

#[test]
fn gen_refuses_to_overwrite_a_different_dataset() {
    let w = Work::new(TINY);
    w.ok(&["gen", "--config", "cfg.toml", "--out", "data"]);
    let out = w.run(&["gen", "--config", "cfg.toml", "--out", "data", "--seed", "5"]);
    assert!(!out.status.success());
}

#[test]
fn bad_fraction_is_a_config_error_naming_the_field() {
    let w = Work::new("[split]\nlabel_fraction = 1.5\n");
    let out = w.run(&["gen", "--config", "cfg.toml", "--out", "data"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("split.label_fraction"));
    assert!(!w.path("data").exists());

    let w = Work::new(TINY);
    let out = w.run(&["train", "--config", "cfg.toml", "--out", "run", "--labels", "0"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_keys_and_bad_flags_exit_with_config_code() {
    let w = Work::new("[train]\nlearning_rate = 0.1\n");
    let out = w.run(&["train", "--config", "cfg.toml", "--out", "run"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    let out = w.run(&["train", "--out", "run", "--setting", "fancy"]);
    assert_eq!(out.status.code(), Some(3));
    let out = w.run(&["train", "--out", "run", "--target", "ZZ"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(w.run(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_eval_probe_visualize_produce_their_artifacts() {
    let w = Work::new(TINY);
    let cfg = ["--config", "cfg.toml"];
    w.ok(&[&["train", "--out", "run", "--setting", "vmfnet", "--labels", "0.25", "--target", "D"], &cfg[..]].concat());
    for f in ["checkpoint.vmfc", "loss_log.csv", "config.toml", "split.json", "run_manifest.json"] {
        assert!(w.path("run").join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(w.path("run/loss_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("iteration,term,value"));
    let manifest = w.json("run/run_manifest.json");
    assert_eq!(manifest["command"], "train");
    assert!(manifest["outputs"]["checkpoint.vmfc"].is_string());
    assert_eq!(manifest["checkpoint_hash"], manifest["outputs"]["checkpoint.vmfc"]);

    w.ok(&[&["eval", "run/checkpoint.vmfc", "--target", "D", "--out", "ev"], &cfg[..]].concat());
    let report = w.json("ev/report.json");
    assert_eq!(report["hd_unit"], "pixels");
    let classes = report["domains"][0]["classes"].as_array().unwrap();
    let names: Vec<_> = classes.iter().map(|c| c["class"].as_str().unwrap()).collect();
    assert_eq!(names, ["LV", "MYO", "RV"]);
    assert!(classes.iter().all(|c| c["dice"]["mean"].is_number()));
    assert!(w.path("ev/metrics.csv").exists() && w.path("ev/channels.csv").exists());

    w.ok(&[&["probe", "--ckpt", "run/checkpoint.vmfc", "--out", "pr"], &cfg[..]].concat());
    let probes = w.json("pr/probes.json");
    assert!(probes["translation_error"].is_number());

    w.ok(&[&["visualize", "--ckpt", "run/checkpoint.vmfc", "--out", "vis", "0", "2"], &cfg[..]].concat());
    let legend = w.json("vis/legend.json");
    assert_eq!(legend["panels"], serde_json::json!(["input", "ground truth", "prediction", "reconstruction"]));
    assert_eq!(legend["channel_tiles"], 4);
    for i in [0, 2] {
        image::open(w.path(&format!("vis/figure_3_{i}.png"))).unwrap();
    }
    let out = w.run(&[&["visualize", "--ckpt", "run/checkpoint.vmfc", "--out", "vis2", "500"], &cfg[..]].concat());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sample not found"));
}

#[test]
fn pseudo_checkpoint_holds_both_twins() {
    let w = Work::new(TINY);
    w.ok(&["train", "--config", "cfg.toml", "--out", "run", "--setting", "vmfpseudo"]);
    let state = load_checkpoint(&w.path("run/checkpoint.vmfc")).unwrap();
    assert_eq!(state.model.twins.len(), 2);
    assert_ne!(state.model.kernels(0), state.model.kernels(1));
}

#[test]
fn weak_figure_has_no_prediction_panels_and_twelve_tiles() {
    let cfg = TINY.replace("num_kernels = 4", "num_kernels = 12");
    let w = Work::new(&cfg);
    w.ok(&["train", "--config", "cfg.toml", "--out", "run", "--setting", "weak"]);
    w.ok(&["visualize", "--config", "cfg.toml", "--ckpt", "run/checkpoint.vmfc", "--out", "vis", "1"]);
    let legend = w.json("vis/legend.json");
    assert_eq!(legend["panels"], serde_json::json!(["input", "ground truth"]));
    assert_eq!(legend["channel_tiles"], 12);
    let img = image::open(w.path("vis/figure_3_1.png")).unwrap();
    // 32 px tiles at 2x, one panel row plus two rows of six channels
    assert_eq!(img.height(), 3 * 64 + 5 * 4);
    assert_eq!(img.width(), 6 * 64 + 7 * 4);
}

#[test]
fn non_finite_loss_exits_with_code_two() {
    let w = Work::new(TINY);
    w.ok(&["gen", "--config", "cfg.toml", "--out", "data"]);
    let mut data = load_dataset(&w.path("data")).unwrap();
    for s in data.samples.values_mut().flatten() {
        s.image[0] = f32::NAN;
    }
    save_dataset(&w.path("nan"), &data).unwrap();
    let cfg = format!("{TINY}\n").replace("[data]\n", "[data]\ndir = \"nan\"\n");
    std::fs::write(w.path("nan.toml"), cfg).unwrap();
    let out = w.run(&["train", "--config", "nan.toml", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("NaN"));
}

#[test]
fn commands_write_only_inside_out() {
    let w = Work::new(TINY);
    let cfg = ["--config", "cfg.toml"];
    let steps: [&[&str]; 5] = [
        &["gen", "--out", "o/gen"],
        &["train", "--out", "o/train", "--setting", "vmfweak"],
        &["eval", "o/train/checkpoint.vmfc", "--out", "o/eval"],
        &["probe", "--ckpt", "o/train/checkpoint.vmfc", "--out", "o/probe"],
        &["visualize", "--ckpt", "o/train/checkpoint.vmfc", "--out", "o/vis"],
    ];
    for step in steps {
        let out_dir = step[step.iter().position(|a| *a == "--out").unwrap() + 1];
        let before = tree(w.dir.path());
        w.ok(&[step, &cfg[..]].concat());
        let after = tree(w.dir.path());
        for p in after.difference(&before) {
            assert!(p.starts_with(out_dir) || Path::new(out_dir).starts_with(p), "{step:?} wrote {p:?}");
        }
        assert!(w.path(out_dir).join("run_manifest.json").exists());
    }
}

#[test]
fn reruns_from_the_manifest_are_bitwise_identical() {
    let w = Work::new(TINY);
    let cfg = ["--config", "cfg.toml"];
    for run in ["a", "b"] {
        w.ok(&[&["train", "--out", &format!("{run}/train"), "--seed", "4"], &cfg[..]].concat());
        w.ok(&[&["eval", &format!("{run}/train/checkpoint.vmfc"), "--out", &format!("{run}/eval")], &cfg[..]].concat());
    }
    for sub in ["train", "eval"] {
        let a = w.json(&format!("a/{sub}/run_manifest.json"));
        let b = w.json(&format!("b/{sub}/run_manifest.json"));
        assert_eq!(a["outputs"], b["outputs"], "{sub}");
        assert_eq!(a["config_hash"], b["config_hash"]);
        assert_eq!(a["dataset_hash"], b["dataset_hash"]);
    }
    let a = w.json("a/train/run_manifest.json");
    assert_eq!(a["seed"], 4);
}
