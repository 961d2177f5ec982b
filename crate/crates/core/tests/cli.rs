use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const MICRO: &str = r#"{"data":{"synthetic":{"image_size":64,"images":8,"object_size":[10,24]}},
 "model":{"image_size":[64,64],"backbone":{"stem":4,"widths":[4,4,8,8]},"neck":{"width":8},
  "rpn":{"pre_nms":200,"post_nms":20,"batch_per_image":32},"roi":{"hidden":16,"rois_per_image":16,"test_proposals":20},
  "base":{"epochs":1},"finetune":{"epochs":1}}}"#;

fn fsdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsdet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

struct Work {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Work {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        fs::write(root.join("c.json"), MICRO).unwrap();
        Self { _tmp: tmp, root }
    }

    fn p(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.p("c.json");
        let mut all: Vec<&str> = args.to_vec();
        all.extend(["--config", &cfg]);
        let o = fsdet(&all);
        if !o.status.success() {
            eprintln!("{}", String::from_utf8_lossy(&o.stderr));
        }
        o
    }
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let w = Work::new();
    for d in ["a", "b"] {
        assert_eq!(code(&w.run(&["gen-data", "--out", &w.p(d), "--seed", "4"])), 0);
    }
    let a = fs::read(w.root.join("a/annotations.json")).unwrap();
    let b = fs::read(w.root.join("b/annotations.json")).unwrap();
    assert_eq!(a, b);
    let m = manifest(&w.root.join("a"));
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["seed"], 4);
    assert_eq!(manifest(&w.root.join("a"))["artifacts"], manifest(&w.root.join("b"))["artifacts"]);
}

#[test]
fn two_phase_run_through_the_cli() {
    let w = Work::new();
    assert_eq!(code(&w.run(&["gen-data", "--out", &w.p("base"), "--base-only"])), 0);
    assert_eq!(code(&w.run(&["gen-data", "--out", &w.p("pool"), "--seed", "1", "--images", "40"])), 0);
    assert_eq!(code(&w.run(&["train-base", "--data", &w.p("base"), "--out", &w.p("rb")])), 0);
    for f in ["checkpoint.fsd", "manifest.json", "train_log.jsonl"] {
        assert!(w.root.join("rb").join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(w.root.join("rb/train_log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first.get("loss").is_some());

    let ck = w.root.join("rb/checkpoint.fsd").display().to_string();
    let ft = w.run(&[
        "finetune", "--checkpoint", &ck, "--data", &w.p("pool"), "--out", &w.p("rf"), "--shots", "1", "--split", "synthetic",
    ]);
    assert_eq!(code(&ft), 0);
    assert!(w.root.join("rf/kshot.json").is_file());

    let ftck = w.root.join("rf/checkpoint.fsd").display().to_string();
    let ev = w.run(&["eval", "--checkpoint", &ftck, "--data", &w.p("pool"), "--out", &w.p("ev")]);
    assert_eq!(code(&ev), 0);
    let report: Value = serde_json::from_slice(&ev.stdout).unwrap();
    let on_disk: Value = serde_json::from_str(&fs::read_to_string(w.root.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report, on_disk);

    // A fine-tuned checkpoint cannot be fine-tuned again.
    let again = w.run(&[
        "finetune", "--checkpoint", &ftck, "--data", &w.p("pool"), "--out", &w.p("rf2"), "--shots", "1", "--split", "synthetic",
    ]);
    assert_eq!(code(&again), 3);
}

#[test]
fn config_errors_exit_2() {
    let w = Work::new();
    assert_eq!(code(&w.run(&["gen-data", "--out", &w.p("x"), "--num-classes", "1"])), 2);
    assert_eq!(code(&w.run(&["gen-data", "--out", &w.p("x"), "--set", "model.neck.widht=3"])), 2);
    assert_eq!(code(&fsdet(&["gen-data"])), 2);
    assert_eq!(code(&fsdet(&["ablate", "--axis", "width"])), 2);
    assert_eq!(
        code(&w.run(&["train-base", "--data", &w.p("missing"), "--out", &w.p("r")])),
        2
    );
}

#[test]
fn unfrozen_backbone_is_rejected() {
    let w = Work::new();
    let o = w.run(&[
        "finetune", "--checkpoint", &w.p("none"), "--data", &w.p("none"), "--out", &w.p("r"), "--shots", "1", "--split",
        "synthetic", "--freeze-backbone", "false",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn locked_run_dir_exits_2() {
    let w = Work::new();
    fs::create_dir_all(w.root.join("d")).unwrap();
    fs::write(w.root.join("d/.fsdet.lock"), "").unwrap();
    assert_eq!(code(&w.run(&["gen-data", "--out", &w.p("d")])), 2);
}

#[test]
fn gradcheck_subset_passes() {
    let o = fsdet(&["gradcheck", "--op", "iou_loss", "--op", "cbam", "--json"]);
    assert_eq!(code(&o), 0);
    let rows: Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["passed"] == true));
    assert_eq!(code(&fsdet(&["gradcheck", "--op", "nope"])), 2);
}
