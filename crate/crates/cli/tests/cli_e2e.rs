use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use histo_cli::config::RUN_DIR_ENV;
use histo_cli::plots::FIGURES;
use histo_core::evaluation::{EvalReport, Protocol};
use histo_core::interpretability::{parse_xai_records, summarize_xai, xai_summary_tsv};
use histo_core::training::Checkpoint;

const SMALL: &str = "\
[dataset]
synthetic_per_cell = 3
seed = 9
[train]
epochs = 2
k_folds = 2
[eval]
passes = 3
xai_per_cell = 1
xai_confidence = 0.0
occlusion_stride = 96
[output]
run_dir = \"run\"
";

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("histo.toml"), config).unwrap();
        Self { dir }
    }

    fn histo(&self, args: &[&str]) -> Output {
        let out = Command::new(env!("CARGO_BIN_EXE_histo"))
            .current_dir(self.dir.path())
            .env_remove(RUN_DIR_ENV)
            .env("RUST_LOG", "warn")
            .args(["-c", "histo.toml"])
            .args(args)
            .output()
            .unwrap();
        out
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.histo(args);
        assert!(
            out.status.success(),
            "histo {args:?} failed: {}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    }

    fn run(&self) -> PathBuf {
        self.dir.path().join("run")
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn full_pipeline_produces_every_artifact() {
    let sb = Sandbox::new(SMALL);
    for cmd in ["prepare", "train", "eval", "explain", "plot"] {
        sb.ok(&[cmd]);
    }
    let run = sb.run();
    for d in ["manifests", "checkpoints", "reports", "figures", "logs"] {
        assert!(run.join(d).is_dir(), "{d}");
    }
    for f in FIGURES {
        let p = run.join("figures").join(f);
        let img = image::open(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert!(img.width() > 100 && img.height() > 100);
    }

    let report: EvalReport = serde_json::from_str(&read(&run.join("reports/type3.json"))).unwrap();
    assert_eq!(report.protocol, Protocol::Type3);
    assert_eq!(report.confusion.len(), 8);
    assert_eq!(report.n_samples, report.per_class.iter().map(|c| c.support).sum::<usize>());
    assert!((0.0..=1.0).contains(&report.accuracy));
    let value: serde_json::Value = serde_json::from_str(&read(&run.join("reports/type3.json"))).unwrap();
    for key in [
        "accuracy",
        "weighted_precision",
        "weighted_recall",
        "weighted_f1",
        "confusion",
        "avg_uncertainty",
        "avg_confidence",
        "correct_confidence",
        "wrong_confidence",
        "n_flagged",
        "config_digest",
        "checkpoint_digest",
        "per_sample",
    ] {
        assert!(value.get(key).is_some(), "report lacks {key}");
    }

    // Summary statistics recomputed from the per-sample records match the table.
    let records = parse_xai_records(&read(&run.join("reports/xai_records.tsv"))).unwrap();
    assert!(!records.is_empty());
    let cells = summarize_xai(&records, &(0..8).collect::<Vec<_>>(), &[40, 100, 200, 400]);
    assert_eq!(xai_summary_tsv(&cells), read(&run.join("reports/xai_summary.tsv")));
    assert_eq!(std::fs::read_dir(run.join("figures/heatmaps")).unwrap().count(), records.len());

    // Evaluation and plotting are repeatable byte for byte.
    let before = std::fs::read(run.join("reports/type3.json")).unwrap();
    let figs: Vec<Vec<u8>> = FIGURES.iter().map(|f| std::fs::read(run.join("figures").join(f)).unwrap()).collect();
    sb.ok(&["eval"]);
    sb.ok(&["plot"]);
    assert_eq!(std::fs::read(run.join("reports/type3.json")).unwrap(), before);
    for (f, old) in FIGURES.iter().zip(&figs) {
        assert_eq!(&std::fs::read(run.join("figures").join(f)).unwrap(), old, "{f}");
    }
}

#[test]
fn resume_continues_from_the_recorded_epoch() {
    let sb = Sandbox::new(SMALL);
    sb.ok(&["prepare"]);
    sb.ok(&["train"]);
    let log = sb.run().join("logs/type3_train.jsonl");
    assert_eq!(read(&log).lines().count(), 4);

    sb.ok(&["--set", "train.epochs=3", "train", "--resume"]);
    let lines: Vec<serde_json::Value> = read(&log).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let epochs: Vec<(u64, u64)> = lines
        .iter()
        .map(|v| (v["fold"].as_u64().unwrap(), v["epoch"].as_u64().unwrap()))
        .collect();
    assert_eq!(epochs, vec![(0, 0), (0, 1), (1, 0), (1, 1), (0, 2), (1, 2)]);
    let resumed = std::fs::read(sb.run().join("checkpoints/type3.json")).unwrap();

    // Every fold is finished, so another resume trains nothing.
    sb.ok(&["--set", "train.epochs=3", "train", "--resume"]);
    assert_eq!(read(&log).lines().count(), 6);
    let a: Checkpoint = serde_json::from_slice(&resumed).unwrap();
    let b: Checkpoint = serde_json::from_str(&read(&sb.run().join("checkpoints/type3.json"))).unwrap();
    assert_eq!(a.members, b.members);
    assert_eq!(a.weights, b.weights);
}

#[test]
fn attention_ablation_is_recorded_in_the_checkpoint() {
    let sb = Sandbox::new(SMALL);
    sb.ok(&["prepare"]);
    sb.ok(&["--set", "train.ablation=A3", "train"]);
    let ck: Checkpoint = serde_json::from_str(&read(&sb.run().join("checkpoints/type3.json"))).unwrap();
    assert!(!ck.attention_enabled);
    assert_eq!(ck.ablation.name(), "A3");
}

#[test]
fn cross_magnification_protocol_writes_three_reports() {
    let sb = Sandbox::new(&SMALL.replace("[eval]\n", "[eval]\nprotocol = \"type2\"\n"));
    sb.ok(&["prepare"]);
    sb.ok(&["train"]);
    sb.ok(&["eval"]);
    let names: Vec<String> = serde_json::from_str(&read(&sb.run().join("reports/runs.json"))).unwrap();
    assert_eq!(names, vec!["type2_100x_to_40x", "type2_100x_to_200x", "type2_100x_to_400x"]);
    for n in &names {
        let r: EvalReport = serde_json::from_str(&read(&sb.run().join(format!("reports/{n}.json")))).unwrap();
        assert_eq!(r.train_mag, vec![100]);
        assert_eq!(r.test_mag.len(), 1);
    }
    let out = sb.histo(&["--set", "eval.test_mags=[100]", "eval"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn impossible_confidence_gives_an_empty_cohort() {
    let sb = Sandbox::new(&SMALL.replace("xai_confidence = 0.0", "xai_confidence = 1.0"));
    for cmd in ["prepare", "train", "eval"] {
        sb.ok(&[cmd]);
    }
    let out = sb.histo(&["explain"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let summary = read(&sb.run().join("reports/xai_summary.tsv"));
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 32);
    assert!(rows.iter().all(|r| r.ends_with("\t0\t\t")), "{summary}");
}

#[test]
fn user_errors_exit_with_one() {
    let sb = Sandbox::new(SMALL);
    let missing = sb.histo(&["--set", "dataset.root=\"/definitely/not/here\"", "prepare"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/definitely/not/here"));

    let unknown = sb.histo(&["--set", "train.epochz=3", "prepare"]);
    assert_eq!(unknown.status.code(), Some(1));

    // Training before preparing has no split to read.
    assert_eq!(sb.histo(&["train"]).status.code(), Some(1));

    std::fs::create_dir_all(sb.run()).unwrap();
    std::fs::write(sb.run().join(".lock"), "").unwrap();
    let locked = sb.histo(&["prepare"]);
    assert_eq!(locked.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&locked.stderr).contains("locked"));
}

#[test]
fn run_directory_follows_the_environment_override() {
    let sb = Sandbox::new(SMALL);
    let elsewhere = sb.dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_histo"))
        .current_dir(sb.dir.path())
        .env(RUN_DIR_ENV, &elsewhere)
        .args(["-c", "histo.toml", "prepare"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(elsewhere.join("manifests/split.tsv").is_file());
    assert!(!sb.run().exists());
}

#[test]
fn show_config_round_trips() {
    let sb = Sandbox::new(SMALL);
    let text = sb.ok(&["--set", "train.epochs=7", "show-config"]);
    let cfg = histo_cli::ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.train.epochs, 7);
    assert_eq!(cfg.dataset.synthetic_per_cell, 3);
}
