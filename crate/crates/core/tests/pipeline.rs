// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use headprobe::demo;
use headprobe::pipeline::{parse_only, run, Analysis, CellStatus, RunConfig, RunOptions};
use headprobe::ProbeError;

fn workspace(seed: u64) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo::write_workspace(dir.path(), seed).unwrap();
    (dir, cfg)
}

fn config(path: &Path, out: &str, workers: usize) -> RunConfig {
    let mut cfg = RunConfig::load(path).unwrap();
    cfg.output_dir = path.parent().unwrap().join(out);
    cfg.workers = workers;
    cfg
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const TABLES: [&str; 7] = [
    "layer_scores.csv",
    "head_scores.csv",
    "tests.csv",
    "regressions.csv",
    "composite.csv",
    "ablation_outcomes.csv",
    "modnoun.csv",
];

#[test]
fn full_demo_run_completes_and_resumes() {
    let (_dir, path) = workspace(7);
    let cfg = config(&path, "out", 2);
    let first = run(&cfg, &RunOptions::default()).unwrap();
    let bad: Vec<_> = first
        .manifest
        .cells
        .iter()
        .filter(|c| c.status != CellStatus::Done)
        .collect();
    assert!(bad.is_empty(), "{bad:#?}");
    assert_eq!(first.exit_code(), 0);
    assert_eq!(first.reused, 0);

    let out = &cfg.output_dir;
    let steps = demo::DEMO_STEPS.len();
    let layer_rows = read(out, "layer_scores.csv").lines().count() - 1;
    assert_eq!(layer_rows, steps * 5, "steps x hidden layers (embedding + 4 blocks)");
    // noun + positional + pos_noun + pos_verb, 16 heads each
    assert_eq!(read(out, "head_scores.csv").lines().count() - 1, steps * 4 * 16);
    assert_eq!(read(out, "tests.csv").lines().count() - 1, steps * 16);
    assert_eq!(read(out, "composite.csv").lines().count() - 1, 16);
    // 2 kinds x 6 head groups x 5 layers per step
    assert_eq!(
        read(out, "ablation_outcomes.csv").lines().count() - 1,
        steps * 2 * 6 * 5
    );
    assert_eq!(read(out, "modnoun.csv").lines().count() - 1, steps * 24);
    let regs = read(out, "regressions.csv");
    assert_eq!(regs.lines().filter(|l| l.contains(",trajectory,")).count(), 16);
    assert_eq!(regs.lines().filter(|l| l.contains(",modnoun_coupling,")).count(), 2);
    assert_eq!(first.manifest.tracked_layers.len(), 1);

    // every table row belongs to a completed manifest cell
    for t in &first.manifest.tables {
        let rows = read(out, &t.file).lines().count() - 1;
        assert_eq!(rows, t.rows, "{}", t.file);
    }

    let before: Vec<String> = TABLES.iter().map(|t| read(out, t)).collect();
    let manifest_before = read(out, "manifest.json");
    let second = run(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(second.computed, 0);
    assert_eq!(second.reused, first.computed);
    assert_eq!(read(out, "manifest.json"), manifest_before);
    let after: Vec<String> = TABLES.iter().map(|t| read(out, t)).collect();
    assert_eq!(before, after);

    let forced = run(
        &cfg,
        &RunOptions {
            resume: false,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(forced.reused, 0);
    let again: Vec<String> = TABLES.iter().map(|t| read(out, t)).collect();
    assert_eq!(before, again);
}

#[test]
fn tables_do_not_depend_on_worker_count() {
    let (_dir, path) = workspace(11);
    let mut cfg = config(&path, "one", 1);
    cfg.analyses = vec![
        Analysis::Phase1,
        Analysis::StressOneBack,
        Analysis::StressPos,
        Analysis::Modnoun,
    ];
    run(&cfg, &RunOptions::default()).unwrap();
    let mut cfg3 = cfg.clone();
    cfg3.output_dir = path.parent().unwrap().join("three");
    cfg3.workers = 3;
    run(&cfg3, &RunOptions::default()).unwrap();
    for t in [
        "layer_scores.csv",
        "head_scores.csv",
        "tests.csv",
        "regressions.csv",
        "modnoun.csv",
    ] {
        assert_eq!(read(&cfg.output_dir, t), read(&cfg3.output_dir, t), "{t}");
    }
}

#[test]
fn composite_without_stress_is_a_config_error() {
    let (_dir, path) = workspace(1);
    let mut cfg = config(&path, "out", 1);
    cfg.analyses = vec![Analysis::Phase1, Analysis::Composite];
    match cfg.validate().unwrap_err() {
        ProbeError::Config(m) => {
            assert!(
                m.contains("stress_1back") && m.contains("stress_positional") && m.contains("stress_pos"),
                "{m}"
            )
        }
        e => panic!("{e}"),
    }
    cfg.analyses.clear();
    assert!(matches!(cfg.validate(), Err(ProbeError::Config(_))));
}

#[test]
fn missing_dataset_file_is_a_config_error() {
    let (dir, path) = workspace(1);
    std::fs::remove_file(dir.path().join("data/pos.csv")).unwrap();
    match RunConfig::load(&path).unwrap_err() {
        ProbeError::Config(m) => assert!(m.contains("datasets.pos"), "{m}"),
        e => panic!("{e}"),
    }
}

#[test]
fn config_accepts_named_schedule_and_worker_count_alias() {
    let cfg = RunConfig::from_toml(
        r#"
output_dir = "o"
worker_count = 3
schedule = "paper20"
analyses = ["phase1"]
[[models]]
label = "pythia-14m"
repo_id = "EleutherAI/pythia-14m"
[datasets]
rawc = "rawc.csv"
"#,
    )
    .unwrap();
    assert_eq!(cfg.workers, 3);
    assert_eq!(cfg.models[0].id(), "pythia-14m");
    assert!(RunConfig::from_toml("output_dir = 'o'\nschedule = []\nanalyses = ['phase9']\nmodels = []").is_err());
}

#[test]
fn only_filter_and_partial_failure() {
    let (dir, path) = workspace(3);
    let mut cfg = config(&path, "out", 2);
    cfg.analyses = vec![Analysis::Phase1, Analysis::Modnoun];

    let only = RunOptions {
        only: vec![parse_only("demo/seed3:step8000").unwrap()],
        ..Default::default()
    };
    let s = run(&cfg, &only).unwrap();
    let step_cells: Vec<_> = s.manifest.cells.iter().filter(|c| c.step.is_some()).collect();
    assert_eq!(step_cells.len(), 2);
    assert!(step_cells.iter().all(|c| c.step == Some(8000)));

    // a broken checkpoint fails its own cells and nothing else
    std::fs::remove_file(dir.path().join("models/demo/step64/model.safetensors")).unwrap();
    let s = run(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(s.exit_code(), 1);
    assert_eq!(s.reused, 2);
    let failed: Vec<_> = s
        .manifest
        .cells
        .iter()
        .filter(|c| c.status == CellStatus::Failed)
        .collect();
    assert_eq!(failed.len(), 2);
    assert!(failed.iter().all(|c| c.step == Some(64) && c.error.is_some()));
    let layer_rows = read(&cfg.output_dir, "layer_scores.csv").lines().count() - 1;
    assert_eq!(layer_rows, (demo::DEMO_STEPS.len() - 1) * 5);
    assert!(parse_only(":5").is_err());
    assert_eq!(parse_only("m").unwrap(), ("m".to_string(), None));
}

#[test]
fn changed_inputs_invalidate_cells() {
    let (dir, path) = workspace(5);
    let mut cfg = config(&path, "out", 1);
    cfg.analyses = vec![Analysis::Modnoun];
    let first = run(&cfg, &RunOptions::default()).unwrap();
    let csv = dir.path().join("data/modnoun.csv");
    let mut text = std::fs::read_to_string(&csv).unwrap();
    text = text.replacen("mn-0", "mn-zero", 1);
    std::fs::write(&csv, text).unwrap();
    let second = run(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(second.reused, 0);
    assert_eq!(second.computed, first.computed);
    assert!(read(&cfg.output_dir, "modnoun.csv").contains("mn-zero"));
}
