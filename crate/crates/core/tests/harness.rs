use std::path::Path;
use std::sync::OnceLock;

use rare_lens::harness::*;
use rare_lens::hinting::Mode;

struct Run {
    _dir: tempfile::TempDir,
    out: std::path::PathBuf,
    config: ExperimentConfig,
    first: RunSummary,
}

fn smoke_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let config = ExperimentConfig::smoke();
        let first = run_pipeline(&config, &out).unwrap();
        Run {
            _dir: dir,
            out,
            config,
            first,
        }
    })
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

#[test]
fn fresh_run_executes_every_stage_and_writes_outputs() {
    let run = smoke_run();
    assert_eq!(run.first.executed, Stage::ALL.to_vec());
    for stage in Stage::ALL {
        for name in stage.outputs() {
            assert!(run.out.join(name).exists(), "{name}");
        }
    }
    let ledger = read_stages(&run.out).unwrap();
    assert_eq!(ledger.len(), 5);
}

#[test]
fn report_is_internally_consistent() {
    let run = smoke_run();
    let report = RunReport::load(&run.out.join(REPORT)).unwrap();
    assert_eq!(report.arms.len(), Mode::ALL.len());
    for arm in &report.arms {
        arm.check_consistency().unwrap();
        assert_eq!(arm.trust_rate.is_some(), arm.mode.hinted());
        assert!(arm.rare_answer_nll.is_some());
    }
    assert_eq!(report.headline, *report.arm(run.config.inference.mode));
    for pair in report.detection.windows(2) {
        assert!(pair[0].accuracy <= pair[1].accuracy);
    }
    assert_eq!(report.detection.last().unwrap().accuracy, 1.0);
    assert_eq!(
        report.params.adapter,
        4 * run.config.fixture.dim * run.config.fixture.dim
    );
    let base = report.arm(Mode::Baseline);
    assert_eq!(report.fixture_gate.rare_accuracy, base.rare_accuracy);
}

#[test]
fn rerun_reuses_every_stage_and_resume_reruns_only_downstream() {
    let run = smoke_run();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("copy");
    copy_dir(&run.out, &out);
    let report = std::fs::read(out.join(REPORT)).unwrap();
    let again = run_pipeline(&run.config, &out).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(again.reused, Stage::ALL.to_vec());

    std::fs::remove_file(out.join(ADAPTER_CKPT)).unwrap();
    let resumed = run_pipeline(&run.config, &out).unwrap();
    assert_eq!(resumed.executed, vec![Stage::TrainAdapter, Stage::Eval]);
    assert_eq!(std::fs::read(out.join(REPORT)).unwrap(), report);
    assert_eq!(
        std::fs::read(out.join(ADAPTER_CKPT)).unwrap(),
        std::fs::read(run.out.join(ADAPTER_CKPT)).unwrap()
    );
}

#[test]
fn config_change_invalidates_downstream_stages() {
    let run = smoke_run();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("copy");
    copy_dir(&run.out, &out);
    let mut config = run.config.clone();
    config.adapter.epochs = 2;
    let summary = run_pipeline(&config, &out).unwrap();
    assert_eq!(
        summary.reused,
        vec![Stage::GenData, Stage::PretrainVlm, Stage::TrainEmbeddings]
    );
}

#[test]
fn corrupted_output_forces_a_rerun() {
    let run = smoke_run();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("copy");
    copy_dir(&run.out, &out);
    let path = out.join(CLASSES_CKPT);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[10] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    let summary = run_pipeline(&run.config, &out).unwrap();
    assert_eq!(summary.executed[0], Stage::TrainEmbeddings);
}

#[test]
fn tampered_class_table_breaks_adapter_pairing() {
    let run = smoke_run();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("copy");
    copy_dir(&run.out, &out);
    let mut config = run.config.clone();
    config.embeddings.joint_epochs += 1;
    run_stage(Stage::TrainEmbeddings, &config, &out).unwrap();
    let err = Artifacts::load(&out, &config).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
}

#[test]
fn probe_files_round_trip() {
    let run = smoke_run();
    let artifacts = Artifacts::load(&run.out, &run.config).unwrap();
    let pipe = artifacts.pipeline().unwrap();
    let ids = default_probe_scenes(&artifacts.dataset);
    assert!(!ids.is_empty());
    let dir = tempfile::tempdir().unwrap();
    for id in ids {
        let scene = artifacts.dataset.scene(&id).unwrap();
        let probe = probe_scene(&pipe, &artifacts.dataset, scene).unwrap();
        assert_eq!(probe.lens_baseline.len(), run.config.fixture.layers + 1);
        write_scene_probe(dir.path(), &probe).unwrap();
        for (arm, grid) in [
            ("baseline", &probe.lens_baseline),
            ("refined", &probe.lens_refined),
        ] {
            let csv = read_lens_csv(&dir.path().join(format!("{id}_lens_{arm}.csv"))).unwrap();
            assert_eq!(&csv, grid);
            let pgm = read_pgm(&dir.path().join(format!("{id}_lens_{arm}.pgm"))).unwrap();
            for (a, b) in csv.iter().flatten().zip(pgm.iter().flatten()) {
                assert!((a - b).abs() <= PGM_RESOLUTION);
            }
        }
    }
}

#[test]
fn sweep_covers_every_arm_and_k() {
    let run = smoke_run();
    let artifacts = Artifacts::load(&run.out, &run.config).unwrap();
    let pipe = artifacts.pipeline().unwrap();
    let ks = &run.config.inference.sweep_k;
    let rows = ablation_sweep(&pipe, &artifacts.dataset, &Mode::ALL, ks).unwrap();
    assert_eq!(rows.len(), Mode::ALL.len() * ks.len());
    for mode in Mode::ALL {
        let det: Vec<f64> = rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.detection_accuracy)
            .collect();
        assert!(det.windows(2).all(|w| w[0] <= w[1]), "{mode:?} {det:?}");
    }
    let dir = tempfile::tempdir().unwrap();
    write_sweep(dir.path(), &rows, run.config.inference.k).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), rows.len() + 1);
    let svg = std::fs::read_to_string(dir.path().join("sweep_k.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn parameter_counts_match_checkpoint_sizes() {
    let run = smoke_run();
    let artifacts = Artifacts::load(&run.out, &run.config).unwrap();
    let vlm_bytes = std::fs::read(run.out.join(VLM_CKPT)).unwrap();
    // Header: magic, version, four u32 fields. Each blob: name, rank, dims, f32 values. Trailer CRC.
    let blob_overhead: usize = artifacts
        .vlm
        .named()
        .iter()
        .map(|(name, t)| 4 + name.len() + 4 + 4 * t.shape().len())
        .sum();
    assert_eq!(
        vlm_bytes.len(),
        6 + 16 + blob_overhead + 4 * artifacts.vlm.num_params() + 4
    );
    let adapter_bytes = std::fs::read(run.out.join(ADAPTER_CKPT)).unwrap();
    let adapter_overhead: usize = ["wq", "wk", "wv", "wo"]
        .iter()
        .map(|n| 4 + n.len() + 4 + 8)
        .sum();
    assert_eq!(
        adapter_bytes.len(),
        6 + 8 + adapter_overhead + 4 * artifacts.adapter.num_params() + 4 + 4
    );
    let params = report_params(&artifacts.vlm, &artifacts.classes, &artifacts.adapter);
    assert_eq!(
        params.added,
        params.adapter + params.projection_heads + params.class_table
    );
}
