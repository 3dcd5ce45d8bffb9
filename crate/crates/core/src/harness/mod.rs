//! Experiment orchestration: configuration, staged and resumable runs,
//! evaluation reports, ablation sweeps and probe files.

mod config;
mod eval;
mod probe;
mod run;
mod sweep;

pub use config::{ExperimentConfig, InferenceParams, ProbeParams};
pub use eval::{
    detection_curve, evaluate_arms, report_params, ClassAccuracy, DetectionAtK, EvalReport,
    ParamReport, MAX_ADDED_RATIO,
};
pub use probe::{
    default_probe_scenes, median, probe_scene, probe_test_split, read_lens_csv, read_pgm,
    summarize, write_pgm, write_scene_probe, ProbeSummary, SceneProbe, PGM_RESOLUTION,
};
pub use run::{
    path_crc, read_stages, run_pipeline, run_stage, ArtifactChecksums, Artifacts, RunReport,
    RunSummary, Stage, StageLedger, StageRecord, ADAPTER_CKPT, CLASSES_CKPT, DATA_DIR, REPORT,
    STAGES, VLM_CKPT, VOCAB,
};
pub use sweep::{ablation_sweep, arms_bar_svg, sweep_csv, sweep_line_svg, write_sweep, SweepRow};
