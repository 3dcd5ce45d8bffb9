use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::{
    detection_curve, evaluate_arms, report_params, DetectionAtK, EvalReport, ParamReport,
};
use super::probe::{probe_test_split, summarize, ProbeSummary};
use crate::adapter::{train_adapter, AdapterParams};
use crate::embeddings::{
    check_prototype_gate, fit_class_embeddings, write_log_csv, ClassArtifacts, PrototypeGateReport,
};
use crate::error::{Error, Result};
use crate::hinting::{Mode, Pipeline};
use crate::synth::{generate_dataset, read_json, write_json, Dataset};
use crate::vlm::{check_fixture_gate, train_fixture, FixtureGateReport, Tokenizer, VlmParams};

pub const DATA_DIR: &str = "data";
pub const VLM_CKPT: &str = "vlm.ckpt";
pub const VOCAB: &str = "vocab.json";
pub const CLASSES_CKPT: &str = "classes.ckpt";
pub const ADAPTER_CKPT: &str = "adapter.ckpt";
pub const REPORT: &str = "report.json";
pub const STAGES: &str = "stages.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    PretrainVlm,
    TrainEmbeddings,
    TrainAdapter,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::GenData,
        Stage::PretrainVlm,
        Stage::TrainEmbeddings,
        Stage::TrainAdapter,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::PretrainVlm => "pretrain-vlm",
            Stage::TrainEmbeddings => "train-embeddings",
            Stage::TrainAdapter => "train-adapter",
            Stage::Eval => "eval",
        }
    }

    /// Files or directories the stage writes, relative to the run directory.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::GenData => &[DATA_DIR],
            Stage::PretrainVlm => &[VLM_CKPT, VOCAB, "fixture_log.csv", "fixture_gate.json"],
            Stage::TrainEmbeddings => &[CLASSES_CKPT, "embedding_log.csv", "prototype_gate.json"],
            Stage::TrainAdapter => &[ADAPTER_CKPT, "adapter_log.csv"],
            Stage::Eval => &[REPORT],
        }
    }

    /// Earlier stages whose outputs this stage reads.
    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::GenData => &[],
            Stage::PretrainVlm => &[Stage::GenData],
            Stage::TrainEmbeddings => &[Stage::GenData, Stage::PretrainVlm],
            Stage::TrainAdapter => &[Stage::GenData, Stage::PretrainVlm, Stage::TrainEmbeddings],
            Stage::Eval => &[
                Stage::GenData,
                Stage::PretrainVlm,
                Stage::TrainEmbeddings,
                Stage::TrainAdapter,
            ],
        }
    }

    /// The configuration the stage depends on.
    fn config_slice(self, c: &ExperimentConfig) -> serde_json::Value {
        use serde_json::json;
        match self {
            Stage::GenData => {
                json!({"seed": c.seed, "dataset": c.dataset, "text_pool": c.text_pool})
            }
            Stage::PretrainVlm => {
                json!({"seed": c.seed, "fixture": c.fixture, "gates": c.enforce_gates})
            }
            Stage::TrainEmbeddings => json!({
                "seed": c.seed, "embeddings": c.embeddings, "dim": c.fixture.dim, "gates": c.enforce_gates
            }),
            Stage::TrainAdapter => json!({"seed": c.seed, "adapter": c.adapter}),
            Stage::Eval => json!({
                "inference": c.inference, "max_answer_len": c.fixture.max_answer_len, "gates": c.enforce_gates
            }),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// CRC32 of a file, or of every file under a directory in path order.
pub fn path_crc(path: &Path) -> Result<u32> {
    let mut hasher = crc32fast::Hasher::new();
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    for rel in files {
        let full = if rel.as_os_str().is_empty() {
            path.to_path_buf()
        } else {
            path.join(&rel)
        };
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update(&[0]);
        hasher.update(&std::fs::read(&full).map_err(|e| Error::io(&full, e))?);
    }
    Ok(hasher.finalize())
}

fn collect_files(root: &Path, path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_dir() {
        for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let entry = entry.map_err(|e| Error::io(path, e))?;
            collect_files(root, &entry.path(), out)?;
        }
    } else {
        out.push(path.strip_prefix(root).expect("under root").to_path_buf());
    }
    Ok(())
}

/// What a completed stage consumed and produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_hash: u32,
    pub outputs: BTreeMap<String, u32>,
}

pub type StageLedger = BTreeMap<Stage, StageRecord>;

pub fn read_stages(out: &Path) -> Result<StageLedger> {
    let path = out.join(STAGES);
    if path.exists() {
        read_json(&path)
    } else {
        Ok(StageLedger::new())
    }
}

fn input_hash(stage: Stage, config: &ExperimentConfig, out: &Path) -> Result<u32> {
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(stage.name().as_bytes());
    hasher.update(stage.config_slice(config).to_string().as_bytes());
    if stage == Stage::GenData {
        if let Some(pool) = &config.text_pool {
            hasher.update(&path_crc(pool)?.to_le_bytes());
        }
    }
    for up in stage.upstream() {
        for name in up.outputs() {
            hasher.update(&path_crc(&out.join(name))?.to_le_bytes());
        }
    }
    Ok(hasher.finalize())
}

/// True when the recorded inputs match and every output is intact.
fn is_current(stage: Stage, config: &ExperimentConfig, out: &Path, ledger: &StageLedger) -> bool {
    let Some(record) = ledger.get(&stage) else {
        return false;
    };
    let outputs_ok = stage.outputs().iter().all(|name| {
        let path = out.join(name);
        path.exists()
            && record
                .outputs
                .get(*name)
                .is_some_and(|&crc| path_crc(&path).ok() == Some(crc))
    });
    outputs_ok && input_hash(stage, config, out).ok() == Some(record.input_hash)
}

fn record_stage(stage: Stage, config: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut ledger = read_stages(out)?;
    let mut outputs = BTreeMap::new();
    for name in stage.outputs() {
        outputs.insert((*name).to_string(), path_crc(&out.join(name))?);
    }
    ledger.insert(
        stage,
        StageRecord {
            input_hash: input_hash(stage, config, out)?,
            outputs,
        },
    );
    write_json(&out.join(STAGES), &ledger)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn frozen_vlm_check(out: &Path, before: u32, when: &str) -> Result<()> {
    let after = path_crc(&out.join(VLM_CKPT))?;
    if after != before {
        return Err(Error::Frozen(format!(
            "{VLM_CKPT} changed from {before:08x} to {after:08x} during {when}"
        )));
    }
    Ok(())
}

/// Runs one stage from the artifacts already in `out` and records it.
pub fn run_stage(stage: Stage, config: &ExperimentConfig, out: &Path) -> Result<()> {
    config.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    log::info!("stage {}", stage.name());
    let seed = config.seed;
    match stage {
        Stage::GenData => {
            let dataset = generate_dataset(&config.dataset, &config.text_pool()?, seed)?;
            let dir = out.join(DATA_DIR);
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            dataset.save(&dir)?;
        }
        Stage::PretrainVlm => {
            let dataset = Dataset::load(&out.join(DATA_DIR))?;
            let fixture = train_fixture(&dataset, &config.fixture, seed)?;
            fixture.params.save(&out.join(VLM_CKPT))?;
            fixture.tokenizer.save(&out.join(VOCAB))?;
            let mut log = String::from("epoch,loss\n");
            for e in &fixture.log {
                let _ = writeln!(log, "{},{}", e.epoch, e.loss);
            }
            write_text(&out.join("fixture_log.csv"), &log)?;
            write_json(&out.join("fixture_gate.json"), &fixture.gate)?;
            if config.enforce_gates {
                check_fixture_gate(&fixture.gate)?;
            }
        }
        Stage::TrainEmbeddings => {
            let dataset = Dataset::load(&out.join(DATA_DIR))?;
            let before = path_crc(&out.join(VLM_CKPT))?;
            let trained =
                fit_class_embeddings(&dataset, &config.embeddings, config.fixture.dim, seed)?;
            trained.artifacts.save(&out.join(CLASSES_CKPT))?;
            write_log_csv(&out.join("embedding_log.csv"), &trained.log)?;
            write_json(&out.join("prototype_gate.json"), &trained.gate)?;
            frozen_vlm_check(out, before, "embedding training")?;
            if config.enforce_gates {
                check_prototype_gate(&trained.gate)?;
            }
        }
        Stage::TrainAdapter => {
            let dataset = Dataset::load(&out.join(DATA_DIR))?;
            let before = path_crc(&out.join(VLM_CKPT))?;
            let vlm = VlmParams::load(&out.join(VLM_CKPT))?;
            let tok = Tokenizer::load(&out.join(VOCAB))?;
            let classes = ClassArtifacts::load(&out.join(CLASSES_CKPT))?;
            let trained = train_adapter(
                &dataset,
                &classes,
                &vlm,
                vlm.checksum(),
                &tok,
                &config.adapter,
                seed,
            )?;
            trained
                .params
                .save(&out.join(ADAPTER_CKPT), trained.class_checksum)?;
            let mut log = String::from("epoch,L_rec,L_autoreg\n");
            for r in &trained.log {
                let _ = writeln!(log, "{},{},{}", r.epoch, r.l_rec, r.l_autoreg);
            }
            write_text(&out.join("adapter_log.csv"), &log)?;
            frozen_vlm_check(out, before, "adapter training")?;
        }
        Stage::Eval => {
            let artifacts = Artifacts::load(out, config)?;
            let report = artifacts.evaluate(config)?;
            if config.enforce_gates {
                report.params.check()?;
            }
            write_json(&out.join(REPORT), &report)?;
        }
    }
    record_stage(stage, config, out)
}

/// Which stages a pipeline run executed and which it reused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub executed: Vec<Stage>,
    pub reused: Vec<Stage>,
}

/// Runs every stage in order. A stage is reused when its recorded inputs
/// and outputs still match and no earlier stage was rerun.
pub fn run_pipeline(config: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    config.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut summary = RunSummary {
        executed: Vec::new(),
        reused: Vec::new(),
    };
    for stage in Stage::ALL {
        let ledger = read_stages(out)?;
        if summary.executed.is_empty() && is_current(stage, config, out, &ledger) {
            log::info!("stage {} is current, reusing", stage.name());
            summary.reused.push(stage);
        } else {
            run_stage(stage, config, out)?;
            summary.executed.push(stage);
        }
    }
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactChecksums {
    pub vlm: u32,
    pub classes: u32,
    pub adapter: u32,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub checksums: ArtifactChecksums,
    pub fixture_gate: FixtureGateReport,
    pub prototype_gate: PrototypeGateReport,
    pub params: ParamReport,
    /// The configured arm.
    pub headline: EvalReport,
    /// Every arm at the configured `k`, in [`Mode::ALL`] order.
    pub arms: Vec<EvalReport>,
    pub detection: Vec<DetectionAtK>,
    pub probes: ProbeSummary,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn arm(&self, mode: Mode) -> &EvalReport {
        self.arms
            .iter()
            .find(|r| r.mode == mode)
            .expect("every mode is evaluated")
    }
}

/// Every trained artifact of a run, loaded and pairing-checked.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dataset: Dataset,
    pub vlm: VlmParams,
    pub tokenizer: Tokenizer,
    pub classes: ClassArtifacts,
    pub adapter: AdapterParams,
    pub max_answer_len: usize,
    pub checksums: ArtifactChecksums,
}

impl Artifacts {
    pub fn load(out: &Path, config: &ExperimentConfig) -> Result<Self> {
        let dataset = Dataset::load(&out.join(DATA_DIR))?;
        let vlm = VlmParams::load(&out.join(VLM_CKPT))?;
        let tokenizer = Tokenizer::load(&out.join(VOCAB))?;
        let classes = ClassArtifacts::load(&out.join(CLASSES_CKPT))?;
        let class_checksum = classes.checksum();
        let adapter = AdapterParams::load(&out.join(ADAPTER_CKPT), class_checksum)?;
        let checksums = ArtifactChecksums {
            vlm: vlm.checksum(),
            classes: class_checksum,
            adapter: adapter.checksum(class_checksum),
        };
        Ok(Self {
            dataset,
            vlm,
            tokenizer,
            classes,
            adapter,
            max_answer_len: config.fixture.max_answer_len,
            checksums,
        })
    }

    pub fn pipeline(&self) -> Result<Pipeline<'_>> {
        Pipeline::new(
            &self.vlm,
            &self.tokenizer,
            &self.classes,
            &self.adapter,
            self.checksums.classes,
            &self.dataset.vision,
            self.max_answer_len,
        )
    }

    /// Evaluates every arm, the detection curve and the probes.
    pub fn evaluate(&self, config: &ExperimentConfig) -> Result<RunReport> {
        let pipe = self.pipeline()?;
        let k = config.inference.k;
        let arms_spec: Vec<(Mode, usize)> = Mode::ALL.iter().map(|&m| (m, k)).collect();
        let arms = evaluate_arms(&pipe, &self.dataset, &arms_spec, true)?;
        let headline = arms
            .iter()
            .find(|r| r.mode == config.inference.mode)
            .expect("every mode is evaluated")
            .clone();
        debug_assert_eq!(arms[0].mode, Mode::Baseline);
        let probes = summarize(&probe_test_split(&pipe, &self.dataset)?, &self.dataset);
        Ok(RunReport {
            seed: config.seed,
            checksums: self.checksums,
            fixture_gate: fixture_gate_from(&arms[0]),
            prototype_gate: crate::embeddings::prototype_gate(&self.dataset, &self.classes)?,
            params: report_params(&self.vlm, &self.classes, &self.adapter),
            headline,
            arms,
            detection: detection_curve(&pipe, &self.dataset)?,
            probes,
        })
    }
}

/// The fixture gate measures plain-prompt accuracy with unrefined tokens,
/// which is the baseline arm.
fn fixture_gate_from(baseline: &EvalReport) -> FixtureGateReport {
    FixtureGateReport {
        common_accuracy: baseline.common_accuracy,
        rare_accuracy: baseline.rare_accuracy,
        per_class: baseline.per_class.iter().map(|r| r.accuracy).collect(),
    }
}
