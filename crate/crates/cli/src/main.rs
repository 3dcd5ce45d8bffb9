use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rare_lens::harness::{
    ablation_sweep, default_probe_scenes, probe_scene, run_pipeline, run_stage, write_scene_probe,
    write_sweep, Artifacts, ExperimentConfig, RunReport, Stage, REPORT,
};
use rare_lens::hinting::{Detection, Mode};
use rare_lens::{Error, Result};

#[derive(Parser)]
#[command(
    name = "rare-lens",
    version,
    about = "Rare-object token refinement and detection hints for a frozen toy VLM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory holding every artifact.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark.
    GenData(Common),
    /// Pretrain the frozen reference VLM and check its gate.
    PretrainVlm(Common),
    /// Train projection heads and class prototypes.
    TrainEmbeddings(Common),
    /// Train the token-refinement adapter against the frozen VLM.
    TrainAdapter(Common),
    /// Evaluate every inference arm and write report.json.
    Eval(Common),
    /// Run every stage in order, reusing stages that are already current.
    Run(Common),
    /// Detect classes and answer test scenes, one JSON line per scene.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Scene ids; every test scene when omitted.
        #[arg(long = "scene")]
        scenes: Vec<String>,
        /// Overrides the configured hint count.
        #[arg(long)]
        k: Option<usize>,
        /// Overrides the configured inference arm.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Write attention and logit-lens probes for selected scenes.
    Probe(Common),
    /// Evaluate every arm for every configured k and write plots.
    Sweep(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct DetectLine<'a> {
    scene_id: &'a str,
    true_class: &'a str,
    mode: Mode,
    k: usize,
    detections: &'a [Detection],
    hints: &'a [String],
    answer: &'a str,
    answered_class: Option<&'a str>,
    correct: bool,
}

fn print_summary(out: &Path) -> Result<()> {
    let report = RunReport::load(&out.join(REPORT))?;
    for arm in &report.arms {
        println!(
            "{:<18} k={} accuracy {:.3} rare {:.3} common {:.3}",
            arm.mode.name(),
            arm.k,
            arm.accuracy,
            arm.rare_accuracy,
            arm.common_accuracy
        );
    }
    println!(
        "logit-lens median rank {} -> {}, attention {:.4} -> {:.4}, added parameters {:.1}%",
        report.probes.median_rank_baseline,
        report.probes.median_rank_refined,
        report.probes.mean_attention_baseline,
        report.probes.mean_attention_refined,
        100.0 * report.params.ratio
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let stage = |common: &Common, stage: Stage| -> Result<()> {
        run_stage(stage, &load_config(common)?, &common.out)
    };
    match cli.command {
        Command::GenData(c) => stage(&c, Stage::GenData),
        Command::PretrainVlm(c) => stage(&c, Stage::PretrainVlm),
        Command::TrainEmbeddings(c) => stage(&c, Stage::TrainEmbeddings),
        Command::TrainAdapter(c) => stage(&c, Stage::TrainAdapter),
        Command::Eval(c) => {
            stage(&c, Stage::Eval)?;
            print_summary(&c.out)
        }
        Command::Run(c) => {
            let summary = run_pipeline(&load_config(&c)?, &c.out)?;
            let names = |v: &[Stage]| v.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ");
            log::info!(
                "executed [{}], reused [{}]",
                names(&summary.executed),
                names(&summary.reused)
            );
            print_summary(&c.out)
        }
        Command::Detect {
            common,
            scenes,
            k,
            mode,
        } => {
            let config = load_config(&common)?;
            let artifacts = Artifacts::load(&common.out, &config)?;
            let pipe = artifacts.pipeline()?;
            let k = k.unwrap_or(config.inference.k);
            if k == 0 {
                return Err(Error::Config("k must be at least 1".into()));
            }
            let mode = mode.unwrap_or(config.inference.mode);
            let selected: Vec<_> = if scenes.is_empty() {
                artifacts.dataset.test.iter().collect()
            } else {
                scenes
                    .iter()
                    .map(|id| {
                        artifacts
                            .dataset
                            .scene(id)
                            .ok_or_else(|| Error::Config(format!("unknown scene {id:?}")))
                    })
                    .collect::<Result<_>>()?
            };
            let names = artifacts.dataset.class_names();
            for scene in selected {
                let answer = pipe.detect_and_answer(scene, k, mode)?;
                let line = DetectLine {
                    scene_id: scene.id(),
                    true_class: &names[scene.class()],
                    mode,
                    k,
                    detections: &answer.detection.detections,
                    hints: &answer.hints,
                    answer: &answer.text,
                    answered_class: answer.class_id.map(|c| names[c].as_str()),
                    correct: answer.class_id == Some(scene.class()),
                };
                println!("{}", serde_json::to_string(&line).expect("serializable"));
            }
            Ok(())
        }
        Command::Probe(c) => {
            let config = load_config(&c)?;
            let artifacts = Artifacts::load(&c.out, &config)?;
            let pipe = artifacts.pipeline()?;
            let ids = if config.probe.scenes.is_empty() {
                default_probe_scenes(&artifacts.dataset)
            } else {
                config.probe.scenes.clone()
            };
            let dir = c.out.join("probe");
            for id in ids {
                let scene = artifacts
                    .dataset
                    .scene(&id)
                    .ok_or_else(|| Error::Config(format!("unknown probe scene {id:?}")))?;
                for path in
                    write_scene_probe(&dir, &probe_scene(&pipe, &artifacts.dataset, scene)?)?
                {
                    println!("{}", path.display());
                }
            }
            Ok(())
        }
        Command::Sweep(c) => {
            let config = load_config(&c)?;
            let artifacts = Artifacts::load(&c.out, &config)?;
            let pipe = artifacts.pipeline()?;
            let rows = ablation_sweep(
                &pipe,
                &artifacts.dataset,
                &Mode::ALL,
                &config.inference.sweep_k,
            )?;
            write_sweep(&c.out, &rows, config.inference.k)?;
            for r in &rows {
                println!(
                    "{:<18} k={} accuracy {:.3} rare {:.3} detection {:.3}",
                    r.mode.name(),
                    r.k,
                    r.accuracy,
                    r.rare_accuracy,
                    r.detection_accuracy
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
