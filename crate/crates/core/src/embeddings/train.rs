use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::heads::{Mlp, ProjectionHeads};
use super::losses::{align_loss_tape, class_loss_tape};
use super::table::{class_means, init_class_embeddings, ClassArtifacts, ClassEmbeddingTable};
use crate::error::{Error, Result};
use crate::numerics::{cosine, AdamW, Tape, Tensor};
use crate::rng;
use crate::synth::{adaptive_resample, Dataset};

/// Minimum nearest-prototype accuracy on held-out crops.
pub const GATE_ACCURACY_MIN: f64 = 0.95;
/// Minimum held-out recall of every rare class.
pub const GATE_RARE_RECALL_MIN: f64 = 0.90;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingParams {
    /// Alignment-only epochs before joint training.
    pub align_epochs: usize,
    /// Joint alignment and prototype epochs, each ending in an EMA update.
    pub joint_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub kappa: f64,
    /// Weight of the prototype loss in the joint phase.
    pub lambda: f64,
    /// Temperature of both losses.
    pub tau: f64,
    /// Also apply gradient steps to the prototypes, on top of the EMA rule.
    pub learn_prototypes: bool,
}

impl Default for EmbeddingParams {
    fn default() -> Self {
        Self {
            align_epochs: 5,
            joint_epochs: 15,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 128,
            kappa: 0.95,
            lambda: 1.0,
            tau: 1.0,
            learn_prototypes: false,
        }
    }
}

impl EmbeddingParams {
    pub fn validate(&self) -> Result<()> {
        if self.align_epochs + self.joint_epochs == 0 || self.joint_epochs == 0 {
            return Err(Error::Config(
                "embedding training needs at least one joint epoch".into(),
            ));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.tau > 0.0) || self.lambda < 0.0 {
            return Err(Error::Config(
                "embedding batch size, lr and tau must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::Config(format!(
                "kappa {} outside [0, 1]",
                self.kappa
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Align,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingLogRow {
    pub epoch: usize,
    pub phase: Phase,
    pub l_align: f64,
    pub l_class: Option<f64>,
    pub proto_acc: Option<f64>,
}

/// Nearest-prototype results on held-out crops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeGateReport {
    pub accuracy: f64,
    pub per_class_recall: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub rare: Vec<bool>,
}

impl PrototypeGateReport {
    pub fn passed(&self) -> bool {
        self.accuracy >= GATE_ACCURACY_MIN
            && self
                .per_class_recall
                .iter()
                .zip(&self.rare)
                .all(|(&r, &rare)| !rare || r >= GATE_RARE_RECALL_MIN)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedEmbeddings {
    pub artifacts: ClassArtifacts,
    pub log: Vec<EmbeddingLogRow>,
    pub gate: PrototypeGateReport,
}

/// Pooled object features and labels of a split.
pub fn crop_features(dataset: &Dataset, test: bool) -> Result<(Tensor, Vec<usize>)> {
    let scenes = if test { &dataset.test } else { &dataset.train };
    let rows = scenes
        .iter()
        .map(|s| dataset.object_feature(s))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Tensor::from_rows(&rows)?,
        scenes.iter().map(|s| s.class()).collect(),
    ))
}

/// Encoded re-sampled class descriptions and their labels.
pub fn text_features(dataset: &Dataset, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    let draws = adaptive_resample(
        &dataset.pool,
        &dataset.manifest.counts,
        dataset.manifest.params.text_budget,
        seed,
    )?;
    let rows = draws
        .iter()
        .map(|(_, phrase)| dataset.text.encode(phrase))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Tensor::from_rows(&rows)?,
        draws.iter().map(|(c, _)| *c).collect(),
    ))
}

fn select_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| x.row(i).to_vec()).collect();
    Tensor::from_rows(&rows)
}

/// Class of the most cosine-similar prototype; lowest id on ties.
pub fn nearest_prototype(table: &ClassEmbeddingTable, h: &[f64]) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..table.num_classes() {
        let s = cosine(h, table.w.row(c))?;
        if s > best.1 {
            best = (c, s);
        }
    }
    Ok(best.0)
}

/// Nearest-prototype classification of held-out crops.
pub fn prototype_gate(
    dataset: &Dataset,
    artifacts: &ClassArtifacts,
) -> Result<PrototypeGateReport> {
    let (z, labels) = crop_features(dataset, true)?;
    let h = artifacts.heads.vis.forward(&z)?;
    let c = artifacts.table.num_classes();
    let mut confusion = vec![vec![0usize; c]; c];
    for (i, &y) in labels.iter().enumerate() {
        confusion[y][nearest_prototype(&artifacts.table, h.row(i))?] += 1;
    }
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    let per_class_recall = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[k] as f64 / n as f64
            }
        })
        .collect();
    Ok(PrototypeGateReport {
        accuracy: correct as f64 / labels.len().max(1) as f64,
        per_class_recall,
        confusion,
        rare: (0..c).map(|k| dataset.manifest.is_rare(k)).collect(),
    })
}

struct Losses {
    align: f64,
    class: Option<f64>,
}

/// Full-data losses with the current heads and table.
fn evaluate(
    heads: &ProjectionHeads,
    table: Option<&ClassEmbeddingTable>,
    (zv, yv): (&Tensor, &[usize]),
    (zt, yt): (&Tensor, &[usize]),
    tau: f64,
) -> Result<Losses> {
    let mut tape = Tape::new();
    let hv = tape.constant(heads.vis.forward(zv)?);
    let ht = tape.constant(heads.text.forward(zt)?);
    let a = align_loss_tape(&mut tape, hv, yv, ht, yt, tau)?;
    let class = match table {
        Some(t) => {
            let w = tape.constant(t.w.clone());
            let l = class_loss_tape(&mut tape, hv, yv, ht, yt, w, tau)?;
            Some(tape.value(l).item())
        }
        None => None,
    };
    Ok(Losses {
        align: tape.value(a).item(),
        class,
    })
}

/// Alignment phase, then joint phase with one EMA update per epoch, in a
/// shared space of width `dim` (the VLM width). Weights are rounded to `f32`
/// at the end so the checkpoint round-trips exactly.
pub fn fit_class_embeddings(
    dataset: &Dataset,
    params: &EmbeddingParams,
    dim: usize,
    seed: u64,
) -> Result<TrainedEmbeddings> {
    params.validate()?;
    let names = dataset.class_names();
    let c = names.len();
    let (zv, yv) = crop_features(dataset, false)?;
    let (zt, yt) = text_features(dataset, seed)?;
    let dp = &dataset.manifest.params;
    let mut heads = ProjectionHeads::init(dp.d_v, dp.d_t, dim, seed);
    let mut table: Option<ClassEmbeddingTable> = None;
    let mut opt = AdamW::new(params.lr, params.weight_decay);
    let mut order: Vec<usize> = (0..yv.len()).collect();
    let mut rng = rng::stream(seed, "embedding-order");
    let mut log = Vec::new();
    let epochs = params.align_epochs + params.joint_epochs;
    for epoch in 0..epochs {
        let phase = if epoch < params.align_epochs {
            Phase::Align
        } else {
            Phase::Joint
        };
        if phase == Phase::Joint && table.is_none() {
            let h = heads.vis.forward(&zv)?;
            table = Some(init_class_embeddings(
                &h,
                &yv,
                names.clone(),
                params.kappa,
                seed,
            )?);
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(params.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| yv[i]).collect();
            let batch = select_rows(&zv, chunk)?;
            let mut tape = Tape::new();
            let vis = heads.vis.on_tape(&mut tape, true);
            let text = heads.text.on_tape(&mut tape, true);
            let xv = tape.constant(batch);
            let xt = tape.constant(zt.clone());
            let hv = Mlp::apply(&mut tape, vis, xv)?;
            let ht = Mlp::apply(&mut tape, text, xt)?;
            let mut loss = align_loss_tape(&mut tape, hv, &labels, ht, &yt, params.tau)?;
            let mut w_var = None;
            if let Some(t) = &table {
                let w = if params.learn_prototypes {
                    tape.param(t.w.clone())
                } else {
                    tape.constant(t.w.clone())
                };
                w_var = Some(w);
                let lc = class_loss_tape(&mut tape, hv, &labels, ht, &yt, w, params.tau)?;
                let lc = tape.scale(lc, params.lambda);
                loss = tape.add(loss, lc)?;
            }
            if !tape.value(loss).item().is_finite() {
                return Err(Error::NonFinite("embedding loss".into()));
            }
            let grads = tape.backward(loss)?;
            let vars: Vec<_> = vis.all().into_iter().chain(text.all()).collect();
            let mut g: Vec<Tensor> = {
                let tensors: Vec<&Tensor> = heads
                    .vis
                    .tensors()
                    .into_iter()
                    .chain(heads.text.tensors())
                    .collect();
                vars.iter()
                    .zip(tensors)
                    .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
                    .collect()
            };
            let mut tensors: Vec<&mut Tensor> = heads
                .vis
                .tensors_mut()
                .into_iter()
                .chain(heads.text.tensors_mut())
                .collect();
            if let (Some(w), Some(t), true) = (w_var, table.as_mut(), params.learn_prototypes) {
                g.push(grads.get_or_zeros(w, t.w.shape()));
                tensors.push(&mut t.w);
            }
            opt.step(&mut tensors, &g);
        }
        if let Some(t) = table.as_mut() {
            let h = heads.vis.forward(&zv)?;
            t.ema_update(&class_means(&h, &yv, c))?;
        }
        let losses = evaluate(&heads, table.as_ref(), (&zv, &yv), (&zt, &yt), params.tau)?;
        let proto_acc = match &table {
            Some(t) => Some(
                prototype_gate(
                    dataset,
                    &ClassArtifacts {
                        heads: heads.clone(),
                        table: t.clone(),
                    },
                )?
                .accuracy,
            ),
            None => None,
        };
        log::info!(
            "embedding epoch {epoch} ({phase:?}): align {:.5} class {:?} proto_acc {:?}",
            losses.align,
            losses.class,
            proto_acc
        );
        log.push(EmbeddingLogRow {
            epoch,
            phase,
            l_align: losses.align,
            l_class: losses.class,
            proto_acc,
        });
    }
    heads.round_to_f32();
    let mut table = table.expect("at least one joint epoch");
    table.w.round_to_f32();
    let artifacts = ClassArtifacts { heads, table };
    let gate = prototype_gate(dataset, &artifacts)?;
    Ok(TrainedEmbeddings {
        artifacts,
        log,
        gate,
    })
}

/// Trains the class embeddings and fails with a gate error, carrying the
/// confusion matrix, unless the prototypes classify held-out crops well.
pub fn train_class_embeddings(
    dataset: &Dataset,
    params: &EmbeddingParams,
    dim: usize,
    seed: u64,
) -> Result<TrainedEmbeddings> {
    let trained = fit_class_embeddings(dataset, params, dim, seed)?;
    check_prototype_gate(&trained.gate)?;
    Ok(trained)
}

pub fn check_prototype_gate(report: &PrototypeGateReport) -> Result<()> {
    if report.passed() {
        return Ok(());
    }
    Err(Error::Gate {
        gate: "prototype",
        report: format!(
            "accuracy {:.3} (need >= {GATE_ACCURACY_MIN}), per-class recall {:?}, confusion {:?}",
            report.accuracy, report.per_class_recall, report.confusion
        ),
    })
}

/// Writes the training log as CSV with header
/// `epoch,phase,L_align,L_class,proto_acc`; absent values are empty.
pub fn write_log_csv(path: &Path, log: &[EmbeddingLogRow]) -> Result<()> {
    let mut out = String::from("epoch,phase,L_align,L_class,proto_acc\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for r in log {
        let phase = match r.phase {
            Phase::Align => "align",
            Phase::Joint => "joint",
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            phase,
            r.l_align,
            opt(r.l_class),
            opt(r.proto_acc)
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
