use serde::{Deserialize, Serialize};

use crate::adapter::{autoreg_loss, AdapterParams};
use crate::embeddings::ClassArtifacts;
use crate::error::{Error, Result};
use crate::hinting::{top_k, Mode, Pipeline};
use crate::synth::Dataset;
use crate::vlm::VlmParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_id: usize,
    pub name: String,
    pub rare: bool,
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Mean summed answer negative log-likelihood per scene.
    pub answer_nll: Option<f64>,
}

/// Answer accuracy of one inference arm on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub k: usize,
    pub samples: usize,
    pub accuracy: f64,
    pub rare_accuracy: f64,
    pub common_accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    /// Fraction of scenes whose true class is among the top-k detections.
    pub detection_accuracy: f64,
    /// Fraction of answers naming one of the hinted classes; absent for
    /// arms without hints.
    pub trust_rate: Option<f64>,
    pub rare_answer_nll: Option<f64>,
    pub common_answer_nll: Option<f64>,
}

impl EvalReport {
    /// Recomputes the aggregates from the per-class rows.
    pub fn check_consistency(&self) -> Result<()> {
        let (mut n, mut c) = (0, 0);
        for row in &self.per_class {
            n += row.samples;
            c += row.correct;
            if row.samples > 0 && row.accuracy != row.correct as f64 / row.samples as f64 {
                return Err(Error::Contract(format!(
                    "class {} accuracy is inconsistent",
                    row.class_id
                )));
            }
        }
        if n != self.samples || self.accuracy != ratio(c, n) {
            return Err(Error::Contract("aggregate accuracy is inconsistent".into()));
        }
        let split = |rare: bool| {
            let (n, c) = self
                .per_class
                .iter()
                .filter(|r| r.rare == rare)
                .fold((0, 0), |(n, c), r| (n + r.samples, c + r.correct));
            ratio(c, n)
        };
        if split(true) != self.rare_accuracy || split(false) != self.common_accuracy {
            return Err(Error::Contract(
                "rare/common accuracy is inconsistent".into(),
            ));
        }
        let rates = [
            self.accuracy,
            self.rare_accuracy,
            self.common_accuracy,
            self.detection_accuracy,
        ];
        if rates
            .iter()
            .chain(self.trust_rate.iter())
            .any(|r| !(0.0..=1.0).contains(r))
        {
            return Err(Error::Contract("rate outside [0, 1]".into()));
        }
        Ok(())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionAtK {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Default, Clone)]
struct Tally {
    samples: Vec<usize>,
    correct: Vec<usize>,
    nll: Vec<f64>,
    detected: usize,
    trusted: usize,
}

/// Evaluates every `(mode, k)` arm in one pass over the test split, sharing
/// visual tokens, refined tokens and score maps across arms.
pub fn evaluate_arms(
    pipe: &Pipeline,
    dataset: &Dataset,
    arms: &[(Mode, usize)],
    with_nll: bool,
) -> Result<Vec<EvalReport>> {
    let c = dataset.num_classes();
    let mut tallies = vec![
        Tally {
            samples: vec![0; c],
            correct: vec![0; c],
            nll: vec![0.0; c],
            ..Tally::default()
        };
        arms.len()
    ];
    let mut scenes: Vec<_> = dataset.test.iter().collect();
    scenes.sort_by(|a, b| a.id().cmp(b.id()));
    let needs_refined = arms.iter().any(|(m, _)| m.refines());
    for scene in scenes {
        let y = scene.class();
        let map = pipe.scores(scene)?;
        let v = pipe.visual_tokens(scene)?;
        let refined = if needs_refined {
            Some(pipe.refine(scene, &v)?)
        } else {
            None
        };
        for (&(mode, k), t) in arms.iter().zip(&mut tallies) {
            let detection = top_k(&map, k)?;
            t.detected += usize::from(detection.contains(y));
            let answer = pipe.answer(scene, mode, detection, &v, refined.clone())?;
            t.samples[y] += 1;
            t.correct[y] += usize::from(answer.class_id == Some(y));
            if let Some(id) = answer.class_id {
                t.trusted += usize::from(answer.hints.contains(&pipe.classes.table.names[id]));
            }
            if with_nll {
                let seq = pipe.sequence(
                    v.rows(),
                    &pipe.prompt(scene, mode, &answer.detection).0,
                    Some(&scene.meta.answer),
                );
                let input = answer.refined.as_ref().map_or(&v, |r| &r.tokens);
                t.nll[y] += autoreg_loss(pipe.vlm, input, &seq, true)?;
            }
        }
    }
    let names = dataset.class_names();
    Ok(arms
        .iter()
        .zip(tallies)
        .map(|(&(mode, k), t)| {
            let per_class: Vec<ClassAccuracy> = (0..c)
                .map(|id| ClassAccuracy {
                    class_id: id,
                    name: names[id].clone(),
                    rare: dataset.manifest.is_rare(id),
                    samples: t.samples[id],
                    correct: t.correct[id],
                    accuracy: ratio(t.correct[id], t.samples[id]),
                    answer_nll: (with_nll && t.samples[id] > 0)
                        .then(|| t.nll[id] / t.samples[id] as f64),
                })
                .collect();
            let split = |rare: bool| {
                per_class
                    .iter()
                    .filter(|r| r.rare == rare)
                    .fold((0, 0, 0.0), |(n, k, l), r| {
                        (n + r.samples, k + r.correct, l + t.nll[r.class_id])
                    })
            };
            let (rn, rc, rl) = split(true);
            let (cn, cc, cl) = split(false);
            let n = rn + cn;
            let mean_nll = |l: f64, n: usize| (with_nll && n > 0).then(|| l / n as f64);
            EvalReport {
                mode,
                k,
                samples: n,
                accuracy: ratio(rc + cc, n),
                rare_accuracy: ratio(rc, rn),
                common_accuracy: ratio(cc, cn),
                per_class,
                detection_accuracy: ratio(t.detected, n),
                trust_rate: mode.hinted().then(|| ratio(t.trusted, n)),
                rare_answer_nll: mean_nll(rl, rn),
                common_answer_nll: mean_nll(cl, cn),
            }
        })
        .collect())
}

/// Top-k detection accuracy on the test split for `k = 1..=C`.
pub fn detection_curve(pipe: &Pipeline, dataset: &Dataset) -> Result<Vec<DetectionAtK>> {
    let c = dataset.num_classes();
    let mut hits = vec![0usize; c + 1];
    for scene in &dataset.test {
        let map = pipe.scores(scene)?;
        let full = top_k(&map, c)?;
        let rank = full
            .detections
            .iter()
            .position(|d| d.class_id == scene.class())
            .expect("every class is ranked");
        for slot in hits.iter_mut().skip(rank + 1) {
            *slot += 1;
        }
    }
    Ok((1..=c)
        .map(|k| DetectionAtK {
            k,
            accuracy: ratio(hits[k], dataset.test.len()),
        })
        .collect())
}

/// Parameter counts of the frozen fixture and the added components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub vlm: usize,
    pub adapter: usize,
    pub projection_heads: usize,
    pub class_table: usize,
    /// Adapter, heads and table together.
    pub added: usize,
    /// `added / vlm`.
    pub ratio: f64,
}

/// Largest allowed ratio of added to fixture parameters.
pub const MAX_ADDED_RATIO: f64 = 0.10;

pub fn report_params(
    vlm: &VlmParams,
    classes: &ClassArtifacts,
    adapter: &AdapterParams,
) -> ParamReport {
    let projection_heads = classes.heads.num_params();
    let class_table = classes.table.w.numel();
    let added = adapter.num_params() + projection_heads + class_table;
    ParamReport {
        vlm: vlm.num_params(),
        adapter: adapter.num_params(),
        projection_heads,
        class_table,
        added,
        ratio: added as f64 / vlm.num_params() as f64,
    }
}

impl ParamReport {
    pub fn check(&self) -> Result<()> {
        if self.ratio < MAX_ADDED_RATIO {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "added parameters are {:.1}% of the fixture, limit {:.0}%",
                100.0 * self.ratio,
                100.0 * MAX_ADDED_RATIO
            )))
        }
    }
}
