use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{adapt_tape, autoreg_loss_tape, rec_loss_tape, AdapterParams};
use crate::embeddings::ClassArtifacts;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, Tape, Tensor};
use crate::rng;
use crate::synth::{Dataset, Scene};
use crate::vlm::{answer_ids, prompt_ids, TokenSequence, Tokenizer, VlmParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterTrainParams {
    pub heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub rec_weight: f64,
    pub autoreg_weight: f64,
    /// Supervise answer tokens only; otherwise every text token after the
    /// first.
    pub answer_only: bool,
    /// Cap on training scenes per class, in scene order; `None` uses all.
    pub max_per_class: Option<usize>,
}

impl Default for AdapterTrainParams {
    fn default() -> Self {
        Self {
            heads: 4,
            epochs: 10,
            batch_size: 1,
            lr: 1e-3,
            weight_decay: 0.01,
            rec_weight: 1.0,
            autoreg_weight: 1.0,
            answer_only: true,
            max_per_class: Some(25),
        }
    }
}

impl AdapterTrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(
                "adapter epochs, batch size and lr must be positive".into(),
            ));
        }
        if self.rec_weight < 0.0 || self.autoreg_weight < 0.0 {
            return Err(Error::Config(
                "adapter loss weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterLogRow {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_autoreg: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedAdapter {
    pub params: AdapterParams,
    /// Checksum of the class artifacts the adapter was trained against.
    pub class_checksum: u32,
    pub log: Vec<AdapterLogRow>,
}

/// Visual tokens and the plain question/answer sequence for a scene.
pub fn scene_example(
    vlm: &VlmParams,
    tok: &Tokenizer,
    dataset: &Dataset,
    scene: &Scene,
) -> Result<(Tensor, TokenSequence)> {
    let v = vlm.connect(&dataset.vision.encode(&scene.patches)?)?;
    let seq = TokenSequence::build(
        v.rows(),
        tok.img(),
        &prompt_ids(tok, &scene.meta.question),
        &answer_ids(tok, &scene.meta.answer),
    );
    Ok((v, seq))
}

/// Weighted adapter objective for one batch and its gradients, in the order
/// of [`AdapterParams::tensors`].
pub(crate) fn adapter_step(
    adapter: &AdapterParams,
    vlm: &VlmParams,
    w: &Tensor,
    batch: &[&(Tensor, TokenSequence)],
    params: &AdapterTrainParams,
) -> Result<(f64, f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = adapter.on_tape(&mut tape, true);
    let wv = tape.constant(w.clone());
    let mut total = None;
    let (mut rec_sum, mut ar_sum) = (0.0, 0.0);
    for (v, seq) in batch {
        let vv = tape.constant(v.clone());
        let (refined, _) = adapt_tape(&mut tape, adapter.heads, vars, vv, wv)?;
        let rec = rec_loss_tape(&mut tape, vv, refined)?;
        let ar = autoreg_loss_tape(&mut tape, vlm, refined, seq, params.answer_only)?;
        rec_sum += tape.value(rec).item();
        ar_sum += tape.value(ar).item();
        let rec = tape.scale(rec, params.rec_weight);
        let ar = tape.scale(ar, params.autoreg_weight);
        let l = tape.add(rec, ar)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let loss = tape.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64);
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFinite("adapter loss".into()));
    }
    let grads = tape.backward(loss)?;
    let g = vars
        .all()
        .iter()
        .zip(adapter.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    Ok((rec_sum, ar_sum, g))
}

/// Trains the adapter against the frozen VLM and fixed class table. The VLM
/// must match `vlm_checksum` before and after training.
pub fn train_adapter(
    dataset: &Dataset,
    classes: &ClassArtifacts,
    vlm: &VlmParams,
    vlm_checksum: u32,
    tok: &Tokenizer,
    params: &AdapterTrainParams,
    seed: u64,
) -> Result<TrainedAdapter> {
    params.validate()?;
    let check_frozen = |when: &str| -> Result<()> {
        let found = vlm.checksum();
        if found != vlm_checksum {
            return Err(Error::Frozen(format!(
                "VLM checksum {found:08x} differs from the frozen {vlm_checksum:08x} {when} adapter training"
            )));
        }
        Ok(())
    };
    check_frozen("before")?;
    let class_checksum = classes.checksum();
    let w = &classes.table.w;
    let mut adapter = AdapterParams::init(vlm.config.dim, params.heads, seed)?;
    let mut per_class = vec![0usize; dataset.num_classes()];
    let mut examples = Vec::new();
    for scene in &dataset.train {
        let c = scene.class();
        if params.max_per_class.is_some_and(|cap| per_class[c] >= cap) {
            continue;
        }
        per_class[c] += 1;
        examples.push(scene_example(vlm, tok, dataset, scene)?);
    }
    let mut opt = AdamW::new(params.lr, params.weight_decay);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = rng::stream(seed, "adapter-order");
    let mut log = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let (mut rec, mut ar) = (0.0, 0.0);
        for chunk in order.chunks(params.batch_size) {
            let batch: Vec<&(Tensor, TokenSequence)> =
                chunk.iter().map(|&i| &examples[i]).collect();
            let (r, a, g) = adapter_step(&adapter, vlm, w, &batch, params)?;
            rec += r;
            ar += a;
            opt.step(&mut adapter.tensors_mut(), &g);
        }
        let n = examples.len() as f64;
        log::info!(
            "adapter epoch {epoch}: rec {:.5} autoreg {:.5}",
            rec / n,
            ar / n
        );
        log.push(AdapterLogRow {
            epoch,
            l_rec: rec / n,
            l_autoreg: ar / n,
        });
    }
    adapter.round_to_f32();
    check_frozen("after")?;
    Ok(TrainedAdapter {
        params: adapter,
        class_checksum,
        log,
    })
}
