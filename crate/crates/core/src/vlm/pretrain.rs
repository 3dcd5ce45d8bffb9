use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{forward_tape, supervised_nll, TokenSequence, VlmConfig, VlmParams};
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::hinting::enrich_prompt;
use crate::numerics::{norm, AdamW, Tape, Tensor};
use crate::rng;
use crate::synth::{random_bbox, render_patches, Dataset, Scene, QUESTION_TEMPLATES};

/// Minimum common-class answer accuracy of a usable fixture.
pub const GATE_COMMON_MIN: f64 = 0.90;
/// Maximum rare-class answer accuracy of a usable fixture.
pub const GATE_RARE_MAX: f64 = 0.40;

/// Geometry and curriculum of the frozen reference VLM.
///
/// Besides plain question/answer pairs on common-class scenes, the
/// curriculum mixes in hinted prompts and scenes holding an object the
/// model has never seen, whose answer is the first hinted name. The model
/// therefore learns every class name as a word and learns to lean on hints
/// when the visual evidence is unfamiliar, but never sees a rare-class scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureParams {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub context: usize,
    /// Train with the head tied to the token embedding table.
    pub tie_head: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of common-class examples whose prompt carries hints.
    pub hinted_fraction: f64,
    /// Probability that a hint list contains the true class.
    pub hint_recall: f64,
    /// Probability that a true class in the hint list is listed first.
    pub hint_first: f64,
    pub max_hints: usize,
    /// Unfamiliar-object examples added to the curriculum.
    pub unfamiliar_examples: usize,
    /// Object-free scenes whose box positions carry a class name's token
    /// embedding, answered with that name.
    pub word_examples: usize,
    /// Multiplier on the token embedding added at the box positions.
    pub word_scale: f64,
    /// Generation length cap when answering.
    pub max_answer_len: usize,
}

impl Default for FixtureParams {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            dim: 64,
            ff_dim: 512,
            context: 256,
            tie_head: true,
            epochs: 6,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.01,
            hinted_fraction: 0.5,
            hint_recall: 0.9,
            hint_first: 0.7,
            max_hints: 4,
            unfamiliar_examples: 400,
            word_examples: 400,
            word_scale: 1.0,
            max_answer_len: 4,
        }
    }
}

impl FixtureParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.epochs == 0 || self.batch_size == 0 || self.max_hints == 0 {
            return Err(Error::Config(
                "fixture epochs, batch size and max hints must be positive".into(),
            ));
        }
        if !(self.lr > 0.0)
            || !unit(self.hinted_fraction)
            || !unit(self.hint_recall)
            || !unit(self.hint_first)
        {
            return Err(Error::Config(
                "fixture rates must lie in [0, 1] and lr must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn vlm_config(&self, d_v: usize, vocab: usize) -> VlmConfig {
        VlmConfig {
            layers: self.layers,
            heads: self.heads,
            dim: self.dim,
            ff_dim: self.ff_dim,
            context: self.context,
            d_v,
            vocab,
        }
    }
}

/// Vocabulary over the question templates, hint syntax and class names.
pub fn build_tokenizer(class_names: &[String]) -> Tokenizer {
    let hint = enrich_prompt("", &["a", "b"]);
    Tokenizer::build(
        QUESTION_TEMPLATES
            .iter()
            .copied()
            .chain(std::iter::once(hint.as_str()))
            .chain(class_names.iter().map(String::as_str)),
    )
}

/// `<bos>` followed by the prompt tokens.
pub fn prompt_ids(tok: &Tokenizer, prompt: &str) -> Vec<usize> {
    std::iter::once(tok.bos())
        .chain(tok.encode(prompt))
        .collect()
}

/// Answer tokens followed by `<eos>`.
pub fn answer_ids(tok: &Tokenizer, answer: &str) -> Vec<usize> {
    tok.encode(answer)
        .into_iter()
        .chain(std::iter::once(tok.eos()))
        .collect()
}

/// First generated token that names a class, as a class id.
pub fn answered_class(
    tok: &Tokenizer,
    generated: &[usize],
    class_names: &[String],
) -> Option<usize> {
    generated.iter().find_map(|&id| {
        let word = tok.token(id);
        class_names.iter().position(|n| n == word)
    })
}

/// A token embedding added to the visual tokens at `positions`.
#[derive(Debug, Clone, PartialEq)]
pub struct WordInjection {
    pub token: usize,
    pub positions: Vec<usize>,
    pub scale: f64,
}

/// One supervised example: encoded patch features, the token sequence and
/// an optional word injection into the visual tokens.
#[derive(Debug, Clone)]
pub struct Example {
    pub features: Tensor,
    pub sequence: TokenSequence,
    pub word: Option<WordInjection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureGateReport {
    pub common_accuracy: f64,
    pub rare_accuracy: f64,
    pub per_class: Vec<f64>,
}

impl FixtureGateReport {
    pub fn passed(&self) -> bool {
        self.common_accuracy >= GATE_COMMON_MIN && self.rare_accuracy <= GATE_RARE_MAX
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub params: VlmParams,
    pub tokenizer: Tokenizer,
    pub log: Vec<EpochLoss>,
    pub gate: FixtureGateReport,
}

/// Hint list of 1..=max_hints distinct names. The true class is included
/// with probability `hint_recall` and listed first with `hint_first`.
fn hint_list(
    names: &[String],
    truth: usize,
    params: &FixtureParams,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let len = rng.random_range(1..=params.max_hints.min(names.len()));
    let mut others: Vec<usize> = (0..names.len()).filter(|&c| c != truth).collect();
    others.shuffle(rng);
    let mut list: Vec<usize> = others.into_iter().take(len).collect();
    if rng.random_bool(params.hint_recall) {
        let slot = if len == 1 || rng.random_bool(params.hint_first) {
            0
        } else {
            rng.random_range(1..len)
        };
        list[slot] = truth;
    }
    list.into_iter().map(|c| names[c].clone()).collect()
}

fn example(
    tok: &Tokenizer,
    features: Tensor,
    question: &str,
    hints: &[String],
    answer: &str,
) -> Example {
    let prompt = prompt_ids(tok, &enrich_prompt(question, hints));
    let sequence = TokenSequence::build(
        features.rows(),
        tok.img(),
        &prompt,
        &answer_ids(tok, answer),
    );
    Example {
        features,
        sequence,
        word: None,
    }
}

/// The fixed pretraining curriculum. Only common-class training scenes,
/// synthetic unfamiliar objects and word-carrying object-free scenes appear;
/// rare-class scenes never do.
pub fn curriculum(
    dataset: &Dataset,
    tok: &Tokenizer,
    params: &FixtureParams,
    seed: u64,
) -> Result<Vec<Example>> {
    let names = dataset.class_names();
    let mut rng = rng::stream(seed, "fixture-curriculum");
    let mut out = Vec::new();
    for scene in dataset
        .train
        .iter()
        .filter(|s| !dataset.manifest.is_rare(s.class()))
    {
        let features = dataset.vision.encode(&scene.patches)?;
        let hints = if rng.random_bool(params.hinted_fraction) {
            hint_list(&names, scene.class(), params, &mut rng)
        } else {
            Vec::new()
        };
        out.push(example(
            tok,
            features,
            &scene.meta.question,
            &hints,
            &scene.meta.answer,
        ));
    }
    let dp = &dataset.manifest.params;
    for _ in 0..params.unfamiliar_examples {
        let mut signature = rng::gaussian_vec(&mut rng, dp.d_v, 1.0);
        let n = norm(&signature);
        signature.iter_mut().for_each(|v| *v /= n);
        let bbox = random_bbox(dp.grid, &mut rng);
        let patches = render_patches(dp, Some(&signature), &bbox, &mut rng);
        let features = dataset.vision.encode(&patches)?;
        let question = *QUESTION_TEMPLATES.choose(&mut rng).expect("templates");
        let len = rng.random_range(1..=params.max_hints.min(names.len()));
        let mut ids: Vec<usize> = (0..names.len()).collect();
        ids.shuffle(&mut rng);
        let hints: Vec<String> = ids[..len].iter().map(|&c| names[c].clone()).collect();
        let answer = hints[0].clone();
        out.push(example(tok, features, question, &hints, &answer));
    }
    for _ in 0..params.word_examples {
        let class = rng.random_range(0..names.len());
        let bbox = random_bbox(dp.grid, &mut rng);
        let patches = render_patches(dp, None, &bbox, &mut rng);
        let features = dataset.vision.encode(&patches)?;
        let question = *QUESTION_TEMPLATES.choose(&mut rng).expect("templates");
        let hints = if rng.random_bool(params.hinted_fraction) {
            hint_list(&names, class, params, &mut rng)
        } else {
            Vec::new()
        };
        let mut ex = example(tok, features, question, &hints, &names[class]);
        ex.word = Some(WordInjection {
            token: tok.id(&names[class]).unwrap_or_else(|| tok.unk()),
            positions: bbox.token_indices(dp.grid),
            scale: params.word_scale,
        });
        out.push(ex);
    }
    Ok(out)
}

/// Mean per-example answer loss of `batch`, with gradients for every weight.
fn batch_step(params: &VlmParams, batch: &[&Example], tied: bool) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape, true);
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let u = tape.constant(ex.features.clone());
        let mut v = tape.matmul(u, vars.connector)?;
        if let Some(word) = &ex.word {
            let m = ex.features.rows();
            let mut sel = vec![0.0; m];
            for &p in &word.positions {
                sel[p] = word.scale;
            }
            let sel = tape.constant(Tensor::matrix(m, 1, sel)?);
            let emb = tape.gather_rows(vars.tok_emb, &[word.token])?;
            let add = tape.matmul(sel, emb)?;
            v = tape.add(v, add)?;
        }
        let fwd = forward_tape(&mut tape, &params.config, &vars, Some(v), &ex.sequence)?;
        let sup = ex.sequence.supervised(true);
        losses.push(supervised_nll(&mut tape, &vars, fwd.normed, &sup, tied)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let loss = tape.scale(total, 1.0 / batch.len() as f64);
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("fixture pretraining loss".into()));
    }
    let grads = tape.backward(loss)?;
    let all = vars.all();
    let shapes: Vec<Vec<usize>> = params
        .named()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let grads = all
        .iter()
        .zip(&shapes)
        .map(|(&v, s)| grads.get_or_zeros(v, s))
        .collect();
    Ok((value, grads))
}

/// Answers `scene` with a plain prompt and returns the answered class.
pub fn answer_scene(
    vlm: &VlmParams,
    tok: &Tokenizer,
    dataset: &Dataset,
    scene: &Scene,
    max_len: usize,
) -> Result<Option<usize>> {
    let v = vlm.connect(&dataset.vision.encode(&scene.patches)?)?;
    let prompt = TokenSequence::build(
        v.rows(),
        tok.img(),
        &prompt_ids(tok, &scene.meta.question),
        &[],
    );
    let generated = vlm.generate(Some(&v), &prompt, max_len, tok.eos())?;
    Ok(answered_class(tok, &generated, &dataset.class_names()))
}

/// Plain-prompt answer accuracy on the test split, split by rarity.
pub fn fixture_gate(
    vlm: &VlmParams,
    tok: &Tokenizer,
    dataset: &Dataset,
    max_len: usize,
) -> Result<FixtureGateReport> {
    let c = dataset.num_classes();
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for scene in &dataset.test {
        let y = scene.class();
        totals[y] += 1;
        if answer_scene(vlm, tok, dataset, scene, max_len)? == Some(y) {
            hits[y] += 1;
        }
    }
    let rate = |rare: bool| {
        let (h, t) = (0..c)
            .filter(|&k| dataset.manifest.is_rare(k) == rare)
            .fold((0, 0), |(h, t), k| (h + hits[k], t + totals[k]));
        if t == 0 {
            0.0
        } else {
            h as f64 / t as f64
        }
    };
    Ok(FixtureGateReport {
        common_accuracy: rate(false),
        rare_accuracy: rate(true),
        per_class: (0..c)
            .map(|k| {
                if totals[k] == 0 {
                    0.0
                } else {
                    hits[k] as f64 / totals[k] as f64
                }
            })
            .collect(),
    })
}

/// Trains the fixture and fails with a gate error unless it meets both
/// accuracy thresholds.
pub fn pretrain_fixture(dataset: &Dataset, params: &FixtureParams, seed: u64) -> Result<Fixture> {
    let fixture = train_fixture(dataset, params, seed)?;
    check_fixture_gate(&fixture.gate)?;
    Ok(fixture)
}

/// Trains the reference VLM on the curriculum with a cosine learning-rate
/// schedule, rounds its weights to `f32`, and measures the fixture gate.
pub fn train_fixture(dataset: &Dataset, params: &FixtureParams, seed: u64) -> Result<Fixture> {
    params.validate()?;
    let names = dataset.class_names();
    let tok = build_tokenizer(&names);
    let config = params.vlm_config(dataset.manifest.params.d_v, tok.len());
    let mut vlm = VlmParams::init(config, seed)?;
    let examples = curriculum(dataset, &tok, params, seed)?;
    if let Some(ex) = examples
        .iter()
        .find(|e| e.sequence.len() + params.max_answer_len > config.context)
    {
        return Err(Error::Length {
            len: ex.sequence.len() + params.max_answer_len,
            limit: config.context,
        });
    }
    let mut opt = AdamW::new(params.lr, params.weight_decay);
    let steps_per_epoch = examples.len().div_ceil(params.batch_size);
    let total_steps = (steps_per_epoch * params.epochs) as f64;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = rng::stream(seed, "fixture-order");
    let mut log = Vec::with_capacity(params.epochs);
    let mut step = 0usize;
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(params.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = batch_step(&vlm, &batch, params.tie_head)?;
            opt.lr =
                params.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            opt.step(&mut vlm.tensors_mut(), &grads);
            sum += loss * batch.len() as f64;
            step += 1;
        }
        let mean = sum / examples.len() as f64;
        log::info!("fixture epoch {epoch}: loss {mean:.5}");
        log.push(EpochLoss { epoch, loss: mean });
    }
    if params.tie_head {
        vlm.head = vlm.tok_emb.transpose();
    }
    vlm.round_to_f32();
    let gate = fixture_gate(&vlm, &tok, dataset, params.max_answer_len)?;
    log::info!(
        "fixture gate: common {:.3}, rare {:.3}",
        gate.common_accuracy,
        gate.rare_accuracy
    );
    Ok(Fixture {
        params: vlm,
        tokenizer: tok,
        log,
        gate,
    })
}

/// Fails with a gate error when the fixture does not meet both thresholds.
pub fn check_fixture_gate(report: &FixtureGateReport) -> Result<()> {
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Gate {
            gate: "fixture",
            report: format!(
                "common accuracy {:.3} (need >= {GATE_COMMON_MIN}), rare accuracy {:.3} (need <= {GATE_RARE_MAX}), per class {:?}",
                report.common_accuracy, report.rare_accuracy, report.per_class
            ),
        })
    }
}
