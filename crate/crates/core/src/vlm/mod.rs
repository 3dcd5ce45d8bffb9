//! The frozen reference vision-language model: tokenizer, decoder-only
//! transformer with a linear visual connector, fixture pretraining and
//! interpretability probes.

mod model;
mod pretrain;
mod probes;
mod tokenizer;

pub use model::{argmax, ForwardOutput, LayerParams, Role, TokenSequence, VlmConfig, VlmParams};
pub(crate) use model::{forward_tape, supervised_nll};
pub use pretrain::{
    answer_ids, answer_scene, answered_class, build_tokenizer, check_fixture_gate, curriculum,
    fixture_gate, pretrain_fixture, prompt_ids, train_fixture, EpochLoss, Example, Fixture,
    FixtureGateReport, FixtureParams, GATE_COMMON_MIN, GATE_RARE_MAX,
};
pub use probes::{attention_probe, logit_lens, LensEntry};
pub use tokenizer::{split_words, Tokenizer};
