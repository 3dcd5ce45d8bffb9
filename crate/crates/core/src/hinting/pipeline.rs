use serde::{Deserialize, Serialize};

use super::prompt::enrich_prompt;
use super::score::{score_map, top_k, DetectionResult, ScoreMap};
use crate::adapter::AdapterParams;
use crate::embeddings::ClassArtifacts;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synth::{Scene, VisionEncoder};
use crate::vlm::{answer_ids, answered_class, prompt_ids, TokenSequence, Tokenizer, VlmParams};

/// Inference arms: which of token refinement and prompt hints are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Plain prompt, unrefined tokens.
    Baseline,
    /// Refined tokens, plain prompt.
    VisualOnly,
    /// Unrefined tokens, top-k hints.
    HintsOnly,
    /// Refined tokens, every class name as a hint.
    AllClassesHints,
    /// Refined tokens and top-k hints.
    Full,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Baseline,
        Mode::VisualOnly,
        Mode::HintsOnly,
        Mode::AllClassesHints,
        Mode::Full,
    ];

    pub fn refines(self) -> bool {
        matches!(self, Mode::VisualOnly | Mode::AllClassesHints | Mode::Full)
    }

    pub fn hinted(self) -> bool {
        matches!(self, Mode::HintsOnly | Mode::AllClassesHints | Mode::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::VisualOnly => "visual-only",
            Mode::HintsOnly => "hints-only",
            Mode::AllClassesHints => "all-classes-hints",
            Mode::Full => "full",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Refined visual tokens with the artifacts they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedTokens {
    pub tokens: Tensor,
    pub scene_id: String,
    pub class_checksum: u32,
    pub adapter_checksum: u32,
}

#[derive(Debug, Clone)]
pub struct Answer {
    pub generated: Vec<usize>,
    pub text: String,
    pub class_id: Option<usize>,
    pub detection: DetectionResult,
    /// Names that were appended to the prompt.
    pub hints: Vec<String>,
    pub refined: Option<RefinedTokens>,
}

/// Frozen artifacts needed for inference, checked for pairing on creation.
#[derive(Debug, Clone)]
pub struct Pipeline<'a> {
    pub vlm: &'a VlmParams,
    pub tokenizer: &'a Tokenizer,
    pub classes: &'a ClassArtifacts,
    pub adapter: &'a AdapterParams,
    pub vision: &'a VisionEncoder,
    pub max_answer_len: usize,
    class_checksum: u32,
    adapter_checksum: u32,
}

impl<'a> Pipeline<'a> {
    /// Fails with a pairing error unless the adapter was trained against
    /// `classes`, as recorded by `adapter_class_checksum`.
    pub fn new(
        vlm: &'a VlmParams,
        tokenizer: &'a Tokenizer,
        classes: &'a ClassArtifacts,
        adapter: &'a AdapterParams,
        adapter_class_checksum: u32,
        vision: &'a VisionEncoder,
        max_answer_len: usize,
    ) -> Result<Self> {
        let class_checksum = classes.checksum();
        if class_checksum != adapter_class_checksum {
            return Err(Error::Pairing(format!(
                "adapter was trained against class table {adapter_class_checksum:08x}, loaded table is {class_checksum:08x}"
            )));
        }
        if classes.table.dim() != vlm.config.dim || adapter.dim() != vlm.config.dim {
            return Err(Error::dim(
                "pipeline",
                &[classes.table.dim(), adapter.dim()],
                &[vlm.config.dim],
            ));
        }
        Ok(Self {
            vlm,
            tokenizer,
            classes,
            adapter,
            vision,
            max_answer_len,
            class_checksum,
            adapter_checksum: adapter.checksum(class_checksum),
        })
    }

    /// Patch-by-class scores for a scene.
    pub fn scores(&self, scene: &Scene) -> Result<ScoreMap> {
        score_map(&self.vision.encode(&scene.patches)?, self.classes)
    }

    pub fn detect(&self, scene: &Scene, k: usize) -> Result<DetectionResult> {
        top_k(&self.scores(scene)?, k)
    }

    pub fn visual_tokens(&self, scene: &Scene) -> Result<Tensor> {
        self.vlm.connect(&self.vision.encode(&scene.patches)?)
    }

    pub fn refine(&self, scene: &Scene, v: &Tensor) -> Result<RefinedTokens> {
        Ok(RefinedTokens {
            tokens: self.adapter.adapt(v, &self.classes.table.w)?,
            scene_id: scene.id().to_string(),
            class_checksum: self.class_checksum,
            adapter_checksum: self.adapter_checksum,
        })
    }

    /// The prompt used in `mode` for `scene` and its detection.
    pub fn prompt(
        &self,
        scene: &Scene,
        mode: Mode,
        detection: &DetectionResult,
    ) -> (String, Vec<String>) {
        let hints = match mode {
            Mode::Baseline | Mode::VisualOnly => Vec::new(),
            Mode::HintsOnly | Mode::Full => detection.names(),
            Mode::AllClassesHints => self.classes.table.names.clone(),
        };
        (enrich_prompt(&scene.meta.question, &hints), hints)
    }

    /// Token sequence for `prompt` behind `num_visual` visual positions,
    /// followed by `answer` when given.
    pub fn sequence(&self, num_visual: usize, prompt: &str, answer: Option<&str>) -> TokenSequence {
        let tok = self.tokenizer;
        let answer = answer.map_or_else(Vec::new, |a| answer_ids(tok, a));
        TokenSequence::build(num_visual, tok.img(), &prompt_ids(tok, prompt), &answer)
    }

    /// Answers in `mode` from precomputed detection and visual tokens. The
    /// refined tokens are used when the mode refines and are required then.
    pub fn answer(
        &self,
        scene: &Scene,
        mode: Mode,
        detection: DetectionResult,
        v: &Tensor,
        refined: Option<RefinedTokens>,
    ) -> Result<Answer> {
        let refined = if mode.refines() {
            Some(match refined {
                Some(r) => r,
                None => self.refine(scene, v)?,
            })
        } else {
            None
        };
        let (prompt, hints) = self.prompt(scene, mode, &detection);
        let seq = self.sequence(v.rows(), &prompt, None);
        let input = refined.as_ref().map_or(v, |r| &r.tokens);
        let tok = self.tokenizer;
        let generated = self
            .vlm
            .generate(Some(input), &seq, self.max_answer_len, tok.eos())?;
        let class_id = answered_class(tok, &generated, &self.classes.table.names);
        Ok(Answer {
            text: tok.decode(&generated),
            generated,
            class_id,
            detection,
            hints,
            refined,
        })
    }

    /// Detects, builds the prompt and visual input for `mode`, and answers.
    pub fn detect_and_answer(&self, scene: &Scene, k: usize, mode: Mode) -> Result<Answer> {
        let detection = self.detect(scene, k)?;
        let v = self.visual_tokens(scene)?;
        self.answer(scene, mode, detection, &v, None)
    }
}
