//! Class embeddings as patch-level detectors and prompt enrichment with the
//! detected class names.

mod pipeline;
mod prompt;
mod score;

pub use pipeline::{Answer, Mode, Pipeline, RefinedTokens};
pub use prompt::enrich_prompt;
pub use score::{score_map, top_k, Detection, DetectionResult, ScoreMap};
