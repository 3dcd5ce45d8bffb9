//! Synthetic imbalanced rare-object benchmark and the frozen encoder
//! surrogates that read it.

mod encoders;
mod resample;
mod textpool;
mod world;

pub use encoders::{pool_tokens, BBox, TextEncoder, VisionEncoder};
pub use resample::{adaptive_resample, quotas};
pub use textpool::{ClassPool, TextPool};
pub use world::{
    decode_scene, encode_scene, generate_dataset, ClassSpec, Dataset, DatasetManifest,
    DatasetParams, Scene, SceneMeta, QUESTION_TEMPLATES,
};

pub(crate) use world::{random_bbox, read_json, render_patches, write_json};
