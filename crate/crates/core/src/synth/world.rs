use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoders::{BBox, TextEncoder, VisionEncoder};
use super::textpool::TextPool;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Tensor};
use crate::rng;

const SCENE_MAGIC: &[u8; 4] = b"RLSC";
const SCENE_VERSION: u16 = 1;
const MAX_SIGNATURE_COSINE: f64 = 0.3;

/// Question templates for the referring-object QA pairs.
pub const QUESTION_TEMPLATES: &[&str] = &[
    "what is the object inside the red rectangle ?",
    "please describe the object inside the red rectangle .",
    "which object is in the box ?",
    "name the object in the highlighted region .",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetParams {
    pub num_classes: usize,
    pub grid: usize,
    pub d_v: usize,
    pub d_t: usize,
    /// The last `rare_classes` class ids are rare.
    pub rare_classes: usize,
    pub rare_count: usize,
    pub common_count: usize,
    pub test_per_class: usize,
    /// Norm of the planted signature inside the box.
    pub signal: f64,
    /// Expected norm of the isotropic noise added to object patches.
    pub object_noise: f64,
    /// Expected norm of a background patch.
    pub background_noise: f64,
    pub identity_vision: bool,
    /// Total number of re-sampled class descriptions.
    pub text_budget: usize,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            num_classes: 12,
            grid: 4,
            d_v: 32,
            d_t: 32,
            rare_classes: 4,
            rare_count: 5,
            common_count: 200,
            test_per_class: 20,
            signal: 2.0,
            object_noise: 0.3,
            background_noise: 1.5,
            identity_vision: false,
            text_budget: 120,
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.grid < 4 {
            return bad(format!("grid must be at least 4, got {}", self.grid));
        }
        if self.d_v < 8 || self.d_t < 8 {
            return bad(format!(
                "feature dims must be at least 8 (d_v={}, d_t={})",
                self.d_v, self.d_t
            ));
        }
        if self.rare_classes >= self.num_classes {
            return bad("at least one class must be common".into());
        }
        if self.rare_count == 0 || self.common_count == 0 || self.test_per_class == 0 {
            return bad("sample counts must be positive".into());
        }
        if self.text_budget < self.num_classes {
            return bad("text budget must cover every class".into());
        }
        Ok(())
    }

    pub fn count_for(&self, class_id: usize) -> usize {
        if self.is_rare(class_id) {
            self.rare_count
        } else {
            self.common_count
        }
    }

    pub fn is_rare(&self, class_id: usize) -> bool {
        class_id >= self.num_classes - self.rare_classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    pub name: String,
    pub signature: Vec<f64>,
    pub frequency_weight: f64,
    pub rare: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_id: String,
    pub object_class: usize,
    pub bbox: BBox,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub meta: SceneMeta,
    /// Raw patch features, `grid*grid x d_v`, row-major over the grid.
    pub patches: Tensor,
}

impl Scene {
    pub fn id(&self) -> &str {
        &self.meta.scene_id
    }

    pub fn class(&self) -> usize {
        self.meta.object_class
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub params: DatasetParams,
    pub classes: Vec<ClassSpec>,
    /// Training scenes per class.
    pub counts: Vec<usize>,
    pub train: Vec<SceneMeta>,
    pub test: Vec<SceneMeta>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn is_rare(&self, class_id: usize) -> bool {
        self.classes[class_id].rare
    }

    pub fn grid(&self) -> usize {
        self.params.grid
    }
}

/// A generated benchmark together with its frozen encoders.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
    pub pool: TextPool,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes()
    }

    pub fn grid(&self) -> usize {
        self.manifest.params.grid
    }

    pub fn class_names(&self) -> Vec<String> {
        self.manifest.class_names()
    }

    /// Encoded, box-pooled object feature `z_v` for a scene.
    pub fn object_feature(&self, scene: &Scene) -> Result<Vec<f64>> {
        self.vision
            .crop_and_pool(&scene.patches, self.grid(), &scene.meta.bbox)
    }

    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.train.iter().chain(&self.test).find(|s| s.id() == id)
    }
}

fn draw_signatures(params: &DatasetParams, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng::stream(seed, "signatures");
    let limit = 10 * params.num_classes;
    let mut sigs: Vec<Vec<f64>> = Vec::with_capacity(params.num_classes);
    let mut draws = 0;
    while sigs.len() < params.num_classes {
        if draws == limit {
            return Err(Error::Config(format!(
                "could not place {} signatures with pairwise cosine <= {MAX_SIGNATURE_COSINE} in {limit} draws",
                params.num_classes
            )));
        }
        draws += 1;
        let mut v = rng::gaussian_vec(&mut rng, params.d_v, 1.0);
        let n = norm(&v);
        v.iter_mut().for_each(|a| *a /= n);
        if sigs.iter().all(|s| dot(s, &v) <= MAX_SIGNATURE_COSINE) {
            sigs.push(v);
        }
    }
    Ok(sigs)
}

fn round_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Patch grid with the signature planted inside `bbox` and background noise
/// elsewhere. `signature = None` gives an object-free scene.
pub(crate) fn render_patches(
    params: &DatasetParams,
    signature: Option<&[f64]>,
    bbox: &BBox,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Tensor {
    let g = params.grid;
    let mut data = Vec::with_capacity(g * g * params.d_v);
    let obj_scale = params.object_noise / (params.d_v as f64).sqrt();
    let bg_scale = params.background_noise / (params.d_v as f64).sqrt();
    for r in 0..g {
        for c in 0..g {
            match signature {
                Some(sig) if bbox.contains(r, c) => {
                    for s in sig {
                        data.push(round_f32(
                            params.signal * s + obj_scale * rng::gaussian(rng),
                        ));
                    }
                }
                _ => {
                    for _ in 0..params.d_v {
                        data.push(round_f32(bg_scale * rng::gaussian(rng)));
                    }
                }
            }
        }
    }
    Tensor::matrix(g * g, params.d_v, data).expect("grid shape")
}

pub(crate) fn random_bbox(grid: usize, rng: &mut rand_chacha::ChaCha8Rng) -> BBox {
    let max_side = grid.div_ceil(2);
    let h = rng.random_range(1..=max_side);
    let w = rng.random_range(1..=max_side);
    let row0 = rng.random_range(0..=grid - h);
    let col0 = rng.random_range(0..=grid - w);
    BBox {
        row0,
        col0,
        row1: row0 + h,
        col1: col0 + w,
    }
}

/// Generates the imbalanced benchmark. A pure function of `(params, pool, seed)`.
pub fn generate_dataset(params: &DatasetParams, pool: &TextPool, seed: u64) -> Result<Dataset> {
    params.validate()?;
    if pool.classes.len() < params.num_classes {
        return Err(Error::Config(format!(
            "text pool has {} classes, {} requested",
            pool.classes.len(),
            params.num_classes
        )));
    }
    let mut pool = pool.clone();
    pool.classes.truncate(params.num_classes);
    pool.validate()?;

    let sigs = draw_signatures(params, seed)?;
    let counts: Vec<usize> = (0..params.num_classes)
        .map(|c| params.count_for(c))
        .collect();
    let max_count = *counts.iter().max().expect("classes") as f64;
    let classes: Vec<ClassSpec> = sigs
        .into_iter()
        .enumerate()
        .map(|(c, signature)| ClassSpec {
            class_id: c,
            name: pool.classes[c].name.clone(),
            signature,
            frequency_weight: counts[c] as f64 / max_count,
            rare: params.is_rare(c),
        })
        .collect();

    let make_split = |split: &str, per_class: &dyn Fn(usize) -> usize| -> Vec<Scene> {
        let mut rng = rng::stream(seed, &format!("scenes:{split}"));
        let mut scenes = Vec::new();
        let mut idx = 0;
        for spec in &classes {
            for _ in 0..per_class(spec.class_id) {
                let bbox = random_bbox(params.grid, &mut rng);
                let patches = render_patches(params, Some(&spec.signature), &bbox, &mut rng);
                let question = QUESTION_TEMPLATES[rng.random_range(0..QUESTION_TEMPLATES.len())];
                scenes.push(Scene {
                    meta: SceneMeta {
                        scene_id: format!("{split}-{idx:05}"),
                        object_class: spec.class_id,
                        bbox,
                        question: question.to_string(),
                        answer: spec.name.clone(),
                    },
                    patches,
                });
                idx += 1;
            }
        }
        scenes
    };
    let train = make_split("train", &|c| counts[c]);
    let test = make_split("test", &|_| params.test_per_class);

    let manifest = DatasetManifest {
        seed,
        params: params.clone(),
        classes,
        counts,
        train: train.iter().map(|s| s.meta.clone()).collect(),
        test: test.iter().map(|s| s.meta.clone()).collect(),
    };
    Ok(Dataset {
        vision: VisionEncoder::new(seed, params.d_v, params.identity_vision),
        text: TextEncoder::new(&pool, seed, params.d_t),
        manifest,
        train,
        test,
        pool,
    })
}

pub fn encode_scene(scene: &Scene, grid: usize) -> Vec<u8> {
    let d_v = scene.patches.cols();
    let mut buf = Vec::with_capacity(14 + scene.patches.numel() * 4);
    buf.extend_from_slice(SCENE_MAGIC);
    buf.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(grid as u32).to_le_bytes());
    buf.extend_from_slice(&(d_v as u32).to_le_bytes());
    for &v in scene.patches.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_scene(bytes: &[u8], meta: SceneMeta, path: &Path) -> Result<Scene> {
    let fail = |reason: &str| Error::Format {
        path: path.into(),
        reason: reason.into(),
    };
    if bytes.len() < 14 || &bytes[..4] != SCENE_MAGIC {
        return Err(fail("missing RLSC header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SCENE_VERSION {
        return Err(fail("unsupported scene version"));
    }
    let grid = u32::from_le_bytes(bytes[6..10].try_into().expect("4")) as usize;
    let d_v = u32::from_le_bytes(bytes[10..14].try_into().expect("4")) as usize;
    let payload = &bytes[14..];
    if payload.len() != grid * grid * d_v * 4 {
        return Err(fail("payload size does not match header"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4"))))
        .collect();
    Ok(Scene {
        meta,
        patches: Tensor::matrix(grid * grid, d_v, data)?,
    })
}

impl Dataset {
    /// Writes `manifest.json`, `textpool.json` and `scenes/<id>.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let scenes_dir = dir.join("scenes");
        std::fs::create_dir_all(&scenes_dir).map_err(|e| Error::io(&scenes_dir, e))?;
        write_json(&dir.join("manifest.json"), &self.manifest)?;
        write_json(&dir.join("textpool.json"), &self.pool)?;
        for s in self.train.iter().chain(&self.test) {
            let path = scenes_dir.join(format!("{}.bin", s.id()));
            std::fs::write(&path, encode_scene(s, self.grid())).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
        let pool = TextPool::load(&dir.join("textpool.json"))?;
        let load_split = |metas: &[SceneMeta]| -> Result<Vec<Scene>> {
            metas
                .iter()
                .map(|m| {
                    let path = dir.join("scenes").join(format!("{}.bin", m.scene_id));
                    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    decode_scene(&bytes, m.clone(), &path)
                })
                .collect()
        };
        let train = load_split(&manifest.train)?;
        let test = load_split(&manifest.test)?;
        let p = &manifest.params;
        Ok(Self {
            vision: VisionEncoder::new(manifest.seed, p.d_v, p.identity_vision),
            text: TextEncoder::new(&pool, manifest.seed, p.d_t),
            manifest,
            train,
            test,
            pool,
        })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(num_classes: usize, rare: usize) -> DatasetParams {
        DatasetParams {
            num_classes,
            rare_classes: rare,
            common_count: 20,
            test_per_class: 4,
            ..DatasetParams::default()
        }
    }

    #[test]
    fn balanced_two_class_is_deterministic() {
        let p = small(2, 0);
        let pool = TextPool::for_classes(2);
        let a = generate_dataset(&p, &pool, 7).unwrap();
        let b = generate_dataset(&p, &pool, 7).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.train, b.train);
        assert_eq!(a.num_classes(), 2);
        let train: std::collections::BTreeSet<_> =
            a.manifest.train.iter().map(|s| &s.scene_id).collect();
        assert!(a.manifest.test.iter().all(|s| !train.contains(&s.scene_id)));
    }

    #[test]
    fn counts_follow_profile() {
        let p = DatasetParams {
            rare_count: 5,
            common_count: 120,
            ..small(12, 4)
        };
        let d = generate_dataset(&p, &TextPool::for_classes(12), 1).unwrap();
        for c in 0..12 {
            let expected = if c >= 8 { 5 } else { 120 };
            assert_eq!(d.manifest.counts[c], expected);
            assert_eq!(d.train.iter().filter(|s| s.class() == c).count(), expected);
            assert_eq!(d.manifest.is_rare(c), c >= 8);
        }
    }

    #[test]
    fn signatures_are_unit_and_spread() {
        let d = generate_dataset(&small(12, 4), &TextPool::for_classes(12), 3).unwrap();
        for a in &d.manifest.classes {
            assert!((norm(&a.signature) - 1.0).abs() < 1e-9);
            for b in &d.manifest.classes {
                if a.class_id != b.class_id {
                    assert!(dot(&a.signature, &b.signature) <= MAX_SIGNATURE_COSINE);
                }
            }
        }
    }

    #[test]
    fn infeasible_signatures_are_reported() {
        let p = DatasetParams {
            d_v: 8,
            ..small(40, 0)
        };
        let pool = TextPool::for_classes(40);
        assert!(matches!(
            generate_dataset(&p, &pool, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_small_grid() {
        let p = DatasetParams {
            grid: 3,
            ..small(2, 0)
        };
        assert!(generate_dataset(&p, &TextPool::for_classes(2), 0).is_err());
    }

    #[test]
    fn scene_files_round_trip() {
        let d = generate_dataset(&small(3, 1), &TextPool::for_classes(3), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, d.manifest);
        assert_eq!(back.train, d.train);
        assert_eq!(back.test, d.test);
        let bytes = std::fs::read(dir.path().join("scenes/train-00000.bin")).unwrap();
        assert_eq!(&bytes[..4], b"RLSC");
        assert_eq!(bytes, encode_scene(&d.train[0], 4));
    }
}
