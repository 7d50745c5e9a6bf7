//! Deterministic synthetic image-text data.
//!
//! Every example starts from a latent scene: a row of objects, each with a
//! shape and a color. Images are rendered from the scene in two ways, as
//! region features (a fixed random projection of the object attributes,
//! standing in for a frozen detector) and as raw pixel patches. Captions and
//! downstream questions are token sequences over the same attribute
//! vocabulary, so pre-training and every downstream task share one latent
//! structure.

use std::fmt;
use std::io::Write;
use std::sync::OnceLock;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::sha256;
use crate::error::{Error, Result};
use crate::rng::{derive_indexed, derive_seed, seeded};
use crate::tensor::Tensor;

pub const N_COLORS: usize = 4;
pub const N_SHAPES: usize = 6;
/// Objects per scene; also the image sequence length.
pub const N_OBJECTS: usize = 4;
pub const TXT_LEN: usize = 5;
pub const REGION_DIM: usize = 16;
pub const PATCH_SIDE: usize = 4;
pub const PATCH_CHANNELS: usize = 3;
pub const PATCH_DIM: usize = PATCH_SIDE * PATCH_SIDE * PATCH_CHANNELS;
pub const MASK_RATE: f64 = 0.15;

pub mod vocab {
    use super::{N_COLORS, N_SHAPES};

    pub const PAD: usize = 0;
    pub const CLS: usize = 1;
    pub const MASK: usize = 2;
    pub const SEP: usize = 3;
    pub const COLOR0: usize = 4;
    pub const SHAPE0: usize = COLOR0 + N_COLORS;
    pub const WHAT_COLOR: usize = SHAPE0 + N_SHAPES;
    pub const WHAT_SHAPE: usize = WHAT_COLOR + 1;
    pub const HOW_MANY: usize = WHAT_COLOR + 2;
    pub const IS_THERE: usize = WHAT_COLOR + 3;
    pub const WHERE: usize = WHAT_COLOR + 4;
    pub const SAME_COLOR: usize = WHAT_COLOR + 5;
    pub const SIZE: usize = SAME_COLOR + 1;

    pub fn color(c: usize) -> usize {
        COLOR0 + c
    }
    pub fn shape(s: usize) -> usize {
        SHAPE0 + s
    }
    pub fn as_color(tok: usize) -> Option<usize> {
        (COLOR0..SHAPE0).contains(&tok).then(|| tok - COLOR0)
    }
    pub fn as_shape(tok: usize) -> Option<usize> {
        (SHAPE0..WHAT_COLOR).contains(&tok).then(|| tok - SHAPE0)
    }
}

pub const VOCAB_SIZE: usize = vocab::SIZE;

const WORLD_SEED: u64 = 0x005e_ed0f_7e57;
const REGION_NOISE: f64 = 0.1;
const PIXEL_NOISE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Object {
    pub shape: usize,
    pub color: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Scene {
    pub objects: [Object; N_OBJECTS],
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Scene {
            objects: std::array::from_fn(|_| Object {
                shape: rng.random_range(0..N_SHAPES),
                color: rng.random_range(0..N_COLORS),
            }),
        }
    }

    fn contains(&self, o: Object) -> bool {
        self.objects.contains(&o)
    }
}

/// Fixed renderer shared by every dataset.
struct World {
    /// `[N_SHAPES + N_COLORS, REGION_DIM]` attribute projection.
    projection: Vec<f64>,
    /// One binary `PATCH_SIDE²` template per shape.
    templates: Vec<[f64; PATCH_SIDE * PATCH_SIDE]>,
    palette: [[f64; PATCH_CHANNELS]; N_COLORS],
}

fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let mut rng = seeded(WORLD_SEED);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let projection = (0..(N_SHAPES + N_COLORS) * REGION_DIM)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let templates = (0..N_SHAPES)
            .map(|_| {
                let mut cells: Vec<usize> = (0..PATCH_SIDE * PATCH_SIDE).collect();
                cells.shuffle(&mut rng);
                let mut t = [0.0; PATCH_SIDE * PATCH_SIDE];
                for &c in &cells[..PATCH_SIDE * PATCH_SIDE / 2] {
                    t[c] = 1.0;
                }
                t
            })
            .collect();
        let palette = [
            [0.9, 0.1, 0.1],
            [0.1, 0.8, 0.2],
            [0.15, 0.2, 0.9],
            [0.9, 0.85, 0.1],
        ];
        World {
            projection,
            templates,
            palette,
        }
    })
}

fn render_regions(scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w = world();
    let noise = Normal::new(0.0, REGION_NOISE).unwrap();
    let mut out = Vec::with_capacity(N_OBJECTS * REGION_DIM);
    for o in &scene.objects {
        for d in 0..REGION_DIM {
            let v = w.projection[o.shape * REGION_DIM + d] + w.projection[(N_SHAPES + o.color) * REGION_DIM + d];
            out.push(v + noise.sample(rng));
        }
    }
    out
}

fn render_patches(scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w = world();
    let noise = Normal::new(0.0, PIXEL_NOISE).unwrap();
    let mut out = Vec::with_capacity(N_OBJECTS * PATCH_DIM);
    for o in &scene.objects {
        for px in 0..PATCH_SIDE * PATCH_SIDE {
            for ch in 0..PATCH_CHANNELS {
                let v = w.templates[o.shape][px] * w.palette[o.color][ch];
                out.push(v + noise.sample(rng));
            }
        }
    }
    out
}

/// How images are presented to a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageEncoding {
    /// Pre-extracted region features, one vector per object.
    Regions,
    /// Raw pixel patches flattened to vectors.
    Patches,
}

impl ImageEncoding {
    pub fn feature_dim(self) -> usize {
        match self {
            ImageEncoding::Regions => REGION_DIM,
            ImageEncoding::Patches => PATCH_DIM,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
        })
    }
}

/// Generative rule that maps a scene and a question to an answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// Color of the object with a given shape.
    ColorQuery,
    /// Shape of the object with a given color.
    ShapeQuery,
    /// Number of objects with a given color.
    Count,
    /// Whether a (color, shape) object is present.
    Exists,
    /// Position of the (color, shape) object.
    Locate,
    /// Whether the objects with two given shapes share a color.
    SameColor,
}

impl Relation {
    pub fn class_count(self) -> usize {
        match self {
            Relation::ColorQuery => N_COLORS,
            Relation::ShapeQuery => N_SHAPES,
            Relation::Count => N_OBJECTS + 1,
            Relation::Exists | Relation::SameColor => 2,
            Relation::Locate => N_OBJECTS,
        }
    }

    /// The noiseless answer, computed from latents and question tokens.
    pub fn answer(self, scene: &Scene, tokens: &[usize]) -> Option<usize> {
        let objs = &scene.objects;
        match self {
            Relation::ColorQuery => {
                let s = vocab::as_shape(tokens[2])?;
                objs.iter().find(|o| o.shape == s).map(|o| o.color)
            }
            Relation::ShapeQuery => {
                let c = vocab::as_color(tokens[2])?;
                objs.iter().find(|o| o.color == c).map(|o| o.shape)
            }
            Relation::Count => {
                let c = vocab::as_color(tokens[2])?;
                Some(objs.iter().filter(|o| o.color == c).count())
            }
            Relation::Exists => {
                let o = Object {
                    color: vocab::as_color(tokens[2])?,
                    shape: vocab::as_shape(tokens[3])?,
                };
                Some(usize::from(scene.contains(o)))
            }
            Relation::Locate => {
                let o = Object {
                    color: vocab::as_color(tokens[2])?,
                    shape: vocab::as_shape(tokens[3])?,
                };
                objs.iter().position(|x| *x == o)
            }
            Relation::SameColor => {
                let (sa, sb) = (vocab::as_shape(tokens[2])?, vocab::as_shape(tokens[3])?);
                let a = objs.iter().find(|o| o.shape == sa)?;
                let b = objs.iter().find(|o| o.shape == sb)?;
                Some(usize::from(a.color == b.color))
            }
        }
    }

    /// Sample a scene and question whose answer is `label`.
    fn generate(self, label: usize, rng: &mut ChaCha8Rng) -> (Scene, Vec<usize>) {
        let mut tokens = vec![vocab::PAD; TXT_LEN];
        tokens[0] = vocab::CLS;
        let scene = match self {
            Relation::ColorQuery => {
                let mut shapes: Vec<usize> = (0..N_SHAPES).collect();
                shapes.shuffle(rng);
                let target = rng.random_range(0..N_OBJECTS);
                let mut scene = Scene::random(rng);
                for (i, o) in scene.objects.iter_mut().enumerate() {
                    o.shape = shapes[i];
                }
                scene.objects[target].color = label;
                tokens[1] = vocab::WHAT_COLOR;
                tokens[2] = vocab::shape(shapes[target]);
                scene
            }
            Relation::ShapeQuery => {
                let color = rng.random_range(0..N_COLORS);
                let target = rng.random_range(0..N_OBJECTS);
                let others: Vec<usize> = (0..N_COLORS).filter(|&c| c != color).collect();
                let mut scene = Scene::random(rng);
                for (i, o) in scene.objects.iter_mut().enumerate() {
                    o.color = if i == target { color } else { *others.choose(rng).unwrap() };
                }
                scene.objects[target].shape = label;
                tokens[1] = vocab::WHAT_SHAPE;
                tokens[2] = vocab::color(color);
                scene
            }
            Relation::Count => {
                let color = rng.random_range(0..N_COLORS);
                let others: Vec<usize> = (0..N_COLORS).filter(|&c| c != color).collect();
                let mut slots: Vec<usize> = (0..N_OBJECTS).collect();
                slots.shuffle(rng);
                let mut scene = Scene::random(rng);
                for (rank, &i) in slots.iter().enumerate() {
                    scene.objects[i].color = if rank < label { color } else { *others.choose(rng).unwrap() };
                }
                tokens[1] = vocab::HOW_MANY;
                tokens[2] = vocab::color(color);
                scene
            }
            Relation::Exists => {
                let query = Object {
                    color: rng.random_range(0..N_COLORS),
                    shape: rng.random_range(0..N_SHAPES),
                };
                let scene = loop {
                    let mut scene = Scene::random(rng);
                    let mut slots: Vec<usize> = (0..N_OBJECTS).collect();
                    slots.shuffle(rng);
                    // distractors that share one attribute with the query
                    scene.objects[slots[0]].color = query.color;
                    scene.objects[slots[1]].shape = query.shape;
                    if label == 1 {
                        scene.objects[slots[2]] = query;
                    }
                    if scene.contains(query) == (label == 1) {
                        break scene;
                    }
                };
                tokens[1] = vocab::IS_THERE;
                tokens[2] = vocab::color(query.color);
                tokens[3] = vocab::shape(query.shape);
                scene
            }
            Relation::Locate => {
                let query = Object {
                    color: rng.random_range(0..N_COLORS),
                    shape: rng.random_range(0..N_SHAPES),
                };
                let scene = loop {
                    let mut scene = Scene::random(rng);
                    scene.objects[label] = query;
                    if scene.objects.iter().filter(|o| **o == query).count() == 1 {
                        break scene;
                    }
                };
                tokens[1] = vocab::WHERE;
                tokens[2] = vocab::color(query.color);
                tokens[3] = vocab::shape(query.shape);
                scene
            }
            Relation::SameColor => {
                let mut shapes: Vec<usize> = (0..N_SHAPES).collect();
                shapes.shuffle(rng);
                let mut scene = Scene::random(rng);
                for (i, o) in scene.objects.iter_mut().enumerate() {
                    o.shape = shapes[i];
                }
                let mut slots: Vec<usize> = (0..N_OBJECTS).collect();
                slots.shuffle(rng);
                let (a, b) = (slots[0], slots[1]);
                let ca = scene.objects[a].color;
                scene.objects[b].color = if label == 1 {
                    ca
                } else {
                    (ca + rng.random_range(1..N_COLORS)) % N_COLORS
                };
                tokens[1] = vocab::SAME_COLOR;
                tokens[2] = vocab::shape(scene.objects[a].shape);
                tokens[3] = vocab::shape(scene.objects[b].shape);
                scene
            }
        };
        (scene, tokens)
    }
}

/// A downstream task: a relation plus label noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub class_count: usize,
    pub relation: Relation,
    /// Probability that a label is replaced by a uniformly drawn class.
    pub difficulty: f64,
}

impl TaskSpec {
    pub fn new(task_id: &str, relation: Relation, difficulty: f64) -> Self {
        TaskSpec {
            task_id: task_id.to_string(),
            class_count: relation.class_count(),
            relation,
            difficulty,
        }
    }

    /// The five downstream tasks used by default.
    pub fn default_suite() -> Vec<TaskSpec> {
        vec![
            TaskSpec::new("color_query", Relation::ColorQuery, 0.05),
            TaskSpec::new("shape_query", Relation::ShapeQuery, 0.05),
            TaskSpec::new("exists", Relation::Exists, 0.05),
            TaskSpec::new("same_color", Relation::SameColor, 0.05),
            TaskSpec::new("count", Relation::Count, 0.05),
        ]
    }

    /// Every task this crate knows how to generate by name.
    pub fn catalog() -> Vec<TaskSpec> {
        let mut all = Self::default_suite();
        all.push(TaskSpec::new("locate", Relation::Locate, 0.05));
        all
    }

    pub fn lookup(task_id: &str) -> Result<TaskSpec> {
        Self::catalog()
            .into_iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::config("task", format!("unknown task_id `{task_id}`")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_id.is_empty() {
            return Err(Error::config("task_id", "must not be empty"));
        }
        if self.class_count != self.relation.class_count() {
            return Err(Error::config(
                "class_count",
                format!(
                    "{:?} has {} classes, got {}",
                    self.relation,
                    self.relation.class_count(),
                    self.class_count
                ),
            ));
        }
        if !(self.difficulty > 0.0 && self.difficulty <= 1.0) {
            return Err(Error::config("difficulty", format!("must lie in (0, 1], got {}", self.difficulty)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub scene: Scene,
    pub tokens: Vec<usize>,
    pub label: usize,
    pub regions: Vec<f64>,
    pub patches: Vec<f64>,
}

impl Example {
    fn image(&self, enc: ImageEncoding) -> &[f64] {
        match enc {
            ImageEncoding::Regions => &self.regions,
            ImageEncoding::Patches => &self.patches,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for &t in &self.tokens {
            out.extend_from_slice(&(t as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.label as u32).to_le_bytes());
        for v in self.regions.iter().chain(&self.patches) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn hash(&self) -> [u8; 32] {
        sha256(&self.to_bytes())
    }
}

#[derive(Clone, Debug)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub split: Split,
    pub examples: Vec<Example>,
}

/// Generate `size` labeled examples of `spec` for one split.
///
/// Train and dev draw from disjoint seed substreams.
pub fn gen_task(spec: &TaskSpec, seed: u64, size: usize, split: Split) -> Result<TaskDataset> {
    spec.validate()?;
    if size == 0 {
        return Err(Error::config("size", "must be positive"));
    }
    let stream = derive_seed(seed, &format!("task/{}/{split}", spec.task_id));
    let examples = (0..size)
        .map(|i| {
            let mut rng = seeded(derive_indexed(stream, "example", i as u64));
            let clean = rng.random_range(0..spec.class_count);
            let (scene, tokens) = spec.relation.generate(clean, &mut rng);
            let label = if rng.random_bool(spec.difficulty) {
                rng.random_range(0..spec.class_count)
            } else {
                clean
            };
            let regions = render_regions(&scene, &mut rng);
            let patches = render_patches(&scene, &mut rng);
            Example {
                scene,
                tokens,
                label,
                regions,
                patches,
            }
        })
        .collect();
    Ok(TaskDataset {
        spec: spec.clone(),
        split,
        examples,
    })
}

/// Pre-training example with masked-modeling and matching annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct PretextExample {
    pub scene: Scene,
    /// Caption with masked positions replaced by [`vocab::MASK`].
    pub tokens: Vec<usize>,
    /// Whether the caption describes this image.
    pub matched: bool,
    /// (position, original token) for every masked caption token.
    pub masked_tokens: Vec<(usize, usize)>,
    /// Region indices whose features were zeroed.
    pub masked_regions: Vec<usize>,
    /// Unmasked renderings, the regression targets.
    pub regions: Vec<f64>,
    pub patches: Vec<f64>,
}

impl PretextExample {
    fn masked_image(&self, enc: ImageEncoding) -> Vec<f64> {
        let dim = enc.feature_dim();
        let mut img = match enc {
            ImageEncoding::Regions => self.regions.clone(),
            ImageEncoding::Patches => self.patches.clone(),
        };
        for &r in &self.masked_regions {
            img[r * dim..(r + 1) * dim].fill(0.0);
        }
        img
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![u8::from(self.matched)];
        for &t in &self.tokens {
            out.extend_from_slice(&(t as u32).to_le_bytes());
        }
        for &(p, t) in &self.masked_tokens {
            out.extend_from_slice(&(p as u32).to_le_bytes());
            out.extend_from_slice(&(t as u32).to_le_bytes());
        }
        out.extend(self.masked_regions.iter().map(|&r| r as u8));
        for v in self.regions.iter().chain(&self.patches) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct PretextCorpus {
    pub examples: Vec<PretextExample>,
}

fn caption(objects: &[Object]) -> Vec<usize> {
    let mut tokens = vec![vocab::CLS];
    for o in objects {
        tokens.push(vocab::color(o.color));
        tokens.push(vocab::shape(o.shape));
    }
    tokens
}

/// Pre-training corpus: captions of two objects, half of them mismatched,
/// with 15% of matched-pair tokens and regions masked.
pub fn gen_pretrain_corpus(seed: u64, size: usize) -> Result<PretextCorpus> {
    if size == 0 {
        return Err(Error::config("size", "must be positive"));
    }
    let stream = derive_seed(seed, "pretext");
    let examples = (0..size)
        .map(|i| {
            let mut rng = seeded(derive_indexed(stream, "example", i as u64));
            let scene = Scene::random(&mut rng);
            let matched = rng.random_bool(0.5);
            let described: Vec<Object> = if matched {
                let mut slots: Vec<usize> = (0..N_OBJECTS).collect();
                slots.shuffle(&mut rng);
                slots[..2].iter().map(|&s| scene.objects[s]).collect()
            } else {
                loop {
                    let other = Scene::random(&mut rng);
                    let pick = [other.objects[0], other.objects[1]];
                    if pick.iter().any(|o| !scene.contains(*o)) {
                        break pick.to_vec();
                    }
                }
            };
            let mut tokens = caption(&described);
            let mut masked_tokens = Vec::new();
            let mut masked_regions = Vec::new();
            if matched {
                for (pos, tok) in tokens.iter_mut().enumerate().skip(1) {
                    if rng.random_bool(MASK_RATE) {
                        masked_tokens.push((pos, *tok));
                        *tok = vocab::MASK;
                    }
                }
                for r in 0..N_OBJECTS {
                    if rng.random_bool(MASK_RATE) {
                        masked_regions.push(r);
                    }
                }
            }
            let regions = render_regions(&scene, &mut rng);
            let patches = render_patches(&scene, &mut rng);
            PretextExample {
                scene,
                tokens,
                matched,
                masked_tokens,
                masked_regions,
                regions,
                patches,
            }
        })
        .collect();
    Ok(PretextCorpus { examples })
}

/// Targets for the three pre-training objectives in one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PretextTargets {
    /// Flat `example * TXT_LEN + position` rows of masked tokens.
    pub mlm_rows: Vec<usize>,
    pub mlm_targets: Vec<usize>,
    /// Flat `example * N_OBJECTS + region` rows of masked regions.
    pub mrm_rows: Vec<usize>,
    /// `[mrm_rows.len(), feature_dim]`, absent when nothing is masked.
    pub mrm_targets: Option<Tensor>,
    /// 1 for matched pairs.
    pub itm_labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[b, N_OBJECTS, feature_dim]`
    pub img: Tensor,
    pub encoding: ImageEncoding,
    /// Row-major `[b, txt_len]`
    pub tokens: Vec<usize>,
    pub txt_len: usize,
    pub labels: Vec<usize>,
    pub pretext: Option<PretextTargets>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    /// Copy with every image feature set to zero.
    pub fn without_image(&self) -> Batch {
        let mut b = self.clone();
        b.img = Tensor::zeros(self.img.shape());
        b
    }
}

/// Anything that can be cut into batches.
pub trait Dataset {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn batch(&self, indices: &[usize], enc: ImageEncoding) -> Batch;
}

impl Dataset for TaskDataset {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn batch(&self, indices: &[usize], enc: ImageEncoding) -> Batch {
        let dim = enc.feature_dim();
        let mut img = Vec::with_capacity(indices.len() * N_OBJECTS * dim);
        let mut tokens = Vec::with_capacity(indices.len() * TXT_LEN);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let ex = &self.examples[i];
            img.extend_from_slice(ex.image(enc));
            tokens.extend_from_slice(&ex.tokens);
            labels.push(ex.label);
        }
        Batch {
            img: Tensor::new(vec![indices.len(), N_OBJECTS, dim], img).expect("image layout"),
            encoding: enc,
            tokens,
            txt_len: TXT_LEN,
            labels,
            pretext: None,
        }
    }
}

impl Dataset for PretextCorpus {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn batch(&self, indices: &[usize], enc: ImageEncoding) -> Batch {
        let dim = enc.feature_dim();
        let mut img = Vec::with_capacity(indices.len() * N_OBJECTS * dim);
        let mut tokens = Vec::with_capacity(indices.len() * TXT_LEN);
        let mut t = PretextTargets {
            mlm_rows: Vec::new(),
            mlm_targets: Vec::new(),
            mrm_rows: Vec::new(),
            mrm_targets: None,
            itm_labels: Vec::new(),
        };
        let mut mrm = Vec::new();
        for (b, &i) in indices.iter().enumerate() {
            let ex = &self.examples[i];
            img.extend(ex.masked_image(enc));
            tokens.extend_from_slice(&ex.tokens);
            for &(pos, tok) in &ex.masked_tokens {
                t.mlm_rows.push(b * TXT_LEN + pos);
                t.mlm_targets.push(tok);
            }
            let full = ex.image(enc);
            for &r in &ex.masked_regions {
                t.mrm_rows.push(b * N_OBJECTS + r);
                mrm.extend_from_slice(&full[r * dim..(r + 1) * dim]);
            }
            t.itm_labels.push(usize::from(ex.matched));
        }
        if !t.mrm_rows.is_empty() {
            t.mrm_targets = Some(Tensor::new(vec![t.mrm_rows.len(), dim], mrm).expect("mrm layout"));
        }
        Batch {
            img: Tensor::new(vec![indices.len(), N_OBJECTS, dim], img).expect("image layout"),
            encoding: enc,
            tokens,
            txt_len: TXT_LEN,
            labels: t.itm_labels.clone(),
            pretext: Some(t),
        }
    }
}

impl PretextExample {
    fn image(&self, enc: ImageEncoding) -> &[f64] {
        match enc {
            ImageEncoding::Regions => &self.regions,
            ImageEncoding::Patches => &self.patches,
        }
    }
}

/// Shuffled example order for one epoch.
pub fn epoch_order(len: usize, epoch_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seeded(epoch_seed));
    order
}

/// One epoch of batches in a seeded order; the last batch may be short.
pub fn batch_iter<'a, D: Dataset + ?Sized>(
    dataset: &'a D,
    batch_size: usize,
    epoch_seed: u64,
    enc: ImageEncoding,
) -> Result<impl Iterator<Item = Batch> + 'a> {
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(Error::config(
            "batch_size",
            format!("must lie in [1, {}], got {batch_size}", dataset.len()),
        ));
    }
    let order = epoch_order(dataset.len(), epoch_seed);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |idx| dataset.batch(&idx, enc)))
}

/// Debug dump: one tab-separated line per example with base64 payloads.
pub fn dump_dataset(dataset: &TaskDataset, out: &mut impl Write) -> Result<()> {
    for (i, ex) in dataset.examples.iter().enumerate() {
        let tokens: Vec<u8> = ex.tokens.iter().flat_map(|&t| (t as u32).to_le_bytes()).collect();
        let regions: Vec<u8> = ex.regions.iter().flat_map(|v| v.to_le_bytes()).collect();
        let patches: Vec<u8> = ex.patches.iter().flat_map(|v| v.to_le_bytes()).collect();
        writeln!(
            out,
            "{i}\t{}\t{}\t{}\t{}",
            ex.label,
            B64.encode(tokens),
            B64.encode(regions),
            B64.encode(patches)
        )?;
    }
    Ok(())
}
