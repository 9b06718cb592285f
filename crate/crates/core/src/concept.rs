//! Procedural concept world and task synthesis.
//!
//! A scene is one subject (a shape class painted with an attribute bundle)
//! placed with a pose on a background, optionally next to a small companion
//! object. The renderer reports the exact subject coverage, which serves as
//! ground truth for mask and classifier checks.

use std::path::Path;

use candle_core::{Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::image_io::{self, quantize_u8};
use crate::prompt::{Prompt, Vocab, PLACEHOLDER};
use crate::rng::{self, LabRng};

pub const IMAGE_SIZE: usize = 32;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Ball,
    Box,
    Kite,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [Self::Ball, Self::Box, Self::Kite, Self::Cross];

    pub fn word(&self) -> &'static str {
        match self {
            Self::Ball => "ball",
            Self::Box => "box",
            Self::Kite => "kite",
            Self::Cross => "cross",
        }
    }

    /// Signed inside test in the subject's normalized frame.
    fn contains(&self, u: f32, v: f32) -> bool {
        match self {
            Self::Ball => u * u + v * v <= 1.0,
            Self::Box => u.abs().max(v.abs()) <= 0.82,
            Self::Kite => u.abs() + v.abs() <= 1.1,
            Self::Cross => {
                (u.abs() <= 0.38 && v.abs() <= 1.0) || (v.abs() <= 0.38 && u.abs() <= 1.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Grass,
    Brick,
    Snow,
    Night,
    Sand,
}

impl Background {
    pub const ALL: [Background; 5] = [Self::Grass, Self::Brick, Self::Snow, Self::Night, Self::Sand];

    pub fn word(&self) -> &'static str {
        match self {
            Self::Grass => "grass",
            Self::Brick => "brick",
            Self::Snow => "snow",
            Self::Night => "night",
            Self::Sand => "sand",
        }
    }

    fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        match self {
            Self::Grass => {
                if y < 11 {
                    [0.55, 0.75, 0.95]
                } else if (x + 2 * y) % 7 == 0 {
                    [0.18, 0.45, 0.15]
                } else {
                    [0.25, 0.6, 0.2]
                }
            }
            Self::Brick => {
                let row = y / 4;
                let off = if row % 2 == 0 { 0 } else { 4 };
                if y % 4 == 3 || (x + off) % 8 == 7 {
                    [0.8, 0.78, 0.72]
                } else {
                    [0.62, 0.3, 0.22]
                }
            }
            Self::Snow => {
                if (x * 7 + y * 13) % 17 == 0 {
                    [0.78, 0.82, 0.88]
                } else {
                    [0.93, 0.95, 0.97]
                }
            }
            Self::Night => {
                if (x * 11 + y * 5) % 37 == 0 {
                    [0.95, 0.95, 0.7]
                } else {
                    [0.06, 0.08, 0.22]
                }
            }
            Self::Sand => {
                if (y + (x / 5) % 2) % 6 == 0 {
                    [0.78, 0.66, 0.45]
                } else {
                    [0.88, 0.78, 0.56]
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaletteColor {
    Red,
    Orange,
    Yellow,
    Green,
    Cyan,
    Blue,
    Purple,
    Pink,
    White,
    Black,
}

impl PaletteColor {
    pub const ALL: [PaletteColor; 10] = [
        Self::Red,
        Self::Orange,
        Self::Yellow,
        Self::Green,
        Self::Cyan,
        Self::Blue,
        Self::Purple,
        Self::Pink,
        Self::White,
        Self::Black,
    ];

    pub fn rgb(&self) -> [f32; 3] {
        match self {
            Self::Red => [0.88, 0.12, 0.12],
            Self::Orange => [0.96, 0.55, 0.1],
            Self::Yellow => [0.96, 0.9, 0.15],
            Self::Green => [0.1, 0.75, 0.3],
            Self::Cyan => [0.1, 0.85, 0.88],
            Self::Blue => [0.12, 0.25, 0.9],
            Self::Purple => [0.55, 0.18, 0.78],
            Self::Pink => [0.98, 0.5, 0.75],
            Self::White => [0.98, 0.98, 0.98],
            Self::Black => [0.08, 0.08, 0.08],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marking {
    Plain,
    Stripes,
    Dots,
}

impl Marking {
    pub const ALL: [Marking; 3] = [Self::Plain, Self::Stripes, Self::Dots];
}

/// The appearance that makes a subject "personal".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeBundle {
    pub color: PaletteColor,
    pub marking: Marking,
    pub accent: PaletteColor,
}

impl AttributeBundle {
    pub fn random(rng: &mut LabRng) -> Self {
        let color = PaletteColor::ALL[rng.random_range(0..PaletteColor::ALL.len())];
        let mut accent = PaletteColor::ALL[rng.random_range(0..PaletteColor::ALL.len())];
        while accent == color {
            accent = PaletteColor::ALL[rng.random_range(0..PaletteColor::ALL.len())];
        }
        let marking = Marking::ALL[rng.random_range(0..Marking::ALL.len())];
        Self {
            color,
            marking,
            accent,
        }
    }

    /// Plain subjects ignore the accent, so two plain bundles of the same body
    /// color look identical.
    pub fn looks_like(&self, other: &AttributeBundle) -> bool {
        self.color == other.color
            && self.marking == other.marking
            && (self.marking == Marking::Plain || self.accent == other.accent)
    }

    fn paint(&self, u: f32, v: f32) -> [f32; 3] {
        let accent = match self.marking {
            Marking::Plain => false,
            Marking::Stripes => ((u + v) * 2.2).rem_euclid(1.0) < 0.45,
            Marking::Dots => {
                let cu = (u * 2.0).rem_euclid(1.0) - 0.5;
                let cv = (v * 2.0).rem_euclid(1.0) - 0.5;
                cu * cu + cv * cv < 0.09
            }
        };
        if accent {
            self.accent.rgb()
        } else {
            self.color.rgb()
        }
    }
}

/// Subject placement in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub cx: f32,
    pub cy: f32,
    pub scale: f32,
    /// Horizontal stretch; the vertical extent is `scale / aspect`.
    pub aspect: f32,
}

impl Pose {
    pub fn random(rng: &mut LabRng) -> Self {
        Self {
            cx: rng.random_range(9.0..23.0),
            cy: rng.random_range(10.0..23.0),
            scale: rng.random_range(5.0..10.0),
            aspect: rng.random_range(0.7..1.45),
        }
    }

    fn jitter(&self, rng: &mut LabRng, amount: f32) -> Self {
        Self {
            cx: self.cx + rng.random_range(-amount..=amount),
            cy: self.cy + rng.random_range(-amount..=amount),
            scale: self.scale * rng.random_range(0.95..=1.05),
            aspect: self.aspect,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Companion {
    pub color: PaletteColor,
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shape: ShapeClass,
    pub attrs: AttributeBundle,
    pub background: Background,
    pub companion: Option<Companion>,
    pub pose: Pose,
}

/// Rendered scene: `[0, 1]` RGB planes and the subject coverage map.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub pixels: Vec<f32>,
    pub coverage: Vec<f32>,
}

impl Rendered {
    pub fn tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.pixels.clone(),
            (3, IMAGE_SIZE, IMAGE_SIZE),
            &Device::Cpu,
        )?)
    }

    /// Ground-truth binary subject mask.
    pub fn mask(&self) -> Vec<bool> {
        self.coverage.iter().map(|&c| c >= 0.5).collect()
    }
}

pub fn render(scene: &Scene) -> Rendered {
    let n = IMAGE_SIZE;
    let mut pixels = vec![0f32; 3 * n * n];
    let mut coverage = vec![0f32; n * n];
    let p = scene.pose;
    let sx = p.scale * p.aspect;
    let sy = p.scale / p.aspect;
    for y in 0..n {
        for x in 0..n {
            let mut bg = scene.background.pixel(x, y);
            if let Some(c) = scene.companion {
                if x >= c.x && x < c.x + c.size && y >= c.y && y < c.y + c.size {
                    bg = c.color.rgb();
                }
            }
            let mut acc = [0f32; 3];
            let mut hits = 0usize;
            for sy_i in 0..SUPERSAMPLE {
                for sx_i in 0..SUPERSAMPLE {
                    let fx = x as f32 + (sx_i as f32 + 0.5) / SUPERSAMPLE as f32;
                    let fy = y as f32 + (sy_i as f32 + 0.5) / SUPERSAMPLE as f32;
                    let u = (fx - p.cx) / sx;
                    let v = (fy - p.cy) / sy;
                    if scene.shape.contains(u, v) {
                        let c = scene.attrs.paint(u, v);
                        for ch in 0..3 {
                            acc[ch] += c[ch];
                        }
                        hits += 1;
                    }
                }
            }
            let total = (SUPERSAMPLE * SUPERSAMPLE) as f32;
            let alpha = hits as f32 / total;
            for ch in 0..3 {
                let v = acc[ch] / total + (1.0 - alpha) * bg[ch];
                pixels[ch * n * n + y * n + x] = quantize_u8(v);
            }
            coverage[y * n + x] = alpha;
        }
    }
    Rendered { pixels, coverage }
}

fn random_companion(rng: &mut LabRng) -> Option<Companion> {
    if rng.random_bool(0.5) {
        let size = rng.random_range(3..6);
        let corner = rng.random_range(0..4);
        let (x, y) = match corner {
            0 => (1, 1),
            1 => (IMAGE_SIZE - size - 1, 1),
            2 => (1, IMAGE_SIZE - size - 1),
            _ => (IMAGE_SIZE - size - 1, IMAGE_SIZE - size - 1),
        };
        Some(Companion {
            color: PaletteColor::ALL[rng.random_range(0..PaletteColor::ALL.len())],
            x,
            y,
            size,
        })
    } else {
        None
    }
}

/// Scenes drawn from the whole world, for base training.
pub fn random_scene(rng: &mut LabRng) -> Scene {
    Scene {
        shape: ShapeClass::ALL[rng.random_range(0..ShapeClass::ALL.len())],
        attrs: AttributeBundle::random(rng),
        background: Background::ALL[rng.random_range(0..Background::ALL.len())],
        companion: random_companion(rng),
        pose: Pose::random(rng),
    }
}

/// The templated caption `a photo of a <class> on <background>`.
pub fn caption(vocab: &Vocab, shape: ShapeClass, background: Option<Background>) -> Result<Prompt> {
    let text = match background {
        Some(b) => format!("a photo of a {} on {}", shape.word(), b.word()),
        None => format!("a photo of a {}", shape.word()),
    };
    vocab.encode(&text)
}

/// Recipe for a personalized editing task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub shape: ShapeClass,
    pub personal: AttributeBundle,
    pub source_attrs: AttributeBundle,
    pub source_background: Background,
    pub source_companion: bool,
    pub source_pose: Pose,
    pub reference_pose: Pose,
    pub n_refs: usize,
}

impl TaskSpec {
    /// The five tasks used by the benchmark suite.
    pub fn standard_suite() -> Vec<TaskSpec> {
        use Marking::*;
        use PaletteColor::*;
        let b = |color, marking, accent| AttributeBundle {
            color,
            marking,
            accent,
        };
        let pose = |cx, cy, scale, aspect| Pose {
            cx,
            cy,
            scale,
            aspect,
        };
        vec![
            TaskSpec {
                name: "ball-stripes".into(),
                shape: ShapeClass::Ball,
                personal: b(Red, Stripes, Yellow),
                source_attrs: b(Blue, Plain, Blue),
                source_background: Background::Grass,
                source_companion: true,
                source_pose: pose(11.0, 19.0, 6.5, 1.35),
                reference_pose: pose(16.0, 16.0, 9.0, 0.9),
                n_refs: 3,
            },
            TaskSpec {
                name: "box-dots".into(),
                shape: ShapeClass::Box,
                personal: b(Yellow, Dots, Purple),
                source_attrs: b(Green, Plain, Green),
                source_background: Background::Brick,
                source_companion: false,
                source_pose: pose(20.0, 14.0, 6.0, 0.75),
                reference_pose: pose(15.0, 17.0, 8.5, 1.2),
                n_refs: 3,
            },
            TaskSpec {
                name: "kite-plain".into(),
                shape: ShapeClass::Kite,
                personal: b(Pink, Plain, Pink),
                source_attrs: b(Cyan, Stripes, Blue),
                source_background: Background::Night,
                source_companion: true,
                source_pose: pose(12.0, 13.0, 7.0, 1.3),
                reference_pose: pose(17.0, 18.0, 9.5, 0.85),
                n_refs: 3,
            },
            TaskSpec {
                name: "cross-stripes".into(),
                shape: ShapeClass::Cross,
                personal: b(Orange, Stripes, Black),
                source_attrs: b(Purple, Plain, Purple),
                source_background: Background::Snow,
                source_companion: false,
                source_pose: pose(19.0, 20.0, 7.0, 1.25),
                reference_pose: pose(15.0, 15.0, 10.0, 1.0),
                n_refs: 3,
            },
            TaskSpec {
                name: "ball-dots".into(),
                shape: ShapeClass::Ball,
                personal: b(White, Dots, Red),
                source_attrs: b(Orange, Plain, Orange),
                source_background: Background::Sand,
                source_companion: true,
                source_pose: pose(20.0, 13.0, 6.0, 0.8),
                reference_pose: pose(15.0, 17.0, 9.0, 1.15),
                n_refs: 3,
            },
        ]
    }
}

/// Generator record for every image of a task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorRecord {
    pub seed: u64,
    pub spec: TaskSpec,
    pub reference_scenes: Vec<Scene>,
    pub source_scene: Scene,
    /// Binary ground-truth subject masks, row-major.
    pub reference_masks: Vec<Vec<bool>>,
    pub source_mask: Vec<bool>,
}

/// One personalized editing problem.
#[derive(Debug, Clone)]
pub struct ConceptTask {
    pub name: String,
    /// `[0, 1]` images `(3, 32, 32)`.
    pub reference_images: Vec<Tensor>,
    pub reference_prompt: Prompt,
    pub source_image: Tensor,
    pub source_prompt: Prompt,
    pub source_class_token: u32,
    pub generator: GeneratorRecord,
}

impl ConceptTask {
    /// Source caption with the class token swapped for the placeholder.
    pub fn target_prompt(&self) -> Result<Prompt> {
        self.source_prompt.replace(self.source_class_token, PLACEHOLDER)
    }

    pub fn n_refs(&self) -> usize {
        self.reference_images.len()
    }
}

/// Deterministically renders a task from its spec.
pub fn synthesize_task(seed: u64, spec: &TaskSpec, vocab: &Vocab) -> Result<ConceptTask> {
    if spec.personal.looks_like(&spec.source_attrs) {
        return Err(LabError::InvalidSpec(format!(
            "task {}: personal and source attributes are identical",
            spec.name
        )));
    }
    if spec.n_refs == 0 || spec.n_refs > 8 {
        return Err(LabError::InvalidSpec(format!(
            "task {}: reference count must be in 1..=8",
            spec.name
        )));
    }
    let mut r = rng::child_rng(seed, &format!("task-{}", spec.name));
    let ref_backgrounds: Vec<Background> = Background::ALL
        .iter()
        .copied()
        .filter(|b| *b != spec.source_background)
        .collect();
    let mut reference_scenes = Vec::with_capacity(spec.n_refs);
    for i in 0..spec.n_refs {
        reference_scenes.push(Scene {
            shape: spec.shape,
            attrs: spec.personal,
            background: ref_backgrounds[i % ref_backgrounds.len()],
            companion: None,
            pose: spec.reference_pose.jitter(&mut r, 1.0),
        });
    }
    let source_scene = Scene {
        shape: spec.shape,
        attrs: spec.source_attrs,
        background: spec.source_background,
        companion: if spec.source_companion {
            Some(Companion {
                color: PaletteColor::White,
                x: 26,
                y: 2,
                size: 4,
            })
        } else {
            None
        },
        pose: spec.source_pose,
    };
    let refs: Vec<Rendered> = reference_scenes.iter().map(render).collect();
    let src = render(&source_scene);
    let class_token = vocab
        .id(spec.shape.word())
        .ok_or_else(|| LabError::InvalidSpec(format!("no token for {:?}", spec.shape)))?;
    Ok(ConceptTask {
        name: spec.name.clone(),
        reference_images: refs.iter().map(Rendered::tensor).collect::<Result<_>>()?,
        reference_prompt: vocab.encode("a photo of a [S]")?,
        source_image: src.tensor()?,
        source_prompt: caption(vocab, spec.shape, Some(spec.source_background))?,
        source_class_token: class_token,
        generator: GeneratorRecord {
            seed,
            spec: spec.clone(),
            reference_masks: refs.iter().map(Rendered::mask).collect(),
            source_mask: src.mask(),
            reference_scenes,
            source_scene,
        },
    })
}

/// Intersection over union of two binary masks.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Serialize, Deserialize)]
struct TaskFile {
    name: String,
    reference_prompt: Vec<u32>,
    reference_prompt_text: String,
    source_prompt: Vec<u32>,
    source_prompt_text: String,
    source_class_token: u32,
    placeholder_token: u32,
    generator: GeneratorRecord,
}

/// Writes `refs/*.png`, `source.png`, and `task.json` under `dir`.
pub fn save_task(task: &ConceptTask, vocab: &Vocab, dir: &Path) -> Result<()> {
    for (i, img) in task.reference_images.iter().enumerate() {
        image_io::save_rgb_png(img, &dir.join("refs").join(format!("{i:02}.png")))?;
    }
    image_io::save_rgb_png(&task.source_image, &dir.join("source.png"))?;
    let file = TaskFile {
        name: task.name.clone(),
        reference_prompt: task.reference_prompt.tokens().to_vec(),
        reference_prompt_text: vocab.decode(&task.reference_prompt),
        source_prompt: task.source_prompt.tokens().to_vec(),
        source_prompt_text: vocab.decode(&task.source_prompt),
        source_class_token: task.source_class_token,
        placeholder_token: PLACEHOLDER,
        generator: task.generator.clone(),
    };
    let path = dir.join("task.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&file)?).map_err(|e| LabError::io(&path, e))
}

pub fn load_task(dir: &Path, vocab: &Vocab) -> Result<ConceptTask> {
    let path = dir.join("task.json");
    let raw = std::fs::read(&path).map_err(|e| LabError::io(&path, e))?;
    let file: TaskFile = serde_json::from_slice(&raw)?;
    let mut refs = Vec::new();
    for i in 0..file.generator.spec.n_refs {
        refs.push(image_io::load_rgb_png(
            &dir.join("refs").join(format!("{i:02}.png")),
        )?);
    }
    Ok(ConceptTask {
        name: file.name,
        reference_images: refs,
        reference_prompt: Prompt::new(file.reference_prompt, vocab.len())?,
        source_image: image_io::load_rgb_png(&dir.join("source.png"))?,
        source_prompt: Prompt::new(file.source_prompt, vocab.len())?,
        source_class_token: file.source_class_token,
        generator: file.generator,
    })
}
