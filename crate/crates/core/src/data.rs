//! Synthetic captioned shapes.
//!
//! One colored shape on a dark gray canvas, rasterized without anti-aliasing
//! so every pixel is either exactly the shape color or exactly the
//! background. Captions mix content words with filler words from templates;
//! some templates are reserved for evaluation.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{Prompt, Vocab, COLORS, FILLER, SHAPES, SIZES};
use crate::tensor::Tensor;

pub const BACKGROUND: [f64; 3] = [0.2, 0.2, 0.2];
/// Grid centers as fractions of the canvas.
pub const GRID: [f64; 3] = [0.35, 0.5, 0.65];
/// Radius fractions for small and large shapes.
pub const RADIUS: [f64; 2] = [0.22, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring];

    pub fn word(self) -> &'static str {
        SHAPES[self as usize]
    }
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Magenta];

    pub fn word(self) -> &'static str {
        COLORS[self as usize]
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Magenta => [1.0, 0.0, 1.0],
        }
    }

    pub fn from_word(w: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.word() == w)
    }

    /// Palette color nearest to `rgb` in Euclidean distance.
    pub fn nearest(rgb: [f64; 3]) -> Color {
        let d = |c: Color| c.rgb().iter().zip(rgb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        Color::ALL
            .into_iter()
            .min_by(|&a, &b| d(a).total_cmp(&d(b)))
            .expect("palette is nonempty")
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        SIZES[self as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Grid cell `(row, col)`, each in `0..3`.
    pub cell: (usize, usize),
}

impl SceneSpec {
    /// Every combination of shape, color, size and grid cell.
    pub fn all() -> Vec<SceneSpec> {
        let mut out = Vec::new();
        for shape in Shape::ALL {
            for color in Color::ALL {
                for size in Size::ALL {
                    for row in 0..3 {
                        for col in 0..3 {
                            out.push(SceneSpec {
                                shape,
                                color,
                                size,
                                cell: (row, col),
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Stable 64-bit FNV-1a hash of the fields.
    pub fn hash64(&self) -> u64 {
        let bytes = [
            self.shape as u8,
            self.color as u8,
            self.size as u8,
            self.cell.0 as u8,
            self.cell.1 as u8,
        ];
        bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
    }

    pub fn mirrored(&self) -> SceneSpec {
        SceneSpec {
            cell: (self.cell.0, 2 - self.cell.1),
            ..*self
        }
    }
}

/// Half-extent of the shape's bounding box in units of its radius.
fn extent_factor(shape: Shape) -> f64 {
    match shape {
        Shape::Triangle => 1.1,
        _ => 1.0,
    }
}

fn inside(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.16 * r * r
        }
        Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        Shape::Cross => {
            let arm = 0.4 * r;
            (dx.abs() <= r && dy.abs() <= arm) || (dy.abs() <= r && dx.abs() <= arm)
        }
        Shape::Triangle => {
            let h = 1.1 * r;
            if dy < -h || dy > h {
                return false;
            }
            dx.abs() <= h * (dy + h) / (2.0 * h)
        }
    }
}

/// Analytic area of the shape, in squared radius units.
pub fn area_factor(shape: Shape) -> f64 {
    use std::f64::consts::PI;
    match shape {
        Shape::Circle => PI,
        Shape::Ring => (1.0 - 0.16) * PI,
        Shape::Square => 1.7 * 1.7,
        Shape::Cross => 2.0 * 2.0 * 0.8 - 0.8 * 0.8,
        Shape::Triangle => 0.5 * 2.2 * 2.2,
    }
}

/// Rasterize `spec` to `[3, H, W]` in `[0, 1]`. Pixel centers are sampled; no anti-aliasing.
pub fn render_scene(spec: &SceneSpec, h: usize, w: usize) -> Result<Tensor> {
    if h < 16 || w < 16 {
        return Err(Error::Config(format!("canvas {h}x{w} smaller than 16x16")));
    }
    if spec.cell.0 > 2 || spec.cell.1 > 2 {
        return Err(Error::Data(format!("grid cell {:?} outside 3x3", spec.cell)));
    }
    let side = h.min(w) as f64;
    let r = RADIUS[spec.size as usize] * side;
    let cy = GRID[spec.cell.0] * h as f64;
    let cx = GRID[spec.cell.1] * w as f64;
    let e = extent_factor(spec.shape) * r;
    if cx - e < 0.0 || cy - e < 0.0 || cx + e > w as f64 || cy + e > h as f64 {
        return Err(Error::Data(format!("{spec:?} does not fit a {h}x{w} canvas")));
    }
    let rgb = spec.color.rgb();
    let mut out = Tensor::zeros(&[3, h, w]);
    let data = out.data_mut();
    for i in 0..h {
        for j in 0..w {
            let dx = j as f64 + 0.5 - cx;
            let dy = i as f64 + 0.5 - cy;
            let c = if inside(spec.shape, dx, dy, r) { rgb } else { BACKGROUND };
            for k in 0..3 {
                data[(k * h + i) * w + j] = c[k];
            }
        }
    }
    Ok(out)
}

/// Fraction of pixels that differ from the background.
pub fn coverage(img: &Tensor) -> f64 {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    let n = (0..h * w)
        .filter(|&p| (0..3).any(|k| d[k * h * w + p] != BACKGROUND[k]))
        .count();
    n as f64 / (h * w) as f64
}

/// Mirror a `[C, H, W]` image left to right.
pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let w = img.shape()[img.rank() - 1];
    let d = img.data();
    Tensor::from_fn(img.shape(), |idx| {
        let j = idx % w;
        d[idx - j + (w - 1 - j)]
    })
}

/// Caption templates. `{s}`, `{c}`, `{h}` are size, color and shape.
pub const TEMPLATES: [&str; 9] = [
    "a {c} {h} .",
    "the {s} {c} {h} .",
    "a photo with a {c} {h}",
    "stock photo a {s} {c} {h}",
    "free stock photo the {c} {h}",
    "a {s} {c} {h} on the photo",
    "the {c} {h} with a photo .",
    "a {c} {h} on a free photo .",
    "the photo with the {s} {c} {h}",
];

/// Templates reserved for evaluation prompts.
pub const HELD_OUT_TEMPLATES: [usize; 3] = [6, 7, 8];

pub fn caption_words(spec: &SceneSpec, template: usize) -> Result<Vec<String>> {
    let t = TEMPLATES
        .get(template)
        .ok_or_else(|| Error::Data(format!("template {template} out of range")))?;
    Ok(t.split_whitespace()
        .map(|w| match w {
            "{s}" => spec.size.word().to_string(),
            "{c}" => spec.color.word().to_string(),
            "{h}" => spec.shape.word().to_string(),
            other => other.to_string(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// Split assignment by spec hash: roughly one fifth of scenes are evaluation scenes.
pub fn split_of(spec: &SceneSpec) -> Split {
    if spec.hash64().is_multiple_of(5) {
        Split::Eval
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub spec: SceneSpec,
    pub template: usize,
    pub prompt: Prompt,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub specs: Vec<SceneSpec>,
    pub templates: Vec<usize>,
    pub image_size: usize,
    pub max_tokens: usize,
    pub vocab: Vocab,
}

impl Dataset {
    /// The standard split: training scenes with training templates, or evaluation scenes with held-out ones.
    pub fn standard(split: Split, vocab: &Vocab, image_size: usize, max_tokens: usize) -> Result<Self> {
        let specs: Vec<SceneSpec> = SceneSpec::all().into_iter().filter(|s| split_of(s) == split).collect();
        let templates = (0..TEMPLATES.len())
            .filter(|t| HELD_OUT_TEMPLATES.contains(t) == (split == Split::Eval))
            .collect();
        Dataset::new(specs, templates, vocab, image_size, max_tokens)
    }

    pub fn new(specs: Vec<SceneSpec>, templates: Vec<usize>, vocab: &Vocab, image_size: usize, max_tokens: usize) -> Result<Self> {
        if specs.is_empty() || templates.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        for s in &specs {
            render_scene(s, image_size, image_size)?;
        }
        Ok(Dataset {
            specs,
            templates,
            image_size,
            max_tokens,
            vocab: vocab.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len() * self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn example(&self, spec_index: usize, template: usize) -> Result<Example> {
        let spec = self.specs[spec_index];
        let words = caption_words(&spec, template)?;
        let ids = words
            .iter()
            .map(|w| {
                self.vocab
                    .id(w)
                    .ok_or_else(|| Error::Data(format!("caption word '{w}' not in vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Example {
            spec,
            template,
            prompt: Prompt::from_word_ids(&ids, self.max_tokens)?,
        })
    }

    /// All `(spec, template)` pairs in order.
    pub fn examples(&self) -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.specs.len() {
            for &t in &self.templates {
                out.push(self.example(i, t)?);
            }
        }
        Ok(out)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Example> {
        let i = rng.gen_range(0..self.specs.len());
        let t = self.templates[rng.gen_range(0..self.templates.len())];
        self.example(i, t)
    }

    /// One JSON record per example.
    pub fn write_manifest(&self, out: &mut impl Write) -> Result<()> {
        for ex in self.examples()? {
            let rec = ManifestRecord {
                spec: ex.spec,
                caption: caption_words(&ex.spec, ex.template)?,
                template: ex.template,
                split: split_of(&ex.spec),
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(flatten)]
    pub spec: SceneSpec,
    pub caption: Vec<String>,
    pub template: usize,
    pub split: Split,
}

pub fn read_manifest(input: impl BufRead) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("manifest line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

/// Pixels farther than this from the background count as foreground.
const FOREGROUND_DISTANCE: f64 = 0.25;

/// The palette color of the dominant foreground cluster of a `[3, H, W]` image.
///
/// Foreground pixels are grouped by nearest palette color; the largest group's
/// mean color is then mapped to its nearest palette entry. `None` when the
/// image has no foreground.
pub fn dominant_color(img: &Tensor) -> Option<Color> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    let mut sums = [[0.0f64; 3]; 5];
    let mut counts = [0usize; 5];
    for p in 0..h * w {
        let rgb = [d[p], d[h * w + p], d[2 * h * w + p]];
        let dist2: f64 = rgb.iter().zip(BACKGROUND).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist2 <= FOREGROUND_DISTANCE * FOREGROUND_DISTANCE {
            continue;
        }
        let c = Color::nearest(rgb) as usize;
        counts[c] += 1;
        for k in 0..3 {
            sums[c][k] += rgb[k];
        }
    }
    let best = (0..5).max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))?;
    if counts[best] == 0 {
        return None;
    }
    let n = counts[best] as f64;
    Some(Color::nearest([sums[best][0] / n, sums[best][1] / n, sums[best][2] / n]))
}

/// True when every caption word is either content or filler and both kinds appear at least twice.
pub fn caption_is_well_formed(words: &[String]) -> bool {
    let content = words
        .iter()
        .filter(|w| SHAPES.contains(&w.as_str()) || COLORS.contains(&w.as_str()) || SIZES.contains(&w.as_str()))
        .count();
    let filler = words.iter().filter(|w| FILLER.contains(&w.as_str())).count();
    content >= 2 && filler >= 2 && content + filler == words.len()
}
