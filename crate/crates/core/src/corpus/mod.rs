//! Procedural captioned scenes and their condition maps.
//!
//! A scene is a handful of flat-colored shapes on a flat background, rendered
//! with hard edges. Six deterministic image-to-condition transforms play the
//! role of edge, depth, segmentation, canny, normal and scribble detectors;
//! the first three are used for training and the rest only at evaluation.

mod store;
pub mod transforms;

pub use store::{
    build_corpus, corpus_fingerprint, AccessMode, Corpus, CorpusConfig, CorpusSummary,
    CorpusRecord, ManifestEntry, Split,
};
pub use transforms::apply_transform;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_RESOLUTION: usize = 32;
pub const MAX_SHAPES: usize = 4;
/// Minimum distance, in pixels, between a shape's bounding box and the canvas edge.
pub const CANVAS_MARGIN: i32 = 1;

/// The eight scene colors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Black,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Black,
    ];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
            Color::Cyan => [-1.0, 1.0, 1.0],
            Color::Magenta => [1.0, -1.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Black => [-1.0, -1.0, -1.0],
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Black => "black",
        }
    }

    /// Palette entry closest to `rgb` in Euclidean distance; ties go to the
    /// earlier palette entry.
    pub fn nearest(rgb: [f32; 3]) -> Color {
        let mut best = Color::Red;
        let mut best_d = f32::INFINITY;
        for c in Self::ALL {
            let p = c.rgb();
            let d = (0..3).map(|i| (p[i] - rgb[i]).powi(2)).sum::<f32>();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: Color,
    /// Center in pixel-corner coordinates: pixel `(x, y)` spans `[x, x+1) x [y, y+1)`.
    pub center: (i32, i32),
    /// Diameter, side or base length in pixels.
    pub size: u32,
    pub z: i32,
}

impl Shape {
    /// Whether the pixel whose center is at `(px + 0.5, py + 0.5)` is covered.
    pub fn covers(&self, px: usize, py: usize) -> bool {
        let dx = px as f32 + 0.5 - self.center.0 as f32;
        let dy = py as f32 + 0.5 - self.center.1 as f32;
        let half = self.size as f32 / 2.0;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= half * half,
            ShapeKind::Square => dx.abs() < half && dy.abs() < half,
            ShapeKind::Triangle => dy >= -half && dy < half && dx.abs() <= (dy + half) / 2.0,
        }
    }

    fn bbox(&self) -> (i32, i32, i32, i32) {
        let half = (self.size as i32 + 1) / 2;
        (
            self.center.0 - half,
            self.center.1 - half,
            self.center.0 + half,
            self.center.1 + half,
        )
    }
}

/// A renderable scene description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shapes: Vec<Shape>,
    pub background: Color,
    pub resolution: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.shapes.len() > MAX_SHAPES {
            return Err(Error::InvalidScene(format!(
                "scene must have 1..={MAX_SHAPES} shapes, got {}",
                self.shapes.len()
            )));
        }
        let res = self.resolution as i32;
        for (i, s) in self.shapes.iter().enumerate() {
            if s.size == 0 {
                return Err(Error::InvalidScene(format!("shape {i} has zero size")));
            }
            let (x0, y0, x1, y1) = s.bbox();
            if x0 < CANVAS_MARGIN || y0 < CANVAS_MARGIN || x1 > res - CANVAS_MARGIN || y1 > res - CANVAS_MARGIN {
                return Err(Error::InvalidScene(format!(
                    "shape {i} at {:?} size {} leaves the {res}x{res} canvas margin",
                    s.center, s.size
                )));
            }
            if self.shapes[..i].iter().any(|o| o.center == s.center) {
                return Err(Error::InvalidScene(format!("shape {i} duplicates a center {:?}", s.center)));
            }
        }
        Ok(())
    }

    /// Shapes sorted back to front.
    pub fn z_sorted(&self) -> Vec<Shape> {
        let mut shapes = self.shapes.clone();
        shapes.sort_by_key(|s| s.z);
        shapes
    }

    /// Samples a valid scene. Shape colors are distinct and differ from the background.
    pub fn random(seed: u64, resolution: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut colors = Color::ALL.to_vec();
        colors.shuffle(&mut rng);
        let background = colors[0];
        let count = rng.random_range(1..=MAX_SHAPES);
        let res = resolution as i32;
        let (min_size, max_size) = ((resolution / 4).max(2) as u32, (resolution / 2).max(3) as u32);
        let mut shapes: Vec<Shape> = Vec::with_capacity(count);
        for i in 0..count {
            let kind = ShapeKind::ALL[rng.random_range(0..3)];
            let size = rng.random_range(min_size..=max_size);
            let half = (size as i32 + 1) / 2;
            let lo = CANVAS_MARGIN + half;
            let hi = res - CANVAS_MARGIN - half;
            let center = loop {
                let c = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
                if shapes.iter().all(|s| s.center != c) {
                    break c;
                }
            };
            shapes.push(Shape {
                kind,
                color: colors[i + 1],
                center,
                size,
                z: i as i32,
            });
        }
        Self {
            shapes,
            background,
            resolution,
            seed,
        }
    }
}

/// A 3-channel square image with values in `[-1, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f32>,
}

/// Condition maps share the image layout.
pub type ConditionImage = Image;

impl Image {
    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * size * size);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, size * size));
        }
        Self { size, data }
    }

    pub fn from_vec(size: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * size * size, "image buffer length");
        Self { size, data }
    }

    /// Replicates a single-channel map into three channels.
    pub fn from_gray(size: usize, gray: &[f32]) -> Self {
        assert_eq!(gray.len(), size * size);
        let mut data = Vec::with_capacity(3 * size * size);
        for _ in 0..3 {
            data.extend_from_slice(gray);
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let n = self.size * self.size;
        let i = y * self.size + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let n = self.size * self.size;
        let i = y * self.size + x;
        self.data[i] = rgb[0];
        self.data[n + i] = rgb[1];
        self.data[2 * n + i] = rgb[2];
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v))
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        self
    }

    /// Values mapped to `[0, 1]`.
    pub fn unit_range(&self) -> Vec<f32> {
        self.data.iter().map(|v| (v + 1.0) / 2.0).collect()
    }

    /// 8-bit quantization used on disk: `round((v + 1) / 2 * 255)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(size: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), 3 * size * size);
        Self {
            size,
            data: bytes.iter().map(|&b| b as f32 / 255.0 * 2.0 - 1.0).collect(),
        }
    }

    /// Stacks images into an `(n, 3, size, size)` tensor.
    pub fn batch(images: &[&Image]) -> Tensor<f32> {
        let size = images[0].size;
        let mut data = Vec::with_capacity(images.len() * 3 * size * size);
        for im in images {
            assert_eq!(im.size, size, "mixed resolutions in batch");
            data.extend_from_slice(&im.data);
        }
        Tensor::from_vec(&[images.len(), 3, size, size], data)
    }

    /// Splits an `(n, 3, s, s)` tensor into images.
    pub fn unbatch(t: &Tensor<f32>) -> Vec<Image> {
        let (n, c, h, w) = t.dims4();
        assert!(c == 3 && h == w, "expected (n, 3, s, s), got {:?}", t.shape());
        (0..n).map(|i| Image::from_vec(h, t.item(i).to_vec())).collect()
    }
}

/// Draws the scene back to front with hard edges.
pub fn render_scene(spec: &SceneSpec) -> Result<Image> {
    spec.validate()?;
    let res = spec.resolution;
    let mut img = Image::filled(res, spec.background.rgb());
    for shape in spec.z_sorted() {
        let rgb = shape.color.rgb();
        for y in 0..res {
            for x in 0..res {
                if shape.covers(x, y) {
                    img.set_pixel(x, y, rgb);
                }
            }
        }
    }
    Ok(img)
}

/// Closed caption vocabulary. Index 0 is padding.
pub const VOCAB: [&str; 21] = [
    "<pad>",
    "a",
    "and",
    "red",
    "green",
    "blue",
    "yellow",
    "cyan",
    "magenta",
    "white",
    "black",
    "circle",
    "square",
    "triangle",
    "depth",
    "hed",
    "segmentation",
    "canny",
    "normal",
    "scribble",
    "maps",
];

pub fn token_id(token: &str) -> Option<usize> {
    VOCAB.iter().position(|&t| t == token)
}

/// Longest caption in tokens: three per shape and an "and" between shapes.
pub const MAX_CAPTION_TOKENS: usize = 4 * MAX_SHAPES - 1;

/// `"a {color} {kind}[ and a {color} {kind}]*"` over shapes in z-order.
pub fn caption(spec: &SceneSpec) -> String {
    spec.z_sorted()
        .iter()
        .map(|s| format!("a {} {}", s.color.name(), s.kind.name()))
        .collect::<Vec<_>>()
        .join(" and ")
}

/// The six condition transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransformKind {
    HedProxy,
    DepthProxy,
    SegProxy,
    CannyProxy,
    NormalProxy,
    ScribbleProxy,
}

impl TransformKind {
    pub const ALL: [TransformKind; 6] = [
        TransformKind::HedProxy,
        TransformKind::DepthProxy,
        TransformKind::SegProxy,
        TransformKind::CannyProxy,
        TransformKind::NormalProxy,
        TransformKind::ScribbleProxy,
    ];
    pub const TRAINING: [TransformKind; 3] =
        [TransformKind::HedProxy, TransformKind::DepthProxy, TransformKind::SegProxy];
    pub const HELD_OUT: [TransformKind; 3] = [
        TransformKind::CannyProxy,
        TransformKind::NormalProxy,
        TransformKind::ScribbleProxy,
    ];

    pub fn is_training(self) -> bool {
        Self::TRAINING.contains(&self)
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    /// File stem on disk and the first word of the forward-task label.
    pub fn name(self) -> &'static str {
        match self {
            TransformKind::HedProxy => "hed",
            TransformKind::DepthProxy => "depth",
            TransformKind::SegProxy => "segmentation",
            TransformKind::CannyProxy => "canny",
            TransformKind::NormalProxy => "normal",
            TransformKind::ScribbleProxy => "scribble",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}
