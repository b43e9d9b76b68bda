//! Procedural SEM-like line-space images with injected defects.
//!
//! Lines are vertical. Line `k` nominally occupies columns
//! `[k·pitch, k·pitch + line_width)`; the space after it runs up to the next
//! line. Defects are painted as unions of soft-edged rectangles on top of a
//! rendered pattern, and their annotation is the tight pixel bounds of the
//! painted core dilated by [`ANNOTATION_DILATION`] pixels.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::geometry::BBox;
use crate::imaging::{write_png, GrayImage};
use crate::{derive_seed, Error, Result};

pub const ANNOTATION_DILATION: f64 = 2.0;

/// Fraction of images assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DefectClass {
    SB,
    TB,
    LC,
    LB,
    MBH,
    MBNH,
}

impl DefectClass {
    pub const ALL: [DefectClass; 6] = [
        DefectClass::SB,
        DefectClass::TB,
        DefectClass::LC,
        DefectClass::LB,
        DefectClass::MBH,
        DefectClass::MBNH,
    ];

    pub fn code(self) -> &'static str {
        match self {
            DefectClass::SB => "SB",
            DefectClass::TB => "TB",
            DefectClass::LC => "LC",
            DefectClass::LB => "LB",
            DefectClass::MBH => "MBH",
            DefectClass::MBNH => "MBNH",
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            DefectClass::SB => "Single Bridge",
            DefectClass::TB => "Thin Bridge",
            DefectClass::LC => "Line Collapse",
            DefectClass::LB => "Line Break",
            DefectClass::MBH => "Multi-Bridge Horizontal",
            DefectClass::MBNH => "Multi-Bridge Non-Horizontal",
        }
    }
}

impl fmt::Display for DefectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for DefectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DefectClass::ALL
            .into_iter()
            .find(|c| c.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown defect class `{s}`")))
    }
}

/// Line-space rendering parameters. Every numeric default is a generator choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternSpec {
    pub width: usize,
    pub height: usize,
    pub line_pitch: usize,
    pub line_width: usize,
    pub line_intensity: f32,
    pub space_intensity: f32,
    /// Gaussian edge blur, pixels.
    pub edge_sigma: f64,
    /// Additive Gaussian noise, intensity units.
    pub noise_sigma: f64,
    /// Per-row edge jitter amplitude, pixels.
    pub line_edge_roughness: f64,
}

impl Default for PatternSpec {
    fn default() -> Self {
        PatternSpec {
            width: 512,
            height: 512,
            line_pitch: 24,
            line_width: 12,
            line_intensity: 0.75,
            space_intensity: 0.25,
            edge_sigma: 1.0,
            noise_sigma: 0.05,
            line_edge_roughness: 0.5,
        }
    }
}

impl PatternSpec {
    /// Small, low-noise images used by the acceptance runs.
    pub fn easy() -> Self {
        PatternSpec {
            width: 128,
            height: 128,
            ..PatternSpec::default()
        }
    }

    /// Full-size noisy images.
    pub fn hard() -> Self {
        PatternSpec {
            noise_sigma: 0.15,
            ..PatternSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("image size {}x{} is empty", self.width, self.height));
        }
        if self.line_width == 0 || self.line_width >= self.line_pitch {
            return bad(format!(
                "line_width {} must be in [1, line_pitch {})",
                self.line_width, self.line_pitch
            ));
        }
        for (name, v) in [
            ("line_intensity", self.line_intensity),
            ("space_intensity", self.space_intensity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("edge_sigma", self.edge_sigma),
            ("noise_sigma", self.noise_sigma),
            ("line_edge_roughness", self.line_edge_roughness),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        Ok(())
    }

    fn space_width(&self) -> f64 {
        (self.line_pitch - self.line_width) as f64
    }

    fn line_left(&self, k: usize) -> f64 {
        (k * self.line_pitch) as f64
    }

    fn line_right(&self, k: usize) -> f64 {
        self.line_left(k) + self.line_width as f64
    }

    fn line_count(&self) -> usize {
        self.width.div_ceil(self.line_pitch)
    }
}

/// One ground-truth defect: class and box with integer pixel corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "box", with = "integer_box")]
    pub bbox: BBox,
    pub class: DefectClass,
}

mod integer_box {
    use super::*;

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> std::result::Result<S::Ok, S::Error> {
        [
            b.x_min.round() as i64,
            b.y_min.round() as i64,
            b.x_max.round() as i64,
            b.y_max.round() as i64,
        ]
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BBox, D::Error> {
        let v = <[i64; 4]>::deserialize(d)?;
        Ok(BBox::new(v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64))
    }
}

/// Relative class weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassMix(pub BTreeMap<DefectClass, f64>);

impl ClassMix {
    /// Class imbalance of the fab dataset's defect counts (604/5029/498/20/86/98).
    pub fn imbalanced() -> Self {
        ClassMix(BTreeMap::from([
            (DefectClass::SB, 604.0),
            (DefectClass::TB, 5029.0),
            (DefectClass::LC, 498.0),
            (DefectClass::LB, 20.0),
            (DefectClass::MBH, 86.0),
            (DefectClass::MBNH, 98.0),
        ]))
    }

    /// Equal weight on every class that can appear alone (all but LB).
    pub fn uniform_single() -> Self {
        ClassMix(
            DefectClass::ALL
                .into_iter()
                .map(|c| (c, if c == DefectClass::LB { 0.0 } else { 1.0 }))
                .collect(),
        )
    }

    pub fn only(class: DefectClass) -> Self {
        ClassMix(BTreeMap::from([(class, 1.0)]))
    }

    pub fn weight(&self, c: DefectClass) -> f64 {
        self.0.get(&c).copied().unwrap_or(0.0)
    }

    fn total(&self) -> f64 {
        self.0.values().sum()
    }

    pub fn share(&self, c: DefectClass) -> f64 {
        self.weight(c) / self.total()
    }

    fn sample_excluding_lb(&self, rng: &mut impl Rng) -> DefectClass {
        let total: f64 = self
            .0
            .iter()
            .filter(|(c, _)| **c != DefectClass::LB)
            .map(|(_, w)| *w)
            .sum();
        let mut u = rng.random::<f64>() * total;
        let mut last = DefectClass::SB;
        for (&c, &w) in self.0.iter().filter(|(c, _)| **c != DefectClass::LB) {
            if w <= 0.0 {
                continue;
            }
            last = c;
            if u < w {
                return c;
            }
            u -= w;
        }
        last
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Path relative to the manifest's directory.
    pub file: String,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub pattern: PatternSpec,
    pub class_mix: ClassMix,
    pub double_defect_fraction: f64,
    pub records: Vec<ImageRecord>,
    /// Directory the manifest was loaded from; file paths resolve against it.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.file)
    }

    pub fn class_counts(&self) -> BTreeMap<DefectClass, usize> {
        let mut out: BTreeMap<DefectClass, usize> =
            DefectClass::ALL.into_iter().map(|c| (c, 0)).collect();
        for a in self.records.iter().flat_map(|r| &r.annotations) {
            *out.entry(a.class).or_default() += 1;
        }
        out
    }

    pub fn defect_count(&self) -> usize {
        self.records.iter().map(|r| r.annotations.len()).sum()
    }
}

/// Soft-edged rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Rect {
    fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }
}

/// Coverage of the interval `[a, b)` at pixel center `p`, blurred by `sigma`.
fn soft_interval(p: f64, a: f64, b: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return if p >= a && p < b { 1.0 } else { 0.0 };
    }
    (phi((p - a) / sigma) - phi((p - b) / sigma)).clamp(0.0, 1.0)
}

fn phi(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Separable Gaussian blur with zero padding; identity for `sigma == 0`.
fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |input: &[f64], horizontal: bool| {
        let mut out = vec![0f64; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let o = j as isize - r;
                    let (sx, sy) = if horizontal { (x + o, y) } else { (x, y + o) };
                    if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                        acc += k * input[sy as usize * w + sx as usize];
                    }
                }
                out[y as usize * w + x as usize] = acc / norm;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Smoothed per-row jitter in `[-amp, amp]`.
fn jitter_track(len: usize, amp: f64, rng: &mut impl Rng) -> Vec<f64> {
    if amp <= 0.0 {
        return vec![0.0; len];
    }
    let raw: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..=1.0)).collect();
    (0..len)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(len - 1);
            let s: f64 = raw[lo..=hi].iter().sum();
            amp * s / (hi - lo + 1) as f64
        })
        .collect()
}

fn noise_dist(sigma: f64) -> Option<Normal<f64>> {
    (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"))
}

/// Renders a defect-free line-space pattern; deterministic given the seed.
pub fn render_pattern(spec: &PatternSpec, seed: u64) -> Result<GrayImage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_lines = spec.line_count() + 1;
    let edges: Vec<(Vec<f64>, Vec<f64>)> = (0..n_lines)
        .map(|_| {
            (
                jitter_track(spec.height, spec.line_edge_roughness, &mut rng),
                jitter_track(spec.height, spec.line_edge_roughness, &mut rng),
            )
        })
        .collect();
    let noise = noise_dist(spec.noise_sigma);
    let (li, si) = (spec.line_intensity as f64, spec.space_intensity as f64);
    let reach = (3.0 * spec.edge_sigma + spec.line_edge_roughness).ceil() as usize + 1;
    let mut data = vec![0f32; spec.width * spec.height];
    for y in 0..spec.height {
        for x in 0..spec.width {
            let px = x as f64 + 0.5;
            let k = x / spec.line_pitch;
            let mut cov = 0.0f64;
            for kk in k.saturating_sub(1)..=(k + 1).min(n_lines - 1) {
                let l = spec.line_left(kk) + edges[kk].0[y];
                let r = spec.line_right(kk) + edges[kk].1[y];
                if px + reach as f64 >= l && px - reach as f64 <= r {
                    cov = cov.max(soft_interval(px, l, r, spec.edge_sigma));
                }
            }
            let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            data[y * spec.width + x] = (si + (li - si) * cov + n).clamp(0.0, 1.0) as f32;
        }
    }
    GrayImage::new(spec.width, spec.height, data)
}

/// A defect as painted geometry: regions set to line or space intensity.
struct DefectShape {
    /// Rectangles painted with `fill`.
    rects: Vec<Rect>,
    fill: f32,
    /// Extra rectangles painted with the opposite (space) intensity.
    erase: Vec<Rect>,
    /// Bright ridges.
    ridge: Vec<Rect>,
}

fn too_small(class: DefectClass, spec: &PatternSpec) -> Error {
    Error::Geometry(format!(
        "{}x{} image too small for a {} defect (pitch {})",
        spec.width, spec.height, class, spec.line_pitch
    ))
}

/// Space indices `k` (between line k and k+1) with `span` consecutive spaces
/// fully inside the image with a margin.
fn candidate_spaces(spec: &PatternSpec, span: usize) -> Vec<usize> {
    let margin = ANNOTATION_DILATION + 2.0;
    (0..spec.line_count())
        .filter(|&k| {
            spec.line_right(k) - 1.0 >= margin
                && spec.line_left(k + span) + 1.0 + margin <= spec.width as f64
        })
        .collect()
}

fn candidate_lines(spec: &PatternSpec) -> Vec<usize> {
    let margin = ANNOTATION_DILATION + 2.0;
    (0..spec.line_count())
        .filter(|&k| {
            spec.line_left(k) - 1.0 >= margin
                && spec.line_right(k) + 1.0 + margin <= spec.width as f64
        })
        .collect()
}

fn pick<T: Copy>(v: &[T], rng: &mut impl Rng) -> Option<T> {
    (!v.is_empty()).then(|| v[rng.random_range(0..v.len())])
}

/// Vertical start so that a band of `extent` rows fits with a margin.
fn pick_row(extent: f64, spec: &PatternSpec, rng: &mut impl Rng) -> Option<f64> {
    let margin = ANNOTATION_DILATION + 2.0;
    let hi = spec.height as f64 - extent - margin;
    (hi >= margin).then(|| rng.random_range(margin..=hi).floor())
}

fn bridge_rects(spec: &PatternSpec, k: usize, y0: f64, thickness: f64) -> Rect {
    Rect::new(
        spec.line_right(k) - 1.0,
        y0,
        spec.line_left(k + 1) + 1.0,
        y0 + thickness,
    )
}

/// Thin bridge: a neck of `t` rows widening where it meets the lines.
fn thin_bridge_rects(spec: &PatternSpec, k: usize, yc: f64, t: f64) -> Vec<Rect> {
    const FLARE: f64 = 4.0;
    let (a, b) = (spec.line_right(k) - 1.0, spec.line_left(k + 1) + 1.0);
    let mut rects = Vec::new();
    let mut x = a;
    while x < b {
        let d = (x - a).min(b - x - 1.0).max(0.0);
        let half = 0.5 * t + FLARE * (1.0 - d / 3.0).max(0.0);
        rects.push(Rect::new(x, yc - half, x + 1.0, yc + half));
        x += 1.0;
    }
    rects
}

fn plan_shape(
    class: DefectClass,
    spec: &PatternSpec,
    rng: &mut impl Rng,
    near_x: Option<f64>,
) -> Result<DefectShape> {
    let lw = spec.line_width as f64;
    let pitch = spec.line_pitch as f64;
    let line = spec.line_intensity;
    let space = spec.space_intensity;
    let err = || too_small(class, spec);
    let shape = match class {
        DefectClass::SB => {
            let k = pick(&candidate_spaces(spec, 1), rng).ok_or_else(err)?;
            let y0 = pick_row(lw, spec, rng).ok_or_else(err)?;
            DefectShape {
                rects: vec![bridge_rects(spec, k, y0, lw)],
                fill: line,
                erase: vec![],
                ridge: vec![],
            }
        }
        DefectClass::TB => {
            let k = pick(&candidate_spaces(spec, 1), rng).ok_or_else(err)?;
            let t = rng.random_range(1..=3) as f64;
            let y0 = pick_row(t + 10.0, spec, rng).ok_or_else(err)?;
            DefectShape {
                rects: thin_bridge_rects(spec, k, y0 + 5.0 + 0.5 * t, t),
                fill: 1.0,
                erase: vec![],
                ridge: vec![],
            }
        }
        DefectClass::LC => {
            let k = pick(&candidate_spaces(spec, 1), rng).ok_or_else(err)?;
            let frac = rng.random_range(0.25..=0.45);
            let extent = (frac * spec.height as f64).ceil().max(8.0);
            let y0 = pick_row(extent, spec, rng).ok_or_else(err)?;
            let shift = spec.space_width();
            let ramp = (extent / 8.0).max(1.0);
            let (mut rects, mut erase, mut ridge) = (vec![], vec![], vec![]);
            for r in 0..extent as usize {
                let yy = y0 + r as f64;
                let d = (r as f64 + 0.5).min(extent - r as f64 - 0.5);
                let s = (shift * (d / ramp).min(1.0)).round();
                if s < 1.0 {
                    continue;
                }
                // the leaning line keeps half its footprint and reaches across the space
                let left = spec.line_left(k);
                let foot = (0.5 * s).round();
                if foot >= 1.0 {
                    erase.push(Rect::new(left - 0.5, yy, left + foot, yy + 1.0));
                }
                rects.push(Rect::new(left + foot, yy, spec.line_right(k) + s + 0.5, yy + 1.0));
                if s >= shift {
                    let c = spec.line_left(k + 1);
                    ridge.push(Rect::new(c - 1.5, yy, c + 1.5, yy + 1.0));
                }
            }
            DefectShape {
                rects,
                fill: (line + 0.15).min(1.0),
                erase,
                ridge,
            }
        }
        DefectClass::LB => {
            let lines = candidate_lines(spec);
            let lines: Vec<usize> = match near_x {
                Some(cx) => lines
                    .into_iter()
                    .filter(|&k| {
                        let c = spec.line_left(k) + 0.5 * lw;
                        (c - cx).abs() <= 2.0 * pitch - 0.5 * lw && (c - cx).abs() >= 0.5 * pitch
                    })
                    .collect(),
                None => lines,
            };
            let k = pick(&lines, rng).ok_or_else(err)?;
            let gap = rng.random_range(4..=12) as f64;
            let y0 = pick_row(gap, spec, rng).ok_or_else(err)?;
            DefectShape {
                rects: vec![Rect::new(
                    spec.line_left(k) - 1.0,
                    y0,
                    spec.line_right(k) + 1.0,
                    y0 + gap,
                )],
                fill: space,
                erase: vec![],
                ridge: vec![],
            }
        }
        DefectClass::MBH => {
            let span = rng.random_range(2..=3);
            let span = if candidate_spaces(spec, span).is_empty() { 2 } else { span };
            let k = pick(&candidate_spaces(spec, span), rng).ok_or_else(err)?;
            let t = rng.random_range(6..=spec.line_width.max(6)) as f64;
            let y0 = pick_row(t, spec, rng).ok_or_else(err)?;
            DefectShape {
                rects: (0..span).map(|i| bridge_rects(spec, k + i, y0, t)).collect(),
                fill: line,
                erase: vec![],
                ridge: vec![],
            }
        }
        DefectClass::MBNH => {
            let span = rng.random_range(2..=3);
            let span = if candidate_spaces(spec, span).is_empty() { 2 } else { span };
            let k = pick(&candidate_spaces(spec, span), rng).ok_or_else(err)?;
            let t = rng.random_range(6..=spec.line_width.max(6)) as f64;
            let step = rng.random_range(3.0..=(0.5 * t).max(3.0)).round();
            let down = rng.random_bool(0.5);
            let extent = t + step * (span - 1) as f64;
            let y0 = pick_row(extent, spec, rng).ok_or_else(err)?;
            DefectShape {
                rects: (0..span)
                    .map(|i| {
                        let j = if down { i } else { span - 1 - i };
                        bridge_rects(spec, k + i, y0 + step * j as f64, t)
                    })
                    .collect(),
                fill: line,
                erase: vec![],
                ridge: vec![],
            }
        }
    };
    Ok(shape)
}

/// Paints `class` onto `img` and returns the painted image and its annotation.
pub fn inject_defect(
    img: &GrayImage,
    class: DefectClass,
    spec: &PatternSpec,
    seed: u64,
) -> Result<(GrayImage, Annotation)> {
    inject(img, class, spec, seed, None)
}

/// Like [`inject_defect`] but places the defect beside `anchor`
/// (an LB sits within two pitches of the anchor's horizontal center).
pub fn inject_defect_beside(
    img: &GrayImage,
    class: DefectClass,
    anchor: &Annotation,
    spec: &PatternSpec,
    seed: u64,
) -> Result<(GrayImage, Annotation)> {
    inject(img, class, spec, seed, Some(anchor.bbox.center().0))
}

fn inject(
    img: &GrayImage,
    class: DefectClass,
    spec: &PatternSpec,
    seed: u64,
    near_x: Option<f64>,
) -> Result<(GrayImage, Annotation)> {
    spec.validate()?;
    if img.width() != spec.width || img.height() != spec.height {
        return Err(Error::Geometry(format!(
            "image is {}x{} but the pattern spec is {}x{}",
            img.width(),
            img.height(),
            spec.width,
            spec.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = plan_shape(class, spec, &mut rng, near_x)?;
    let noise = noise_dist(spec.noise_sigma);
    let sigma = spec.edge_sigma;
    let mut out = img.clone();

    let layers: [(&[Rect], f32); 3] = [
        (&shape.erase, spec.space_intensity),
        (&shape.rects, shape.fill),
        (&shape.ridge, 1.0),
    ];
    let mut core = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (rects, value) in layers {
        if rects.is_empty() {
            continue;
        }
        let reach = (3.0 * sigma).ceil() + 1.0;
        let bx0 = rects.iter().map(|r| r.x0).fold(f64::INFINITY, f64::min) - reach;
        let by0 = rects.iter().map(|r| r.y0).fold(f64::INFINITY, f64::min) - reach;
        let bx1 = rects.iter().map(|r| r.x1).fold(f64::NEG_INFINITY, f64::max) + reach;
        let by1 = rects.iter().map(|r| r.y1).fold(f64::NEG_INFINITY, f64::max) + reach;
        let (xs, ys) = (bx0.max(0.0) as usize, by0.max(0.0) as usize);
        let xe = (bx1.ceil().max(0.0) as usize).min(spec.width);
        let ye = (by1.ceil().max(0.0) as usize).min(spec.height);
        if xe <= xs || ye <= ys {
            continue;
        }
        let (w, h) = (xe - xs, ye - ys);
        let mut mask = vec![0f64; w * h];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = ((xs + x) as f64 + 0.5, (ys + y) as f64 + 0.5);
                if rects
                    .iter()
                    .any(|r| px >= r.x0 && px < r.x1 && py >= r.y0 && py < r.y1)
                {
                    mask[y * w + x] = 1.0;
                    core.0 = core.0.min((xs + x) as f64);
                    core.1 = core.1.min((ys + y) as f64);
                    core.2 = core.2.max((xs + x) as f64 + 1.0);
                    core.3 = core.3.max((ys + y) as f64 + 1.0);
                }
            }
        }
        let alpha = gaussian_blur(&mask, w, h, sigma);
        for y in 0..h {
            for x in 0..w {
                let a = alpha[y * w + x];
                if a <= 1e-3 {
                    continue;
                }
                let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                let old = out.get(xs + x, ys + y) as f64;
                out.set(xs + x, ys + y, (old * (1.0 - a) + a * (value as f64 + n)) as f32);
            }
        }
    }
    if !core.0.is_finite() {
        return Err(too_small(class, spec));
    }
    let bbox = BBox::new(
        core.0 - ANNOTATION_DILATION,
        core.1 - ANNOTATION_DILATION,
        core.2 + ANNOTATION_DILATION,
        core.3 + ANNOTATION_DILATION,
    )
    .clamp_to(spec.width, spec.height);
    Ok((out, Annotation { bbox, class }))
}

/// Which defects one image will carry.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlan {
    pub index: usize,
    pub seed: u64,
    pub classes: Vec<DefectClass>,
}

fn validate_mix(mix: &ClassMix, double_fraction: f64) -> Result<()> {
    if mix.0.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Config("class weights must be finite and >= 0".into()));
    }
    if mix.total() <= 0.0 {
        return Err(Error::Config("class weights are all zero".into()));
    }
    if !(0.0..1.0).contains(&double_fraction) {
        return Err(Error::Config(format!(
            "double_defect_fraction must lie in [0, 1), got {double_fraction}"
        )));
    }
    if mix.weight(DefectClass::LB) > 0.0 && double_fraction == 0.0 {
        return Err(Error::Config(
            "line breaks only occur beside a line collapse: LB weight > 0 needs double_defect_fraction > 0"
                .into(),
        ));
    }
    if mix.total() - mix.weight(DefectClass::LB) <= 0.0 {
        return Err(Error::Config(
            "at least one class other than LB needs positive weight".into(),
        ));
    }
    Ok(())
}

/// Samples per-image defect classes.
///
/// Single-defect images draw from the mix without LB. Double-defect images
/// pair an LC with a second defect, which is an LB with probability
/// `min(1, share(LB) / double_fraction)` and otherwise a draw from the mix
/// without LB.
pub fn plan_images(
    n_images: usize,
    mix: &ClassMix,
    double_fraction: f64,
    seed: u64,
) -> Result<Vec<ImagePlan>> {
    validate_mix(mix, double_fraction)?;
    let p_lb = if double_fraction > 0.0 {
        (mix.share(DefectClass::LB) / double_fraction).min(1.0)
    } else {
        0.0
    };
    Ok((0..n_images)
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let classes = if rng.random::<f64>() < double_fraction {
                let second = if rng.random::<f64>() < p_lb {
                    DefectClass::LB
                } else {
                    mix.sample_excluding_lb(&mut rng)
                };
                vec![DefectClass::LC, second]
            } else {
                vec![mix.sample_excluding_lb(&mut rng)]
            };
            ImagePlan {
                index: i,
                seed: rng.random(),
                classes,
            }
        })
        .collect())
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.x_min < b.x_max && b.x_min < a.x_max && a.y_min < b.y_max && b.y_min < a.y_max
}

/// Renders one planned image with all of its defects.
pub fn render_planned(spec: &PatternSpec, plan: &ImagePlan) -> Result<(GrayImage, Vec<Annotation>)> {
    let mut img = render_pattern(spec, derive_seed(plan.seed, 0))?;
    let mut anns: Vec<Annotation> = Vec::with_capacity(plan.classes.len());
    for (j, &class) in plan.classes.iter().enumerate() {
        let mut placed = None;
        for attempt in 0..64u64 {
            let s = derive_seed(plan.seed, 1 + j as u64 * 1000 + attempt);
            let (cand, ann) = match anns.first() {
                Some(anchor) if class == DefectClass::LB => {
                    inject_defect_beside(&img, class, anchor, spec, s)?
                }
                _ => inject_defect(&img, class, spec, s)?,
            };
            if anns.iter().all(|a| !overlaps(&a.bbox, &ann.bbox)) {
                placed = Some((cand, ann));
                break;
            }
        }
        let (next, ann) = placed.ok_or_else(|| {
            Error::Geometry(format!(
                "could not place a non-overlapping {class} defect in image {}",
                plan.index
            ))
        })?;
        img = next;
        anns.push(ann);
    }
    Ok((img, anns))
}

/// Train and test manifests of a generated dataset.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

pub const TRAIN_MANIFEST: &str = "manifest_train.json";
pub const TEST_MANIFEST: &str = "manifest_test.json";

/// Writes `images/{split}/{index:06}.png` plus both manifests under `out_dir`.
///
/// Per-image seeds derive from `(seed, index)`, so the output bytes do not
/// depend on how rendering is scheduled.
pub fn generate_dataset(
    out_dir: impl AsRef<Path>,
    n_images: usize,
    mix: &ClassMix,
    double_fraction: f64,
    spec: &PatternSpec,
    seed: u64,
) -> Result<GeneratedDataset> {
    let out_dir = out_dir.as_ref();
    spec.validate()?;
    let plans = plan_images(n_images, mix, double_fraction, seed)?;

    let mut order: Vec<usize> = (0..n_images).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
        order.shuffle(&mut rng);
    }
    let n_train = (n_images as f64 * TRAIN_FRACTION).round() as usize;
    let mut split_of = vec![Split::Train; n_images];
    for &i in &order[n_train..] {
        split_of[i] = Split::Test;
    }

    for split in [Split::Train, Split::Test] {
        let d = out_dir.join("images").join(split.dir_name());
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let records: Vec<(Split, ImageRecord)> = plans
        .par_iter()
        .map(|plan| {
            let (img, annotations) = render_planned(spec, plan)?;
            let split = split_of[plan.index];
            let file = format!("images/{}/{:06}.png", split.dir_name(), plan.index);
            write_png(&img, out_dir.join(&file))?;
            Ok((split, ImageRecord { file, annotations }))
        })
        .collect::<Result<_>>()?;

    let manifest = |split: Split| DatasetManifest {
        split,
        seed,
        pattern: spec.clone(),
        class_mix: mix.clone(),
        double_defect_fraction: double_fraction,
        records: records
            .iter()
            .filter(|(s, _)| *s == split)
            .map(|(_, r)| r.clone())
            .collect(),
        root: out_dir.to_path_buf(),
    };
    let train = manifest(Split::Train);
    let test = manifest(Split::Test);
    train.save(out_dir.join(TRAIN_MANIFEST))?;
    test.save(out_dir.join(TEST_MANIFEST))?;
    Ok(GeneratedDataset { train, test })
}
