//! Synthetic word images: rasterization, degradations and shrink crops.

mod corpus;
pub mod font;
mod image;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corpus::{
    build_corpus, build_shrink_variant, load_manifest, shrink_samples, write_manifest, CorpusConfig, Manifest,
    ManifestRow, Split, MANIFEST_FILE,
};
pub use image::GrayImage;

/// Default per-side maximum shrink fraction.
pub const DEFAULT_S_MAX: f64 = 0.15;
/// Largest area fraction an occluder may cover at strength 1.
pub const MAX_OCCLUDED_FRACTION: f64 = 0.30;
/// Blur sigma in pixels at strength 1.
pub const MAX_BLUR_SIGMA: f64 = 2.0;
/// Noise standard deviation at strength 1.
pub const MAX_NOISE_STD: f64 = 0.25;
pub const MIN_RENDER_HEIGHT: usize = 16;
pub const MIN_CONTRAST: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationKind {
    Clean,
    Blur,
    Occlude,
    Noise,
}

impl DegradationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DegradationKind::Clean => "clean",
            DegradationKind::Blur => "blur",
            DegradationKind::Occlude => "occlude",
            DegradationKind::Noise => "noise",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(DegradationKind::Clean),
            "blur" => Ok(DegradationKind::Blur),
            "occlude" => Ok(DegradationKind::Occlude),
            "noise" => Ok(DegradationKind::Noise),
            other => Err(Error::invalid(format!(
                "unknown degradation kind {other:?} (expected clean, blur, occlude or noise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub kind: DegradationKind,
    pub strength: f64,
    pub seed: u64,
}

/// Axis-aligned box in pixel coordinates, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoundingBox { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(Error::invalid(format!("IoU needs positive-area boxes, got {a:?} and {b:?}")));
    }
    let inter = BoundingBox::new(a.x0.max(b.x0), a.y0.max(b.y0), a.x1.min(b.x1), a.y1.min(b.y1)).area();
    Ok(inter / (a.area() + b.area() - inter))
}

/// Per-side crop fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkSpec {
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub bottom: f64,
    pub s_max: f64,
}

impl ShrinkSpec {
    pub fn new(left: f64, right: f64, top: f64, bottom: f64, s_max: f64) -> Result<Self> {
        let spec = ShrinkSpec {
            left,
            right,
            top,
            bottom,
            s_max,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn uniform(fraction: f64) -> Result<Self> {
        Self::new(fraction, fraction, fraction, fraction, fraction.max(DEFAULT_S_MAX))
    }

    /// Each side drawn independently from `U[0, s_max]`.
    pub fn random<R: Rng>(rng: &mut R, s_max: f64) -> Result<Self> {
        let mut side = || if s_max > 0.0 { rng.random_range(0.0..=s_max) } else { 0.0 };
        let (l, r, t, b) = (side(), side(), side(), side());
        Self::new(l, r, t, b, s_max)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.s_max) {
            return Err(Error::invalid(format!("s_max must lie in [0, 0.5), got {}", self.s_max)));
        }
        for (name, v) in [("left", self.left), ("right", self.right), ("top", self.top), ("bottom", self.bottom)] {
            if !(0.0..=self.s_max).contains(&v) {
                return Err(Error::invalid(format!("{name} shrink {v} outside [0, {}]", self.s_max)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub label: String,
    pub meta: Degradation,
    /// Full extent of the image a shrink crop was taken from.
    pub source_box: Option<BoundingBox>,
    /// The crop within `source_box`.
    pub crop_box: Option<BoundingBox>,
}

impl Sample {
    pub fn shrink_iou(&self) -> Option<f64> {
        match (self.source_box, self.crop_box) {
            (Some(s), Some(c)) => iou(&s, &c).ok(),
            _ => None,
        }
    }
}

pub fn check_renderable(word: &str) -> Result<()> {
    if word.is_empty() {
        return Err(Error::invalid("cannot render an empty word"));
    }
    match word.chars().find(|&c| !font::has_glyph(c)) {
        Some(c) => Err(Error::UnsupportedChar(c)),
        None => Ok(()),
    }
}

/// Rasterizes `word` at `height` pixels. Glyphs are scaled by nearest
/// neighbour; spacing, margins and gray levels are drawn from `seed`.
pub fn render_word(word: &str, height: usize, seed: u64) -> Result<Sample> {
    check_renderable(word)?;
    if height < MIN_RENDER_HEIGHT {
        return Err(Error::invalid(format!("render height must be >= {MIN_RENDER_HEIGHT}, got {height}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background: f64 = rng.random_range(0.0..=1.0);
    let contrast: f64 = rng.random_range(MIN_CONTRAST..=0.5);
    let foreground = if background > 0.5 { background - contrast } else { background + contrast };

    let scale = ((height - 4) / font::GLYPH_HEIGHT).max(1);
    let glyph_h = font::GLYPH_HEIGHT * scale;
    let glyph_w = font::GLYPH_WIDTH * scale;
    let slack = height - glyph_h;
    let top = rng.random_range(slack / 4..=slack - slack / 4);
    let left = 2 + rng.random_range(0..=scale);
    let chars: Vec<char> = word.chars().collect();
    let mut offsets = Vec::with_capacity(chars.len());
    let mut x = left;
    for i in 0..chars.len() {
        if i > 0 {
            x += scale + rng.random_range(0..=scale);
        }
        offsets.push(x);
        x += glyph_w;
    }
    let width = x + 2 + scale / 2;

    let mut image = GrayImage::filled(width, height, background);
    for (&c, &x0) in chars.iter().zip(&offsets) {
        for gy in 0..glyph_h {
            for gx in 0..glyph_w {
                if font::glyph_pixel(c, gy / scale, gx / scale) == Some(true) {
                    image.set(x0 + gx, top + gy, foreground);
                }
            }
        }
    }
    Ok(Sample {
        image,
        label: word.to_string(),
        meta: Degradation {
            kind: DegradationKind::Clean,
            strength: 0.0,
            seed,
        },
        source_box: None,
        crop_box: None,
    })
}

/// Applies one degradation. Strength 0 leaves the pixels untouched.
pub fn degrade(sample: &Sample, kind: DegradationKind, strength: f64, seed: u64) -> Result<Sample> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::invalid(format!("degradation strength must lie in [0, 1], got {strength}")));
    }
    let mut out = sample.clone();
    out.meta = Degradation { kind, strength, seed };
    if strength == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = &sample.image;
    match kind {
        DegradationKind::Clean => {}
        DegradationKind::Blur => out.image = img.gaussian_blur(MAX_BLUR_SIGMA * strength),
        DegradationKind::Noise => {
            let normal = Normal::new(0.0, MAX_NOISE_STD * strength).map_err(|e| Error::invalid(e.to_string()))?;
            for v in &mut out.image.pixels {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        DegradationKind::Occlude => {
            let (w, h) = (img.width, img.height);
            let fraction = MAX_OCCLUDED_FRACTION * strength * rng.random_range(0.5..=1.0);
            let rect_h = ((h as f64 * rng.random_range(0.6..=1.0)).round() as usize).clamp(1, h);
            let rect_w = ((fraction * (w * h) as f64 / rect_h as f64).floor() as usize).min(w);
            let gray: f64 = rng.random_range(0.0..=1.0);
            if rect_w > 0 {
                let x0 = rng.random_range(0..=w - rect_w);
                let y0 = rng.random_range(0..=h - rect_h);
                for y in y0..y0 + rect_h {
                    for x in x0..x0 + rect_w {
                        out.image.set(x, y, gray);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Crops `[floor(l W), ceil(W - r W)) x [floor(t H), ceil(H - b H))`, so the
/// kept region is never smaller than the nominal one.
pub fn shrink_crop(sample: &Sample, spec: &ShrinkSpec) -> Result<Sample> {
    spec.validate()?;
    let (w, h) = (sample.image.width as f64, sample.image.height as f64);
    let x0 = (spec.left * w).floor() as usize;
    let x1 = ((w - spec.right * w).ceil() as usize).min(sample.image.width);
    let y0 = (spec.top * h).floor() as usize;
    let y1 = ((h - spec.bottom * h).ceil() as usize).min(sample.image.height);
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::invalid(format!(
            "shrink {spec:?} leaves an empty crop of a {}x{} image",
            sample.image.width, sample.image.height
        )));
    }
    let mut out = sample.clone();
    out.image = sample.image.crop(x0, y0, x1, y1);
    out.source_box = Some(BoundingBox::new(0.0, 0.0, w, h));
    out.crop_box = Some(BoundingBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> BoundingBox {
        BoundingBox::new(0.0, 0.0, 1.0, 1.0)
    }

    #[test]
    fn iou_anchor_points() {
        assert_eq!(iou(&unit(), &unit()).unwrap(), 1.0);
        assert_eq!(iou(&unit(), &BoundingBox::new(2.0, 2.0, 3.0, 3.0)).unwrap(), 0.0);
        let sub = BoundingBox::new(0.3, 0.3, 1.0, 1.0);
        assert!((iou(&unit(), &sub).unwrap() - 0.49).abs() < 1e-12);
        assert!(iou(&unit(), &BoundingBox::new(0.0, 0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn render_is_deterministic() {
        assert_eq!(render_word("A", 32, 5).unwrap(), render_word("A", 32, 5).unwrap());
        assert_ne!(render_word("A", 32, 5).unwrap().image, render_word("A", 32, 6).unwrap().image);
    }

    #[test]
    fn render_rejects_bad_input() {
        assert!(render_word("", 32, 1).is_err());
        assert!(matches!(render_word("a b", 32, 1), Err(Error::UnsupportedChar(' '))));
        assert!(render_word("ab", 15, 1).is_err());
    }

    #[test]
    fn render_width_grows_with_length() {
        let text = "herehereab";
        let widths: Vec<usize> = (1..=10).map(|n| render_word(&text[..n], 32, 7).unwrap().image.width).collect();
        for w in widths.windows(2) {
            assert!(w[1] > w[0], "{widths:?}");
        }
    }

    #[test]
    fn render_contrast_and_range() {
        for seed in 0..20 {
            let s = render_word("Here9!", 32, seed).unwrap();
            assert!(s.image.in_unit_range());
            let lo = s.image.pixels.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.image.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(hi - lo >= MIN_CONTRAST - 1e-12, "seed {seed}: contrast {}", hi - lo);
        }
    }

    #[test]
    fn zero_strength_is_identity() {
        let s = render_word("word", 32, 1).unwrap();
        for kind in [DegradationKind::Blur, DegradationKind::Occlude, DegradationKind::Noise] {
            let d = degrade(&s, kind, 0.0, 3).unwrap();
            assert_eq!(d.image, s.image);
            assert_eq!(d.meta.kind, kind);
        }
    }

    #[test]
    fn occlusion_area_is_bounded() {
        for seed in 0..50 {
            let s = render_word("occluded", 32, seed).unwrap();
            let d = degrade(&s, DegradationKind::Occlude, 1.0, seed).unwrap();
            let changed = s.image.pixels.iter().zip(&d.image.pixels).filter(|(a, b)| a != b).count();
            let (w, h) = (s.image.width, s.image.height);
            let bound = MAX_OCCLUDED_FRACTION * (w * h) as f64 + w.max(h) as f64;
            assert!((changed as f64) <= bound, "seed {seed}: {changed} > {bound}");
        }
    }

    #[test]
    fn degradations_are_deterministic_and_keep_labels() {
        let s = render_word("blurry", 32, 2).unwrap();
        for kind in [DegradationKind::Blur, DegradationKind::Occlude, DegradationKind::Noise] {
            let a = degrade(&s, kind, 0.5, 11).unwrap();
            let b = degrade(&s, kind, 0.5, 11).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.label, s.label);
            assert!(a.image.in_unit_range());
            assert_eq!((a.image.width, a.image.height), (s.image.width, s.image.height));
        }
        assert!(degrade(&s, DegradationKind::Blur, 1.5, 0).is_err());
        assert!("smudge".parse::<DegradationKind>().is_err());
    }

    fn square(size: usize) -> Sample {
        let mut s = render_word("x", 16, 0).unwrap();
        s.image = GrayImage::filled(size, size, 0.5);
        s
    }

    #[test]
    fn shrink_identity() {
        let s = square(50);
        let c = shrink_crop(&s, &ShrinkSpec::new(0.0, 0.0, 0.0, 0.0, 0.15).unwrap()).unwrap();
        assert_eq!(c.image, s.image);
        assert_eq!(c.shrink_iou(), Some(1.0));
    }

    #[test]
    fn shrink_maximal_is_049() {
        let c = shrink_crop(&square(200), &ShrinkSpec::uniform(0.15).unwrap()).unwrap();
        assert!((c.shrink_iou().unwrap() - 0.49).abs() < 1e-12);
    }

    #[test]
    fn shrink_asymmetric() {
        let spec = ShrinkSpec::new(0.1, 0.05, 0.0, 0.15, 0.15).unwrap();
        let c = shrink_crop(&square(200), &spec).unwrap();
        assert!((c.shrink_iou().unwrap() - 0.7225).abs() < 1e-12);
        assert_eq!(c.label, "x");
    }

    #[test]
    fn shrink_spec_bounds() {
        assert!(ShrinkSpec::new(0.2, 0.0, 0.0, 0.0, 0.15).is_err());
        assert!(ShrinkSpec::new(-0.01, 0.0, 0.0, 0.0, 0.15).is_err());
    }
}
