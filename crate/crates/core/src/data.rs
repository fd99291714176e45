//! Synthetic shape scenes and their on-disk dataset layout.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::numerics::{ntf, Tensor};

const MAX_ATTEMPTS: usize = 100;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    fn base_color(self) -> [f32; 3] {
        match self {
            ShapeKind::Disk => [0.85, 0.25, 0.2],
            ShapeKind::Rectangle => [0.25, 0.8, 0.3],
            ShapeKind::Triangle => [0.25, 0.35, 0.9],
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(ShapeKind::Disk),
            "rectangle" => Ok(ShapeKind::Rectangle),
            "triangle" => Ok(ShapeKind::Triangle),
            other => Err(Error::Config(format!("unknown shape kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub h: usize,
    pub w: usize,
    /// Background plus one class per shape kind.
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub kinds: Vec<ShapeKind>,
    pub noise: f32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            h: 64,
            w: 64,
            num_classes: 4,
            shapes_min: 1,
            shapes_max: 4,
            kinds: vec![ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Triangle],
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::Config("scene extents must be positive".into()));
        }
        if self.num_classes != self.kinds.len() + 1 {
            return Err(Error::Config(format!(
                "{} classes for {} shape kinds (need kinds + background)",
                self.num_classes,
                self.kinds.len()
            )));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::Config("shapes_min exceeds shapes_max".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("H", self.h);
        kv.set("W", self.w);
        kv.set("K", self.num_classes);
        kv.set("seed", self.seed);
        kv.set("shapes_min", self.shapes_min);
        kv.set("shapes_max", self.shapes_max);
        kv.set("noise", self.noise);
        kv.set("kinds", self.kinds.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","));
        kv
    }

    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        self.h = kv.parse_or("H", self.h)?;
        self.w = kv.parse_or("W", self.w)?;
        self.seed = kv.parse_or("seed", self.seed)?;
        self.shapes_min = kv.parse_or("shapes_min", self.shapes_min)?;
        self.shapes_max = kv.parse_or("shapes_max", self.shapes_max)?;
        self.noise = kv.parse_or("noise", self.noise)?;
        if let Some(k) = kv.get("kinds") {
            self.kinds = k.split(',').map(str::parse).collect::<Result<_>>()?;
        }
        self.num_classes = kv.parse_or("K", self.kinds.len() + 1)?;
        self.validate()
    }
}

/// Integer class grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<usize>,
}

impl Mask {
    pub fn filled(h: usize, w: usize, class: usize) -> Self {
        Mask {
            h,
            w,
            labels: vec![class; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> usize) -> Self {
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                labels.push(f(y, x));
            }
        }
        Mask { h, w, labels }
    }

    pub fn at(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.w + x]
    }

    pub fn count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&c| c == class).count()
    }
}

/// Image in `[0, 1]` with its per-pixel class mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor<f32>,
    pub mask: Mask,
}

impl SegSample {
    pub fn hflip(&self) -> SegSample {
        let (h, w) = (self.mask.h, self.mask.w);
        let src = self.image.data();
        let image = Tensor::from_fn([h, w, 3], |i| {
            let (p, c) = (i / 3, i % 3);
            let (y, x) = (p / w, p % w);
            src[(y * w + (w - 1 - x)) * 3 + c]
        });
        let mask = Mask::from_fn(h, w, |y, x| self.mask.at(y, w - 1 - x));
        SegSample { image, mask }
    }
}

/// Concrete shape geometry in pixel coordinates (pixel centers at `+0.5`).
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Triangle { pts } => {
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d0 = edge(pts[0], pts[1]);
                let d1 = edge(pts[1], pts[2]);
                let d2 = edge(pts[2], pts[0]);
                let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(neg && pos)
            }
        }
    }

    fn area(&self) -> f64 {
        match *self {
            Shape::Disk { r, .. } => std::f64::consts::PI * r * r,
            Shape::Rect { x0, y0, x1, y1 } => (x1 - x0).max(0.0) * (y1 - y0).max(0.0),
            Shape::Triangle { pts: [a, b, c] } => 0.5 * ((b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1)).abs(),
        }
    }
}

/// A shape with its class id and fill color.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedShape {
    pub shape: Shape,
    pub class: usize,
    pub color: [f32; 3],
}

/// Paint shapes in order over `background` (`[h, w, 3]`): anti-aliased
/// color, exact pixel-center mask.
pub fn rasterize(background: Tensor<f32>, shapes: &[PlacedShape]) -> Result<SegSample> {
    let (h, w) = match *background.shape() {
        [h, w, 3] => (h, w),
        ref s => return Err(Error::dim(format!("background must be [h, w, 3], got {s:?}"))),
    };
    let mut image = background;
    let mut mask = Mask::filled(h, w, 0);
    let step = 1.0 / SUPERSAMPLE as f64;
    for s in shapes {
        for y in 0..h {
            for x in 0..w {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) * step;
                        let py = y as f64 + (sy as f64 + 0.5) * step;
                        if s.shape.contains(px, py) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let cov = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                    let px = &mut image.data_mut()[(y * w + x) * 3..(y * w + x) * 3 + 3];
                    for (v, &c) in px.iter_mut().zip(&s.color) {
                        *v = cov * c + (1.0 - cov) * *v;
                    }
                }
                if s.shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    mask.labels[y * w + x] = s.class;
                }
            }
        }
    }
    Ok(SegSample { image, mask })
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw_shape(rng: &mut ChaCha8Rng, kind: ShapeKind, h: usize, w: usize) -> Shape {
    let (hf, wf) = (h as f64, w as f64);
    let side = hf.min(wf);
    let cx = rng.random_range(0.1 * wf..0.9 * wf);
    let cy = rng.random_range(0.1 * hf..0.9 * hf);
    match kind {
        ShapeKind::Disk => Shape::Disk {
            cx,
            cy,
            r: rng.random_range(0.08 * side..0.22 * side),
        },
        ShapeKind::Rectangle => {
            let hw = rng.random_range(0.06 * side..0.22 * side);
            let hh = rng.random_range(0.06 * side..0.22 * side);
            Shape::Rect {
                x0: cx - hw,
                y0: cy - hh,
                x1: cx + hw,
                y1: cy + hh,
            }
        }
        ShapeKind::Triangle => {
            let r = rng.random_range(0.12 * side..0.3 * side);
            let base = rng.random_range(0.0..std::f64::consts::TAU);
            let pts = std::array::from_fn(|i| {
                let a = base + i as f64 * std::f64::consts::TAU / 3.0 + rng.random_range(-0.5..0.5);
                (cx + r * a.cos(), cy + r * a.sin())
            });
            Shape::Triangle { pts }
        }
    }
}

/// Deterministic scene for `(cfg.seed, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<SegSample> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index);
    let (h, w) = (cfg.h, cfg.w);
    let base: f32 = rng.random_range(0.35..0.6);
    let noise = cfg.noise;
    let background = Tensor::from_fn([h, w, 3], |_| (base + rng.random_range(-noise..=noise)).clamp(0.0, 1.0));
    let count = rng.random_range(cfg.shapes_min..=cfg.shapes_max);
    let min_area = (0.004 * (h * w) as f64).max(2.0);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let k = rng.random_range(0..cfg.kinds.len());
        let kind = cfg.kinds[k];
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let s = draw_shape(&mut rng, kind, h, w);
            if s.area() >= min_area {
                placed = Some(s);
                break;
            }
        }
        let shape = placed.ok_or_else(|| {
            Error::Data(format!(
                "scene {index}: no non-degenerate {kind} in {MAX_ATTEMPTS} attempts"
            ))
        })?;
        let jitter = 0.08f32;
        let color = kind.base_color().map(|c| (c + rng.random_range(-jitter..=jitter)).clamp(0.0, 1.0));
        shapes.push(PlacedShape {
            shape,
            class: k + 1,
            color,
        });
    }
    rasterize(background, &shapes)
}

/// Samples with their class count.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<SegSample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn generate(cfg: &SceneConfig, first_index: u64, n: usize) -> Result<Dataset> {
        let samples = (0..n as u64)
            .map(|i| generate_scene(cfg, first_index + i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            samples,
            num_classes: cfg.num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Write `n` scenes starting at `first_index` as `img_%05d.ntf` /
/// `mask_%05d.ntf` plus `manifest.txt`.
pub fn write_dataset(dir: &Path, cfg: &SceneConfig, n: usize, first_index: u64) -> Result<()> {
    let ds = Dataset::generate(cfg, first_index, n)?;
    let mut manifest = cfg.to_kv();
    manifest.set("count", n);
    manifest.set("first_index", first_index);
    write_samples(dir, &ds.samples, &manifest)
}

pub fn write_samples(dir: &Path, samples: &[SegSample], manifest: &KeyValues) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        ntf::write(&dir.join(format!("img_{i:05}.ntf")), &s.image)?;
        let m = Tensor::new([s.mask.h, s.mask.w], s.mask.labels.iter().map(|&c| c as f32).collect())?;
        ntf::write(&dir.join(format!("mask_{i:05}.ntf")), &m)?;
    }
    let mut manifest = manifest.clone();
    manifest.set("count", samples.len());
    manifest.write(&dir.join("manifest.txt"))
}

pub fn read_manifest(dir: &Path) -> Result<KeyValues> {
    let path = dir.join("manifest.txt");
    if !path.exists() {
        return Err(Error::Data(format!("{} has no manifest.txt", dir.display())));
    }
    KeyValues::read(&path)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let count: usize = manifest
        .parse_opt("count")?
        .ok_or_else(|| Error::Config("manifest lacks `count`".into()))?;
    let k: usize = manifest
        .parse_opt("K")?
        .ok_or_else(|| Error::Config("manifest lacks `K`".into()))?;
    let images = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let n = e.file_name();
            let n = n.to_string_lossy();
            n.starts_with("img_") && n.ends_with(".ntf")
        })
        .count();
    if images != count {
        return Err(Error::format(0, format!("manifest lists {count} samples, directory holds {images}")));
    }
    if count == 0 {
        return Err(Error::Data(format!("{} holds no samples", dir.display())));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let image: Tensor<f32> = ntf::read(&dir.join(format!("img_{i:05}.ntf")))?;
        let m: Tensor<f32> = ntf::read(&dir.join(format!("mask_{i:05}.ntf")))?;
        let (h, w) = match (image.shape(), m.shape()) {
            (&[h, w, 3], &[mh, mw]) if (h, w) == (mh, mw) => (h, w),
            (a, b) => return Err(Error::dim(format!("sample {i}: image {a:?} vs mask {b:?}"))),
        };
        let labels = m
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && (v as usize) < k {
                    Ok(v as usize)
                } else {
                    Err(Error::Data(format!("sample {i}: mask value {v} is not a class id below {k}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(SegSample {
            image,
            mask: Mask { h, w, labels },
        });
    }
    Ok(Dataset {
        samples,
        num_classes: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_background() {
        let cfg = SceneConfig {
            shapes_min: 0,
            shapes_max: 0,
            ..Default::default()
        };
        let s = generate_scene(&cfg, 3).unwrap();
        assert_eq!(s.mask.count(0), 64 * 64);
    }

    #[test]
    fn scenes_are_deterministic_and_index_dependent() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(&cfg, 5).unwrap(), generate_scene(&cfg, 5).unwrap());
        assert_ne!(generate_scene(&cfg, 5).unwrap(), generate_scene(&cfg, 6).unwrap());
        let s = generate_scene(&cfg, 9).unwrap();
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.mask.labels.iter().all(|&c| c < 4));
    }

    #[test]
    fn class_count_must_match_kinds() {
        let cfg = SceneConfig {
            num_classes: 3,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn flip_is_an_involution() {
        let s = generate_scene(&SceneConfig::default(), 1).unwrap();
        assert_eq!(s.hflip().hflip(), s);
        assert_eq!(s.hflip().mask.at(3, 0), s.mask.at(3, 63));
    }
}
