//! Procedural aerial-like scenes with two appearance domains.
//!
//! Domain A has small dark roofs on a greenish field; domain B has larger,
//! bright, striped roofs on a grey field. A model trained on one domain
//! generalises poorly to the other, which is the setting click adaptation is
//! meant for.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{read_pgm, read_ppm, write_pgm, write_ppm, ImageTensor, LabelMap, LabeledImage};

pub const BACKGROUND: u8 = 0;
pub const BUILDING: u8 = 1;
pub const ROAD: u8 = 2;
pub const VEGETATION: u8 = 3;

/// Scenes are resampled until the building fraction lies in this range.
pub const BUILDING_FRACTION: (f64, f64) = (0.05, 0.40);
pub const MAX_RESAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainId {
    A,
    B,
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainId::A => "A",
            DomainId::B => "B",
        })
    }
}

impl FromStr for DomainId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(DomainId::A),
            "B" | "b" => Ok(DomainId::B),
            other => Err(Error::Invalid(format!("unknown domain {other:?}, expected A or B"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: DomainId,
    /// Per-channel range of the background mean colour.
    pub background: [(f64, f64); 3],
    /// Amplitude of the low-frequency background variation.
    pub background_variation: f64,
    pub roof_intensity: (f64, f64),
    /// Amplitude of the stripe pattern on roofs; 0 gives flat roofs.
    pub roof_texture: f64,
    /// Rectangle side length range, inclusive.
    pub building_size: (usize, usize),
    pub building_count: (usize, usize),
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
    /// 2 for building/background; 4 adds road stripes and vegetation blobs.
    pub classes: usize,
}

impl DomainSpec {
    pub fn a() -> Self {
        Self {
            id: DomainId::A,
            background: [(0.20, 0.42), (0.32, 0.62), (0.15, 0.35)],
            background_variation: 0.06,
            roof_intensity: (0.20, 0.35),
            roof_texture: 0.0,
            building_size: (8, 24),
            building_count: (2, 6),
            noise: 0.03,
            classes: 2,
        }
    }

    pub fn b() -> Self {
        Self {
            id: DomainId::B,
            background: [(0.42, 0.52), (0.42, 0.52), (0.42, 0.52)],
            background_variation: 0.06,
            roof_intensity: (0.60, 0.85),
            roof_texture: 0.08,
            building_size: (16, 48),
            building_count: (1, 3),
            noise: 0.03,
            classes: 2,
        }
    }

    pub fn for_id(id: DomainId) -> Self {
        match id {
            DomainId::A => Self::a(),
            DomainId::B => Self::b(),
        }
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo < hi && lo >= 0.0 && hi <= 1.0;
        if !self.background.iter().all(|&r| ordered(r)) || !ordered(self.roof_intensity) {
            return Err(Error::Invalid("colour ranges must be increasing within [0, 1]".into()));
        }
        let (smin, smax) = self.building_size;
        if smin == 0 || smin > smax || smax > height.min(width) {
            return Err(Error::Invalid(format!(
                "building sizes {smin}..={smax} must be positive and fit a {height}x{width} scene"
            )));
        }
        let (cmin, cmax) = self.building_count;
        if cmin == 0 || cmin > cmax {
            return Err(Error::Invalid("building count range must be non-empty and positive".into()));
        }
        if self.classes != 2 && self.classes != 4 {
            return Err(Error::Invalid(format!("{} classes unsupported; use 2 or 4", self.classes)));
        }
        if self.noise < 0.0 || self.roof_texture < 0.0 || self.background_variation < 0.0 {
            return Err(Error::Invalid("noise amplitudes must be non-negative".into()));
        }
        Ok(())
    }
}

/// An axis-aligned building footprint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub intensity: f64,
}

impl Rect {
    fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Feature {
    /// Horizontal (`vertical == false`) or vertical band.
    Road { offset: usize, thickness: usize, vertical: bool },
    Vegetation { row: f64, col: f64, radius: f64 },
}

/// Geometry of a scene, sampled before rendering.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub buildings: Vec<Rect>,
    pub features: Vec<Feature>,
}

impl Layout {
    pub fn labels(&self, height: usize, width: usize) -> LabelMap {
        let mut labels = LabelMap::filled(height, width, BACKGROUND);
        for f in &self.features {
            for r in 0..height {
                for c in 0..width {
                    let hit = match *f {
                        Feature::Road {
                            offset,
                            thickness,
                            vertical,
                        } => {
                            let x = if vertical { c } else { r };
                            x >= offset && x < offset + thickness
                        }
                        Feature::Vegetation { row, col, radius } => {
                            (r as f64 - row).powi(2) + (c as f64 - col).powi(2) <= radius * radius
                        }
                    };
                    if hit {
                        let class = match f {
                            Feature::Road { .. } => ROAD,
                            Feature::Vegetation { .. } => VEGETATION,
                        };
                        labels.set(r, c, class);
                    }
                }
            }
        }
        for b in &self.buildings {
            for r in b.row..b.row + b.height {
                for c in b.col..b.col + b.width {
                    labels.set(r, c, BUILDING);
                }
            }
        }
        labels
    }

    fn building_at(&self, r: usize, c: usize) -> Option<&Rect> {
        self.buildings.iter().rev().find(|b| b.contains(r, c))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: ImageTensor,
    pub labels: LabelMap,
    pub seed: u64,
}

impl Scene {
    pub fn into_labeled(self) -> LabeledImage {
        LabeledImage {
            image: self.image,
            labels: self.labels,
        }
    }

    pub fn building_fraction(&self) -> f64 {
        building_fraction(&self.labels)
    }
}

pub fn building_fraction(labels: &LabelMap) -> f64 {
    let n = labels.data().iter().filter(|&&v| v == BUILDING).count();
    n as f64 / labels.data().len() as f64
}

fn scene_rng(seed: u64, domain: DomainId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain as u64);
    rng
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..=hi)
}

pub fn sample_layout(rng: &mut ChaCha8Rng, domain: &DomainSpec, height: usize, width: usize) -> Layout {
    let mut layout = Layout::default();
    if domain.classes == 4 {
        for _ in 0..rng.gen_range(1..=2) {
            let vertical = rng.gen_bool(0.5);
            let dim = if vertical { width } else { height };
            let thickness = rng.gen_range(3..=5).min(dim);
            layout.features.push(Feature::Road {
                offset: rng.gen_range(0..=dim - thickness),
                thickness,
                vertical,
            });
        }
        for _ in 0..rng.gen_range(1..=3) {
            layout.features.push(Feature::Vegetation {
                row: rng.gen_range(0.0..height as f64),
                col: rng.gen_range(0.0..width as f64),
                radius: rng.gen_range(3.0..8.0),
            });
        }
    }
    let (smin, smax) = domain.building_size;
    for _ in 0..rng.gen_range(domain.building_count.0..=domain.building_count.1) {
        let h = rng.gen_range(smin..=smax);
        let w = rng.gen_range(smin..=smax);
        layout.buildings.push(Rect {
            row: rng.gen_range(0..=height - h),
            col: rng.gen_range(0..=width - w),
            height: h,
            width: w,
            intensity: sample_range(rng, domain.roof_intensity),
        });
    }
    layout
}

/// Smooth field in `[-1, 1]` from bilinear interpolation of a coarse grid.
fn low_frequency(rng: &mut ChaCha8Rng, height: usize, width: usize, cell: usize) -> Vec<f64> {
    let gh = height / cell + 2;
    let gw = width / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let y = r as f64 / cell as f64;
        let (y0, fy) = (y.floor() as usize, y.fract());
        for c in 0..width {
            let x = c as f64 / cell as f64;
            let (x0, fx) = (x.floor() as usize, x.fract());
            let g = |i: usize, j: usize| grid[i * gw + j];
            let top = g(y0, x0) * (1.0 - fx) + g(y0, x0 + 1) * fx;
            let bottom = g(y0 + 1, x0) * (1.0 - fx) + g(y0 + 1, x0 + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Paints `layout` with the domain's appearance.
pub fn render(layout: &Layout, domain: &DomainSpec, height: usize, width: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let base: Vec<f64> = domain.background.iter().map(|&r| sample_range(rng, r)).collect();
    let field = low_frequency(rng, height, width, 16);
    let labels = layout.labels(height, width);
    let stripe_phase = rng.gen_range(0..4);
    let mut img = ImageTensor::zeros(height, width, 3);
    for r in 0..height {
        for c in 0..width {
            let bg = domain.background_variation * field[r * width + c];
            for (ch, &b) in base.iter().enumerate() {
                let v = match labels.get(r, c) {
                    BUILDING => {
                        let rect = layout.building_at(r, c).expect("building label inside a rectangle");
                        let stripe = if ((r - rect.row + stripe_phase) / 2) % 2 == 0 { 1.0 } else { -1.0 };
                        rect.intensity + domain.roof_texture * stripe
                    }
                    ROAD => 0.55 + 0.02 * ch as f64,
                    VEGETATION => [0.15, 0.40, 0.12][ch],
                    _ => b + bg,
                };
                let noise = if domain.noise > 0.0 {
                    rng.gen_range(-domain.noise..=domain.noise)
                } else {
                    0.0
                };
                img.set(r, c, ch, (v + noise).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Deterministic scene for `(seed, domain)`.
pub fn gen_scene(seed: u64, domain: &DomainSpec, height: usize, width: usize) -> Result<Scene> {
    domain.validate(height, width)?;
    let mut rng = scene_rng(seed, domain.id);
    for _ in 0..MAX_RESAMPLES {
        let layout = sample_layout(&mut rng, domain, height, width);
        let labels = layout.labels(height, width);
        let frac = building_fraction(&labels);
        if (BUILDING_FRACTION.0..=BUILDING_FRACTION.1).contains(&frac) {
            let image = render(&layout, domain, height, width, &mut rng);
            return Ok(Scene { image, labels, seed });
        }
    }
    Err(Error::Invalid(format!(
        "domain {} never met the building fraction after {MAX_RESAMPLES} tries",
        domain.id
    )))
}

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "SYNTHSEG v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub image: String,
    pub labels: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    /// Train followed by val.
    All,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "all" => Ok(Split::All),
            other => Err(Error::Invalid(format!("unknown split {other:?}, expected train, val or all"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain: DomainId,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub train: Vec<Entry>,
    pub val: Vec<Entry>,
}

impl Manifest {
    pub fn entries(&self, split: Split) -> Vec<&Entry> {
        match split {
            Split::Train => self.train.iter().collect(),
            Split::Val => self.val.iter().collect(),
            Split::All => self.train.iter().chain(&self.val).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{MANIFEST_HEADER}\ndomain {}\nseed {}\nsize {} {}\nclasses {}\n",
            self.domain, self.seed, self.height, self.width, self.classes
        );
        for (tag, list) in [("train", &self.train), ("val", &self.val)] {
            for e in list {
                out.push_str(&format!("{tag} {} {}\n", e.image, e.labels));
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Format(format!("{}: line {}: {msg}", path.display(), line + 1));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MANIFEST_HEADER => {}
            _ => return Err(bad(0, "missing SYNTHSEG header")),
        }
        let mut m = Manifest {
            domain: DomainId::A,
            seed: 0,
            height: 0,
            width: 0,
            classes: 2,
            train: Vec::new(),
            val: Vec::new(),
        };
        for (i, line) in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad(i, "expected an unsigned integer"));
            match parts.as_slice() {
                [] => {}
                ["domain", d] => m.domain = d.parse().map_err(|_| bad(i, "unknown domain"))?,
                ["seed", s] => m.seed = num(s)?,
                ["size", h, w] => {
                    m.height = num(h)? as usize;
                    m.width = num(w)? as usize;
                }
                ["classes", n] => m.classes = num(n)? as usize,
                [split @ ("train" | "val"), img, gt] => {
                    let e = Entry {
                        image: img.to_string(),
                        labels: gt.to_string(),
                    };
                    if *split == "train" {
                        m.train.push(e);
                    } else {
                        m.val.push(e);
                    }
                }
                _ => return Err(bad(i, "unrecognised manifest line")),
            }
        }
        Ok(m)
    }
}

/// Seed of scene `index` in a dataset drawn from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 32 | index as u64);
    rng.gen()
}

/// Writes `n` scenes plus an 80/20 train/validation manifest to `out_dir`.
pub fn gen_dataset(seed: u64, n: usize, domain: &DomainSpec, height: usize, width: usize, out_dir: &Path) -> Result<Manifest> {
    if n < 5 {
        return Err(Error::Invalid(format!("a dataset needs at least 5 scenes, got {n}")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let scene = gen_scene(scene_seed(seed, i), domain, height, width)?;
        let e = Entry {
            image: format!("img_{i}.ppm"),
            labels: format!("gt_{i}.pgm"),
        };
        write_ppm(&out_dir.join(&e.image), &scene.image)?;
        write_pgm(&out_dir.join(&e.labels), &scene.labels)?;
        entries.push(e);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (0.8 * n as f64).round() as usize;
    let mut train: Vec<usize> = idx[..n_train].to_vec();
    let mut val: Vec<usize> = idx[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    let manifest = Manifest {
        domain: domain.id,
        seed,
        height,
        width,
        classes: domain.classes,
        train: train.into_iter().map(|i| entries[i].clone()).collect(),
        val: val.into_iter().map(|i| entries[i].clone()).collect(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse(&text, &path)
}

/// Loads a split; label values are checked against `num_classes` when given.
pub fn load_split(dir: &Path, split: Split, num_classes: Option<usize>) -> Result<Vec<(PathBuf, LabeledImage)>> {
    let manifest = read_manifest(dir)?;
    manifest
        .entries(split)
        .iter()
        .map(|e| {
            let image = read_ppm(&dir.join(&e.image))?;
            let labels = read_pgm(&dir.join(&e.labels), num_classes)?;
            if (image.height(), image.width()) != (labels.height(), labels.width()) {
                return Err(Error::shape("dataset", format!("{} and {} differ in size", e.image, e.labels)));
            }
            Ok((dir.join(&e.image), LabeledImage { image, labels }))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        for d in [DomainSpec::a(), DomainSpec::b()] {
            let a = gen_scene(11, &d, 64, 64).unwrap();
            let b = gen_scene(11, &d, 64, 64).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, gen_scene(12, &d, 64, 64).unwrap());
        }
    }

    #[test]
    fn building_fraction_invariant() {
        for d in [DomainSpec::a(), DomainSpec::b()] {
            for s in 0..30 {
                let f = gen_scene(s, &d, 64, 64).unwrap().building_fraction();
                assert!((0.05..=0.40).contains(&f), "{f}");
            }
        }
    }

    #[test]
    fn fixed_rectangle_labels_exactly() {
        let layout = Layout {
            buildings: vec![Rect {
                row: 4,
                col: 4,
                height: 10,
                width: 10,
                intensity: 0.3,
            }],
            features: Vec::new(),
        };
        let labels = layout.labels(32, 32);
        assert_eq!(labels.data().iter().filter(|&&v| v == BUILDING).count(), 100);
        assert_eq!(labels.get(4, 4), BUILDING);
        assert_eq!(labels.get(13, 13), BUILDING);
        assert_eq!(labels.get(14, 13), BACKGROUND);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = render(&layout, &DomainSpec::a(), 32, 32, &mut rng);
        assert!(img.planar().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn labels_lie_inside_rectangles() {
        let d = DomainSpec::a();
        let mut rng = scene_rng(3, d.id);
        let layout = sample_layout(&mut rng, &d, 64, 64);
        let labels = layout.labels(64, 64);
        for r in 0..64 {
            for c in 0..64 {
                assert_eq!(labels.get(r, c) == BUILDING, layout.buildings.iter().any(|b| b.contains(r, c)));
            }
        }
    }

    fn mean_roof(scene: &Scene) -> f64 {
        let (mut s, mut n) = (0.0, 0);
        for r in 0..scene.labels.height() {
            for c in 0..scene.labels.width() {
                if scene.labels.get(r, c) == BUILDING {
                    s += (0..3).map(|ch| scene.image.get(r, c, ch)).sum::<f64>() / 3.0;
                    n += 1;
                }
            }
        }
        s / n as f64
    }

    #[test]
    fn domains_differ_in_roof_intensity() {
        let (a, b) = (DomainSpec::a(), DomainSpec::b());
        let gap = b.roof_intensity.0 - a.roof_intensity.1;
        for s in 0..20 {
            let ra = mean_roof(&gen_scene(s, &a, 64, 64).unwrap());
            let rb = mean_roof(&gen_scene(s, &b, 64, 64).unwrap());
            assert!(rb - ra >= gap, "seed {s}: {ra} vs {rb}");
        }
    }

    #[test]
    fn degenerate_domain_is_rejected() {
        let mut d = DomainSpec::a();
        d.building_size = (1, 1);
        d.building_count = (1, 1);
        assert!(gen_scene(0, &d, 64, 64).is_err());
        d.building_size = (80, 90);
        assert!(gen_scene(0, &d, 64, 64).is_err());
    }

    #[test]
    fn four_class_scenes() {
        let d = DomainSpec::a().with_classes(4);
        let s = gen_scene(5, &d, 64, 64).unwrap();
        assert!(s.labels.max_class() <= 3);
        s.labels.validate(4).unwrap();
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = Manifest {
            domain: DomainId::B,
            seed: 9,
            height: 64,
            width: 32,
            classes: 2,
            train: vec![Entry {
                image: "img_0.ppm".into(),
                labels: "gt_0.pgm".into(),
            }],
            val: vec![],
        };
        assert_eq!(Manifest::parse(&m.to_text(), Path::new("m")).unwrap(), m);
        assert!(Manifest::parse("nope\n", Path::new("m")).is_err());
    }
}
