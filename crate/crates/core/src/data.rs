//! Samples and datasets: synthetic domain-shift generation, on-disk
//! ingestion, rotation augmentation and random source/target pairing.
//!
//! On-disk layout of one domain root:
//!
//! ```text
//! root/images/<basename>.png     RGB, 8 bit
//! root/masks/<basename>.png      grayscale, nucleus where value > 127 (optional)
//! root/instances/<basename>.png  16-bit grayscale instance ids, 0 = background (optional)
//! root/manifest.txt              "<split>\t<basename>" per line (optional)
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Binary mask, 1 = nucleus.
pub type Mask = Array2<u8>;
/// Instance ids, 0 = background.
pub type InstanceMap = Array2<u32>;
/// `H x W x 3` RGB image with values in `[0, 1]`.
pub type Image = Array3<f32>;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn salt(self) -> u64 {
        match self {
            Domain::Source => 0x5EED_0001,
            Domain::Target => 0x5EED_0002,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SourceLabeled,
    TargetUnlabeled,
}

impl Role {
    pub fn domain(self) -> Domain {
        match self {
            Role::SourceLabeled => Domain::Source,
            Role::TargetUnlabeled => Domain::Target,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Option<Mask>,
    pub instance_map: Option<InstanceMap>,
    pub domain: Domain,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image.dim();
        if c != 3 {
            return Err(Error::Data(format!("{}: expected 3 channels, got {c}", self.id)));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("{}: image values outside [0, 1]", self.id)));
        }
        if let Some(m) = &self.mask {
            if m.dim() != (h, w) || m.iter().any(|&v| v > 1) {
                return Err(Error::Data(format!("{}: mask must be a {h}x{w} 0/1 array", self.id)));
            }
        }
        if let Some(inst) = &self.instance_map {
            if inst.dim() != (h, w) {
                return Err(Error::Data(format!("{}: instance map must be {h}x{w}", self.id)));
            }
            if let Some(m) = &self.mask {
                if m.iter().zip(inst.iter()).any(|(&m, &i)| (m == 1) != (i > 0)) {
                    return Err(Error::Data(format!("{}: mask and instance map disagree", self.id)));
                }
            }
        }
        Ok(())
    }

    pub fn nucleus_pixels(&self) -> Option<usize> {
        self.mask.as_ref().map(|m| m.iter().filter(|&&v| v == 1).count())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub samples: Vec<Sample>,
    pub role: Role,
    pub split: Split,
}

impl DomainDataset {
    pub fn new(samples: Vec<Sample>, role: Role, split: Split) -> Result<Self> {
        let ds = DomainDataset { samples, role, split };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            s.validate()?;
            if self.role == Role::SourceLabeled && s.mask.is_none() {
                return Err(Error::Data(format!("source sample '{}' has no mask", s.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Drops masks and instance maps, e.g. before handing a target training
    /// split to the trainer.
    pub fn without_labels(&self) -> DomainDataset {
        DomainDataset {
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    mask: None,
                    instance_map: None,
                    ..s.clone()
                })
                .collect(),
            role: self.role,
            split: self.split,
        }
    }

    pub fn require_non_empty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDataset(what.to_string()));
        }
        Ok(())
    }

    pub fn require_masks(&self, what: &str) -> Result<()> {
        if let Some(s) = self.samples.iter().find(|s| s.mask.is_none()) {
            return Err(Error::Data(format!("{what}: sample '{}' has no mask", s.id)));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Appearance shift applied to a rendered image: hue rotation (degrees),
/// gamma contrast, additive Gaussian noise and background brightness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftParams {
    pub hue_delta: f64,
    pub contrast_gamma: f64,
    pub noise_sigma: f64,
    pub background_level: f64,
}

impl ShiftParams {
    pub fn identity() -> Self {
        ShiftParams {
            hue_delta: 0.0,
            contrast_gamma: 1.0,
            noise_sigma: 0.02,
            background_level: 0.9,
        }
    }

    /// Default target-domain shift used by the desk-scale experiments.
    pub fn desk_target() -> Self {
        ShiftParams {
            hue_delta: 50.0,
            contrast_gamma: 1.6,
            noise_sigma: 0.06,
            background_level: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub nuclei_count_range: (usize, usize),
    pub radius_range: (f64, f64),
    pub shift: ShiftParams,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            nuclei_count_range: (4, 10),
            radius_range: (3.0, 7.0),
            shift: ShiftParams::identity(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (nmin, nmax) = self.nuclei_count_range;
        let (rmin, rmax) = self.radius_range;
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        if nmin == 0 || nmin > nmax {
            return Err(Error::Config(format!("invalid nuclei_count_range ({nmin}, {nmax})")));
        }
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::Config(format!("invalid radius_range ({rmin}, {rmax})")));
        }
        if rmax >= self.image_size as f64 / 2.0 {
            return Err(Error::Config(format!(
                "radius {rmax} must be below half the image size {}",
                self.image_size
            )));
        }
        let s = &self.shift;
        if !(s.contrast_gamma > 0.0) || !(s.noise_sigma >= 0.0) || !(s.background_level > 0.0) || !s.hue_delta.is_finite() {
            return Err(Error::Config("invalid shift parameters".into()));
        }
        Ok(())
    }
}

fn sample_rng(seed: u64, domain: Domain, index: usize) -> ChaCha8Rng {
    let mixed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ domain.salt().wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (index as u64).wrapping_add(1).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Smooth value noise in [-1, 1] on an `size x size` grid.
fn value_noise(size: usize, cells: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let g = cells + 1;
    let grid = Array2::from_shape_fn((g, g), |_| rng.gen_range(-1.0..1.0));
    let scale = cells as f64 / size as f64;
    Array2::from_shape_fn((size, size), |(y, x)| {
        let fy = (y as f64 + 0.5) * scale;
        let fx = (x as f64 + 0.5) * scale;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(cells), (x0 + 1).min(cells));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = grid[[y0, x0]] * (1.0 - tx) + grid[[y0, x1]] * tx;
        let bottom = grid[[y1, x0]] * (1.0 - tx) + grid[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

fn hue_rotation(degrees: f64) -> [[f64; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = (1.0 - c) / 3.0;
    let r = (1.0f64 / 3.0).sqrt() * s;
    let a = c + k;
    let b = k - r;
    let d = k + r;
    [[a, b, d], [d, a, b], [b, d, a]]
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        u * u + v * v <= 1.0
    }

    fn bound(&self) -> f64 {
        self.rx.max(self.ry)
    }
}

const PLACEMENT_ATTEMPTS: usize = 50;
const BACKGROUND_RGB: [f64; 3] = [0.96, 0.80, 0.88];
const NUCLEUS_RGB: [f64; 3] = [0.40, 0.22, 0.56];

fn render(config: &SynthConfig, id: String, domain: Domain, rng: &mut ChaCha8Rng) -> Sample {
    let n = config.image_size;
    let (nmin, nmax) = config.nuclei_count_range;
    let (rmin, rmax) = config.radius_range;
    let k = rng.gen_range(nmin..=nmax);

    let mut ellipses: Vec<Ellipse> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut candidate = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let rx = rng.gen_range(rmin..=rmax);
            let ry = rng.gen_range(rmin..=rmax);
            let margin = rx.max(ry).min(n as f64 / 2.0);
            let cx = rng.gen_range(margin..=n as f64 - margin);
            let cy = rng.gen_range(margin..=n as f64 - margin);
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let e = Ellipse {
                cx,
                cy,
                rx,
                ry,
                cos: angle.cos(),
                sin: angle.sin(),
            };
            let clear = ellipses
                .iter()
                .all(|o| ((o.cx - e.cx).powi(2) + (o.cy - e.cy).powi(2)).sqrt() > o.bound() + e.bound() + 1.0);
            candidate = Some(e);
            if clear {
                break;
            }
        }
        ellipses.push(candidate.expect("at least one attempt"));
    }

    let mut instances = InstanceMap::zeros((n, n));
    for (label, e) in ellipses.iter().enumerate() {
        for y in 0..n {
            for x in 0..n {
                if e.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    instances[[y, x]] = label as u32 + 1;
                }
            }
        }
    }
    let mask = instances.mapv(|v| u8::from(v > 0));

    let background_tex = value_noise(n, 6, rng);
    let nucleus_tex = value_noise(n, 12, rng);
    let shift = &config.shift;
    let rot = hue_rotation(shift.hue_delta);
    let noise = Normal::new(0.0, shift.noise_sigma.max(1e-12)).expect("finite sigma");
    let mut image = Image::zeros((n, n, 3));
    for y in 0..n {
        for x in 0..n {
            let base = if mask[[y, x]] == 1 {
                let t = 1.0 + 0.18 * nucleus_tex[[y, x]];
                NUCLEUS_RGB.map(|c| c * t)
            } else {
                let t = shift.background_level * (1.0 + 0.08 * background_tex[[y, x]]);
                BACKGROUND_RGB.map(|c| c * t)
            };
            for c in 0..3 {
                let rotated = rot[c][0] * base[0] + rot[c][1] * base[1] + rot[c][2] * base[2];
                let mut v = rotated.clamp(0.0, 1.0).powf(shift.contrast_gamma);
                if shift.noise_sigma > 0.0 {
                    v += noise.sample(rng);
                }
                image[[y, x, c]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }

    Sample {
        id,
        image,
        mask: Some(mask),
        instance_map: Some(instances),
        domain,
    }
}

/// Renders `n` images of ellipse nuclei on textured background, colorized by
/// the config's shift. Sample `i` depends only on `(config, domain, i)`.
pub fn generate_synthetic(config: &SynthConfig, n: usize, domain: Domain) -> Result<DomainDataset> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    let prefix = match domain {
        Domain::Source => "src",
        Domain::Target => "tgt",
    };
    let samples = (0..n)
        .map(|i| {
            let mut rng = sample_rng(config.seed, domain, i);
            render(config, format!("{prefix}_{i:05}"), domain, &mut rng)
        })
        .collect();
    let role = match domain {
        Domain::Source => Role::SourceLabeled,
        Domain::Target => Role::TargetUnlabeled,
    };
    DomainDataset::new(samples, role, Split::Train)
}

/// Splits a dataset into consecutive train/val/test blocks.
pub fn split_dataset(ds: &DomainDataset, n_train: usize, n_val: usize, n_test: usize) -> Result<[DomainDataset; 3]> {
    if n_train + n_val + n_test != ds.len() {
        return Err(Error::Config(format!(
            "split sizes {n_train}+{n_val}+{n_test} do not add up to {}",
            ds.len()
        )));
    }
    let mut it = ds.samples.iter().cloned();
    let mut take = |k: usize, split: Split| DomainDataset {
        samples: it.by_ref().take(k).collect(),
        role: ds.role,
        split,
    };
    Ok([take(n_train, Split::Train), take(n_val, Split::Val), take(n_test, Split::Test)])
}

// ---------------------------------------------------------------------------
// Disk IO
// ---------------------------------------------------------------------------

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::read(dir, e))? {
        let path = entry.map_err(|e| Error::read(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if stem.starts_with('.') {
                continue;
            }
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::read(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let rgb = open(path)?.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let data: Vec<f32> = rgb.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Array3::from_shape_vec((h as usize, w as usize, 3), data).map_err(|e| Error::read(path, e))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let g = open(path)?.to_luma8();
    let (w, h) = g.dimensions();
    let data = g.into_raw().into_iter().map(|v| u8::from(v > 127)).collect();
    Array2::from_shape_vec((h as usize, w as usize), data).map_err(|e| Error::read(path, e))
}

pub fn read_instances(path: &Path) -> Result<InstanceMap> {
    let (w, h, data): (u32, u32, Vec<u32>) = match open(path)? {
        DynamicImage::ImageLuma16(g) => (g.width(), g.height(), g.into_raw().into_iter().map(u32::from).collect()),
        DynamicImage::ImageLuma8(g) => (g.width(), g.height(), g.into_raw().into_iter().map(u32::from).collect()),
        _ => return Err(Error::read(path, "instance map must be a single-channel integer image")),
    };
    Array2::from_shape_vec((h as usize, w as usize), data).map_err(|e| Error::read(path, e))
}

fn read_manifest(root: &Path) -> Result<Option<Vec<(Split, String)>>> {
    let path = root.join(MANIFEST_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::read(&path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (split, name) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::read(&path, format!("line {}: expected '<split> <basename>'", i + 1)))?;
        rows.push((split.parse()?, name.trim().to_string()));
    }
    Ok(Some(rows))
}

/// Loads one split of a domain root. Without a manifest every image belongs
/// to the requested split.
pub fn load_dataset(root: &Path, role: Role, split: Split) -> Result<DomainDataset> {
    let image_dir = root.join("images");
    if !image_dir.is_dir() {
        return Err(Error::read(&image_dir, "missing images/ directory"));
    }
    let images = stems(&image_dir)?;
    let masks = stems(&root.join("masks"))?;
    let instances = stems(&root.join("instances"))?;

    let names: Vec<String> = match read_manifest(root)? {
        Some(rows) => rows.into_iter().filter(|(s, _)| *s == split).map(|(_, n)| n).collect(),
        None => images.keys().cloned().collect(),
    };

    let mut samples = Vec::with_capacity(names.len());
    for name in names {
        let image_path = images
            .get(&name)
            .ok_or_else(|| Error::Data(format!("'{name}' listed in manifest but has no image")))?;
        let image = read_image(image_path)?;
        let mask = match masks.get(&name) {
            Some(p) => Some(read_mask(p)?),
            None if role == Role::SourceLabeled => {
                return Err(Error::Data(format!("source image '{name}' has no mask in {}", root.display())))
            }
            None => None,
        };
        let instance_map = instances.get(&name).map(|p| read_instances(p)).transpose()?;
        let sample = Sample {
            id: name,
            image,
            mask,
            instance_map,
            domain: role.domain(),
        };
        sample.validate()?;
        samples.push(sample);
    }
    DomainDataset::new(samples, role, split)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let (h, w, _) = image.dim();
    let raw: Vec<u8> = image
        .as_standard_layout()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size");
    img.save(path).map_err(|e| Error::write(path, e))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.as_standard_layout().iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer size");
    img.save(path).map_err(|e| Error::write(path, e))
}

pub fn write_instances(path: &Path, inst: &InstanceMap) -> Result<()> {
    let (h, w) = inst.dim();
    let raw = inst
        .as_standard_layout()
        .iter()
        .map(|&v| u16::try_from(v).map_err(|_| Error::write(path, format!("instance id {v} exceeds 16 bits"))))
        .collect::<Result<Vec<u16>>>()?;
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer size");
    img.save(path).map_err(|e| Error::write(path, e))
}

/// Writes samples into the directory layout and appends their split to the
/// manifest.
pub fn save_dataset(root: &Path, datasets: &[&DomainDataset]) -> Result<()> {
    for sub in ["images", "masks", "instances"] {
        fs::create_dir_all(root.join(sub)).map_err(|e| Error::write(root.join(sub), e))?;
    }
    let mut manifest = String::new();
    for ds in datasets {
        for s in &ds.samples {
            write_image(&root.join("images").join(format!("{}.png", s.id)), &s.image)?;
            if let Some(m) = &s.mask {
                write_mask(&root.join("masks").join(format!("{}.png", s.id)), m)?;
            }
            if let Some(inst) = &s.instance_map {
                write_instances(&root.join("instances").join(format!("{}.png", s.id)), inst)?;
            }
            manifest.push_str(&format!("{}\t{}\n", ds.split, s.id));
        }
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::write(&path, e))
}

// ---------------------------------------------------------------------------
// Augmentation and pairing
// ---------------------------------------------------------------------------

fn rot90_2d<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((w, h), |(y, x)| a[[x, w - 1 - y]].clone())
}

fn rot90_3d(a: &Image) -> Image {
    let (h, w, c) = a.dim();
    Array3::from_shape_fn((w, h, c), |(y, x, k)| a[[x, w - 1 - y, k]])
}

/// Rotates image, mask and instance map counter-clockwise by `quarter_turns * 90°`.
pub fn rotate_quarter_turns(sample: &Sample, quarter_turns: usize) -> Sample {
    let mut out = sample.clone();
    for _ in 0..quarter_turns % 4 {
        out.image = rot90_3d(&out.image);
        out.mask = out.mask.as_ref().map(rot90_2d);
        out.instance_map = out.instance_map.as_ref().map(rot90_2d);
    }
    out
}

/// Random rotation by an angle drawn uniformly from {0°, 90°, 180°, 270°}.
pub fn augment_rotation<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    rotate_quarter_turns(sample, rng.gen_range(0..4))
}

#[derive(Clone, Debug)]
pub struct PairBatch {
    pub pairs: Vec<(Sample, Sample)>,
}

impl PairBatch {
    pub fn size(&self) -> usize {
        self.pairs.len()
    }

    pub fn sources(&self) -> Vec<&Sample> {
        self.pairs.iter().map(|(s, _)| s).collect()
    }

    pub fn targets(&self) -> Vec<&Sample> {
        self.pairs.iter().map(|(_, t)| t).collect()
    }
}

/// `n` indices drawn uniformly with replacement from `0..len`.
pub fn draw_indices<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..len)).collect()
}

/// Independently and uniformly pairs source and target samples, with replacement.
pub fn sample_pair_batch<R: Rng + ?Sized>(
    source: &DomainDataset,
    target: &DomainDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<PairBatch> {
    source.require_non_empty("source dataset")?;
    target.require_non_empty("target dataset")?;
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let src = draw_indices(source.len(), batch_size, rng);
    let tgt = draw_indices(target.len(), batch_size, rng);
    let pairs = src
        .into_iter()
        .zip(tgt)
        .map(|(i, j)| {
            let mut s = source.samples[i].clone();
            let mut t = target.samples[j].clone();
            s.domain = Domain::Source;
            t.domain = Domain::Target;
            (s, t)
        })
        .collect();
    Ok(PairBatch { pairs })
}

/// Stacks `H x W x 3` images into an NCHW tensor.
pub fn images_to_tensor<F: Real>(samples: &[&Sample]) -> Result<Array4<F>> {
    let first = samples.first().ok_or(Error::EmptyInput("image batch"))?;
    let (h, w, c) = first.image.dim();
    if let Some(bad) = samples.iter().find(|s| s.image.dim() != (h, w, c)) {
        return Err(Error::Shape(format!(
            "image '{}' is {:?}, batch expects {:?}",
            bad.id,
            bad.image.dim(),
            (h, w, c)
        )));
    }
    let mut out = Array4::zeros((samples.len(), c, h, w));
    for (i, s) in samples.iter().enumerate() {
        let chw = s.image.view().permuted_axes([2, 0, 1]);
        out.index_axis_mut(Axis(0), i).assign(&chw.mapv(|v| F::lit(v as f64)));
    }
    Ok(out)
}
