//! Patch extraction, dataset splits, the synthetic nuclei generator and PNG
//! I/O.
//!
//! On disk a dataset is `images/*.png` plus `masks/*.png` with matching stems
//! and an optional `manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::{Real, Tensor};

/// 8-bit interleaved RGB raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::shape(
                "image",
                format!("{width}x{height} RGB image needs {} bytes, got {}", width * height * 3, data.len()),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::shape("crop", format!("window {w}x{h} at ({x0}, {y0}) exceeds {}x{}", self.width, self.height)));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        Self::new(w, h, data)
    }

    /// Channel-first values scaled to [0, 1], shape `1 x 3 x H x W`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut out = vec![T::zero(); 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = T::of(px[c] as f64 / 255.0);
            }
        }
        Tensor::new(vec![1, 3, self.height, self.width], out).expect("image extents")
    }
}

fn crop_mask(mask: &BinaryMask, x0: usize, y0: usize, w: usize, h: usize) -> Result<BinaryMask> {
    BinaryMask::from_fn(w, h, |x, y| mask.get(x0 + x, y0 + y))
}

/// One training example.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabeledSample {
    /// Unique name, used as the file stem on disk.
    pub id: String,
    /// Image the sample was cut from; splits never separate a source.
    pub source: String,
    pub origin: (usize, usize),
    pub image: RgbImage,
    pub mask: BinaryMask,
}

impl LabeledSample {
    pub fn new(id: impl Into<String>, source: impl Into<String>, image: RgbImage, mask: BinaryMask) -> Result<Self> {
        let id = id.into();
        if (image.width, image.height) != (mask.width(), mask.height()) {
            return Err(Error::shape(
                "sample",
                format!(
                    "`{id}`: image is {}x{}, mask is {}x{}",
                    image.width,
                    image.height,
                    mask.width(),
                    mask.height()
                ),
            ));
        }
        Ok(Self {
            id,
            source: source.into(),
            origin: (0, 0),
            image,
            mask,
        })
    }
}

/// Window origins along one axis: multiples of `stride`, with the last window
/// pulled back to end at the edge.
pub fn patch_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if patch == 0 || stride == 0 || len < patch {
        return Vec::new();
    }
    let last = len - patch;
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o < last).collect();
    out.push(last);
    out
}

/// Cuts `patch x patch` windows in row-major order. Patch ids are
/// `{source}_{x}_{y}`.
pub fn extract_patches(
    source: &str,
    image: &RgbImage,
    mask: &BinaryMask,
    patch: usize,
    stride: usize,
) -> Result<Vec<LabeledSample>> {
    if patch == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be positive".into()));
    }
    if (image.width, image.height) != (mask.width(), mask.height()) {
        return Err(Error::shape("extract_patches", format!("`{source}`: image and mask extents differ")));
    }
    if image.width < patch || image.height < patch {
        return Err(Error::InvalidArgument(format!(
            "`{source}` is {}x{}, smaller than the {patch}x{patch} patch",
            image.width, image.height
        )));
    }
    let xs = patch_origins(image.width, patch, stride);
    let ys = patch_origins(image.height, patch, stride);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            out.push(LabeledSample {
                id: format!("{source}_{x}_{y}"),
                source: source.to_string(),
                origin: (x, y),
                image: image.crop(x, y, patch, patch)?,
                mask: crop_mask(mask, x, y, patch, patch)?,
            });
        }
    }
    Ok(out)
}

/// Pastes patches back into a `width x height` frame. Later patches
/// overwrite earlier ones where windows overlap.
pub fn reassemble(patches: &[LabeledSample], width: usize, height: usize) -> Result<(RgbImage, BinaryMask)> {
    let mut data = vec![0u8; width * height * 3];
    let mut mask = BinaryMask::empty(width, height)?;
    for p in patches {
        let (x0, y0) = p.origin;
        let (w, h) = (p.image.width, p.image.height);
        if x0 + w > width || y0 + h > height {
            return Err(Error::shape("reassemble", format!("patch `{}` falls outside the frame", p.id)));
        }
        for y in 0..h {
            let dst = ((y0 + y) * width + x0) * 3;
            data[dst..dst + w * 3].copy_from_slice(&p.image.data[y * w * 3..(y + 1) * w * 3]);
            for x in 0..w {
                mask.set(x0 + x, y0 + y, p.mask.get(x, y));
            }
        }
    }
    Ok((RgbImage::new(width, height, data)?, mask))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub fractions: Vec<f64>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Shuffles the distinct sources with `seed` and partitions them by
/// `fractions` (train, val and optionally test). Split sizes use cumulative
/// rounding, so (0.7, 0.2, 0.1) over 200 sources gives 140/40/20.
pub fn split(samples: &[LabeledSample], fractions: &[f64], seed: u64) -> Result<SplitManifest> {
    let pairs: Vec<(&str, &str)> = samples.iter().map(|s| (s.id.as_str(), s.source.as_str())).collect();
    split_ids(&pairs, fractions, seed)
}

/// [`split`] over `(sample id, source id)` pairs.
pub fn split_ids(samples: &[(&str, &str)], fractions: &[f64], seed: u64) -> Result<SplitManifest> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty sample set".into()));
    }
    if !(2..=3).contains(&fractions.len()) || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::InvalidArgument(format!(
            "expected 2 or 3 fractions in [0, 1], got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("fractions must sum to 1, got {total}")));
    }
    let mut sources: Vec<&str> = samples.iter().map(|&(_, s)| s).collect::<BTreeSet<_>>().into_iter().collect();
    sources.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = sources.len();
    let mut bounds = vec![0];
    let mut cum = 0.0;
    for f in fractions {
        cum += f;
        bounds.push(((cum * n as f64).round() as usize).min(n));
    }
    *bounds.last_mut().expect("bounds") = n;
    let mut which = BTreeMap::new();
    for k in 0..fractions.len() {
        for s in &sources[bounds[k]..bounds[k + 1]] {
            which.insert(*s, k);
        }
    }
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    for &(id, src) in samples {
        parts[which[src]].push(id.to_string());
    }
    let [train, val, test] = parts;
    Ok(SplitManifest {
        train,
        val,
        test,
        seed,
        fractions: fractions.to_vec(),
    })
}

/// Geometry and colors of the synthetic nuclei images.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthStyle {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Semi-axis range as fractions of the image size.
    pub min_axis: f64,
    pub max_axis: f64,
    pub noise_std: f64,
}

impl Default for SynthStyle {
    fn default() -> Self {
        Self {
            min_objects: 3,
            max_objects: 8,
            min_axis: 1.0 / 8.0,
            max_axis: 1.0 / 4.0,
            noise_std: 8.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// `n` square images with dark elliptical "nuclei" on a light textured
/// background. Masks are exactly the union of the ellipses, tested at pixel
/// centers.
pub fn generate_synthetic(n: usize, size: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    generate_synthetic_with(n, size, seed, &SynthStyle::default())
}

pub fn generate_synthetic_with(n: usize, size: usize, seed: u64, style: &SynthStyle) -> Result<Vec<LabeledSample>> {
    if size == 0 || !size.is_multiple_of(8) {
        return Err(Error::InvalidArgument(format!("synthetic image size must be a positive multiple of 8, got {size}")));
    }
    if style.min_objects > style.max_objects || !(0.0 < style.min_axis && style.min_axis <= style.max_axis) {
        return Err(Error::InvalidArgument("inconsistent synthetic style".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(master.random());
            let (image, mask) = render_sample(size, style, &mut rng);
            let id = format!("synth_{i:04}");
            LabeledSample::new(id.clone(), id, image, mask)
        })
        .collect()
}

fn render_sample(size: usize, style: &SynthStyle, rng: &mut ChaCha8Rng) -> (RgbImage, BinaryMask) {
    let s = size as f64;
    let count = rng.random_range(style.min_objects..=style.max_objects);
    let ellipses: Vec<(Ellipse, [f64; 3])> = (0..count)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let e = Ellipse {
                cx: rng.random_range(0.0..s),
                cy: rng.random_range(0.0..s),
                a: rng.random_range(style.min_axis..=style.max_axis) * s,
                b: rng.random_range(style.min_axis..=style.max_axis) * s,
                cos: theta.cos(),
                sin: theta.sin(),
            };
            let color = [
                95.0 + rng.random_range(-20.0..20.0),
                55.0 + rng.random_range(-20.0..20.0),
                135.0 + rng.random_range(-20.0..20.0),
            ];
            (e, color)
        })
        .collect();
    let background = [
        225.0 + rng.random_range(-10.0..10.0),
        195.0 + rng.random_range(-10.0..10.0),
        215.0 + rng.random_range(-10.0..10.0),
    ];
    let (fx, fy) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, style.noise_std).expect("finite std");
    let mut data = Vec::with_capacity(size * size * 3);
    let mut bits = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = ellipses.iter().rev().find(|(e, _)| e.contains(px, py));
            bits.push(inside.is_some());
            let texture = 12.0 * (fx * px + phase).sin() * (fy * py).cos();
            let base = inside.map_or(background, |(_, c)| *c);
            for c in base {
                let v = c + texture + noise.sample(rng);
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    (
        RgbImage::new(size, size, data).expect("extents"),
        BinaryMask::new(size, size, bits).expect("extents"),
    )
}

/// Stacks samples into an `N x 3 x H x W` image batch and an `N x 1 x H x W`
/// mask batch.
pub fn batch<T: Real>(samples: &[&LabeledSample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (w, h) = (first.image.width, first.image.height);
    let plane = w * h;
    let mut x = Vec::with_capacity(samples.len() * 3 * plane);
    let mut y = Vec::with_capacity(samples.len() * plane);
    for s in samples {
        if (s.image.width, s.image.height) != (w, h) {
            return Err(Error::shape("batch", format!("sample `{}` is not {w}x{h}", s.id)));
        }
        x.extend_from_slice(s.image.to_tensor::<T>().data());
        y.extend(s.mask.bits().iter().map(|&b| if b { T::one() } else { T::zero() }));
    }
    Ok((
        Tensor::new(vec![samples.len(), 3, h, w], x)?,
        Tensor::new(vec![samples.len(), 1, h, w], y)?,
    ))
}

/// Optional training-time flips, off by default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
}

impl Augmentation {
    pub fn is_identity(&self) -> bool {
        !self.horizontal_flip && !self.vertical_flip
    }

    /// Flips each enabled axis with probability 1/2.
    pub fn apply<R: Rng>(&self, sample: &LabeledSample, rng: &mut R) -> LabeledSample {
        let fx = self.horizontal_flip && rng.random::<bool>();
        let fy = self.vertical_flip && rng.random::<bool>();
        if !fx && !fy {
            return sample.clone();
        }
        let (w, h) = (sample.image.width, sample.image.height);
        let src = |x: usize, y: usize| (if fx { w - 1 - x } else { x }, if fy { h - 1 - y } else { y });
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = src(x, y);
                data.extend_from_slice(&sample.image.pixel(sx, sy));
            }
        }
        let mask = BinaryMask::from_fn(w, h, |x, y| {
            let (sx, sy) = src(x, y);
            sample.mask.get(sx, sy)
        })
        .expect("extents");
        LabeledSample {
            image: RgbImage::new(w, h, data).expect("extents"),
            mask,
            ..sample.clone()
        }
    }
}

/// Mirror index for reflection padding (edge pixel not repeated).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Pads on the bottom and right by reflection so both extents are multiples
/// of `multiple`.
pub fn reflect_pad(image: &RgbImage, multiple: usize) -> RgbImage {
    let w = image.width.div_ceil(multiple) * multiple;
    let h = image.height.div_ceil(multiple) * multiple;
    if (w, h) == (image.width, image.height) {
        return image.clone();
    }
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let sy = reflect(y as isize, image.height);
        for x in 0..w {
            let sx = reflect(x as isize, image.width);
            data.extend_from_slice(&image.pixel(sx, sy));
        }
    }
    RgbImage::new(w, h, data).expect("extents")
}

/// Bilinear resize of an image.
pub fn resize_image(image: &RgbImage, width: usize, height: usize) -> Result<RgbImage> {
    let src = image::RgbImage::from_raw(image.width as u32, image.height as u32, image.data.clone())
        .expect("consistent raster");
    let out = image::imageops::resize(&src, width as u32, height as u32, image::imageops::FilterType::Triangle);
    RgbImage::new(width, height, out.into_raw())
}

/// Nearest-neighbour resize of a mask.
pub fn resize_mask(mask: &BinaryMask, width: usize, height: usize) -> Result<BinaryMask> {
    BinaryMask::from_fn(width, height, |x, y| {
        let sx = ((x as f64 + 0.5) * mask.width() as f64 / width as f64) as usize;
        let sy = ((y as f64 + 0.5) * mask.height() as f64 / height as f64) as usize;
        mask.get(sx.min(mask.width() - 1), sy.min(mask.height() - 1))
    })
}

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Reads an 8-bit PNG as RGB; grayscale inputs are replicated to three channels.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let rgb = img.to_rgb8();
    RgbImage::new(rgb.width() as usize, rgb.height() as usize, rgb.into_raw())
}

/// Reads a PNG as 8-bit grayscale, returning `(width, height, values)`.
pub fn load_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let g = img.to_luma8();
    Ok((g.width() as usize, g.height() as usize, g.into_raw()))
}

pub const MASK_THRESHOLD: u8 = 128;

/// Reads a mask: gray values of at least 128 are foreground.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let (w, h, g) = load_gray(path)?;
    BinaryMask::new(w, h, g.into_iter().map(|v| v >= MASK_THRESHOLD).collect())
}

pub fn save_image(path: &Path, image: &RgbImage) -> Result<()> {
    image::save_buffer(
        path,
        &image.data,
        image.width as u32,
        image.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| image_error(path, e))
}

pub fn save_gray(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    image::save_buffer(path, values, width as u32, height as u32, image::ExtendedColorType::L8)
        .map_err(|e| image_error(path, e))
}

/// Writes a mask as 0/255 grayscale.
pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let values: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    save_gray(path, mask.width(), mask.height(), &values)
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `images/{id}.png` and `masks/{id}.png` for every sample.
pub fn write_dataset(dir: &Path, samples: &[LabeledSample]) -> Result<()> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    create_dir(&images)?;
    create_dir(&masks)?;
    for s in samples {
        save_image(&images.join(format!("{}.png", s.id)), &s.image)?;
        save_mask(&masks.join(format!("{}.png", s.id)), &s.mask)?;
    }
    Ok(())
}

/// PNG files of a directory keyed by stem, in sorted order.
pub fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Pairs `images/*.png` with `masks/*.png` by stem. Each pair is its own
/// source unless its stem matches a patch id (`{source}_{x}_{y}`).
pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledSample>> {
    let images = png_stems(&dir.join("images"))?;
    let masks = png_stems(&dir.join("masks"))?;
    images
        .iter()
        .map(|(stem, path)| {
            let mask_path = masks
                .get(stem)
                .ok_or_else(|| Error::InvalidArgument(format!("image `{stem}` has no mask in {}", dir.join("masks").display())))?;
            let image = load_image(path)?;
            let mask = load_mask(mask_path)?;
            let (source, origin) = parse_patch_id(stem);
            let mut sample = LabeledSample::new(stem.clone(), source, image, mask)
                .map_err(|e| image_error(mask_path, e))?;
            sample.origin = origin;
            Ok(sample)
        })
        .collect()
}

fn parse_patch_id(stem: &str) -> (String, (usize, usize)) {
    let mut parts = stem.rsplitn(3, '_');
    if let (Some(y), Some(x), Some(src)) = (parts.next(), parts.next(), parts.next()) {
        if let (Ok(x), Ok(y)) = (x.parse(), y.parse()) {
            return (src.to_string(), (x, y));
        }
    }
    (stem.to_string(), (0, 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> (RgbImage, BinaryMask) {
        let data = (0..w * h).flat_map(|i| [(i % 251) as u8, (i / 7 % 256) as u8, (i * 13 % 256) as u8]).collect();
        let mask = BinaryMask::from_fn(w, h, |x, y| (x * 3 + y) % 5 == 0).unwrap();
        (RgbImage::new(w, h, data).unwrap(), mask)
    }

    #[test]
    fn origins() {
        assert_eq!(patch_origins(1000, 256, 256), [0, 256, 512, 744]);
        assert_eq!(patch_origins(256, 256, 256), [0]);
        assert_eq!(patch_origins(512, 256, 256), [0, 256]);
        assert_eq!(patch_origins(300, 256, 128), [0, 44]);
        assert!(patch_origins(100, 256, 256).is_empty());
    }

    #[test]
    fn patches_and_reassembly() {
        let (img, mask) = gradient_image(64, 48);
        let patches = extract_patches("src", &img, &mask, 16, 16).unwrap();
        assert_eq!(patches.len(), 12);
        assert_eq!(patches[1].id, "src_16_0");
        assert_eq!(patches[4].origin, (0, 16));
        let (img2, mask2) = reassemble(&patches, 64, 48).unwrap();
        assert_eq!(img2, img);
        assert_eq!(mask2, mask);
        assert!(extract_patches("src", &img, &mask, 64, 64).is_err());
    }

    #[test]
    fn patch_id_parsing() {
        assert_eq!(parse_patch_id("slide_a_256_744"), ("slide_a".to_string(), (256, 744)));
        assert_eq!(parse_patch_id("synth_0003"), ("synth_0003".to_string(), (0, 0)));
    }

    #[test]
    fn split_counts_and_leakage() {
        let ids: Vec<String> = (0..30).flat_map(|s| (0..3).map(move |p| format!("{s}:{p}"))).collect();
        let pairs: Vec<(&str, &str)> = ids.iter().map(|id| (id.as_str(), id.split(':').next().unwrap())).collect();
        let m = split_ids(&pairs, &[0.7, 0.3], 5).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (63, 27, 0));
        let src = |v: &Vec<String>| v.iter().map(|i| i.split(':').next().unwrap().to_string()).collect::<BTreeSet<_>>();
        assert!(src(&m.train).is_disjoint(&src(&m.val)));
        assert_eq!(m, split_ids(&pairs, &[0.7, 0.3], 5).unwrap());
        let all = split_ids(&pairs, &[1.0, 0.0], 1).unwrap();
        assert_eq!(all.train.len(), 90);
        assert!(split_ids(&[], &[1.0, 0.0], 1).is_err());
        assert!(split_ids(&pairs, &[0.5, 0.4], 1).is_err());
    }

    #[test]
    fn default_three_way_split() {
        let ids: Vec<String> = (0..200).map(|i| format!("s{i}")).collect();
        let pairs: Vec<(&str, &str)> = ids.iter().map(|i| (i.as_str(), i.as_str())).collect();
        let m = split_ids(&pairs, &[0.7, 0.2, 0.1], 42).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (140, 40, 20));
    }

    #[test]
    fn synthetic_is_seeded_and_consistent() {
        let a = generate_synthetic(4, 32, 9).unwrap();
        assert_eq!(a, generate_synthetic(4, 32, 9).unwrap());
        assert_ne!(a, generate_synthetic(4, 32, 10).unwrap());
        assert!(generate_synthetic(1, 30, 0).is_err());
        for s in &a {
            let fg = s.mask.count();
            assert!(fg > 0 && fg < 32 * 32, "{fg}");
        }
    }

    #[test]
    fn reflection_padding() {
        assert_eq!((0..7).map(|i| reflect(i, 4)).collect::<Vec<_>>(), [0, 1, 2, 3, 2, 1, 0]);
        let (img, _) = gradient_image(5, 3);
        let p = reflect_pad(&img, 4);
        assert_eq!((p.width(), p.height()), (8, 4));
        assert_eq!(p.pixel(5, 0), img.pixel(3, 0));
        assert_eq!(p.pixel(0, 3), img.pixel(0, 1));
        assert_eq!(p.crop(0, 0, 5, 3).unwrap(), img);
    }

    #[test]
    fn png_round_trip_and_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = gradient_image(7, 5);
        let path = dir.path().join("a.png");
        save_image(&path, &img).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
        let gpath = dir.path().join("m.png");
        save_gray(&gpath, 3, 1, &[200, 100, 128]).unwrap();
        assert_eq!(load_mask(&gpath).unwrap().bits(), &[true, false, true]);
        let err = load_image(&dir.path().join("missing.png")).unwrap_err().to_string();
        assert!(err.contains("missing.png"), "{err}");
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(3, 16, 1).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), samples);
        fs::remove_file(dir.path().join("masks/synth_0001.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("synth_0001"), "{err}");
    }

    #[test]
    fn batch_layout() {
        let samples = generate_synthetic(2, 8, 3).unwrap();
        let refs: Vec<&LabeledSample> = samples.iter().collect();
        let (x, y) = batch::<f32>(&refs).unwrap();
        assert_eq!(x.shape(), &[2, 3, 8, 8]);
        assert_eq!(y.shape(), &[2, 1, 8, 8]);
        let px = samples[1].image.pixel(2, 1);
        assert_eq!(x.data()[3 * 64 + 64 + 8 + 2], px[1] as f32 / 255.0);
    }

    #[test]
    fn flips_keep_image_and_mask_aligned() {
        let s = &generate_synthetic(1, 16, 4).unwrap()[0];
        let aug = Augmentation {
            horizontal_flip: true,
            vertical_flip: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..4 {
            let f = aug.apply(s, &mut rng);
            assert_eq!(f.mask.count(), s.mask.count());
            let mut a: Vec<u8> = f.image.data().to_vec();
            let mut b: Vec<u8> = s.image.data().to_vec();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }
}
