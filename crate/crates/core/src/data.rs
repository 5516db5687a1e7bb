//! Dataset indexing, stratified splitting, preprocessing, augmentation and
//! batch assembly.
//!
//! The layout is `root/<class name>/<image files>`. Class indices follow
//! lexicographic class-name order and every random choice is drawn from a
//! stream keyed by the split seed, the epoch and the sample id, so batches
//! are a pure function of (dataset, seed, epoch).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream_key, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_SPLIT_SEED: u64 = 42;
pub const IMAGE_EXTENSIONS: [&str; 7] = ["ppm", "jpg", "jpeg", "png", "tif", "tiff", "bmp"];

const SPLIT_STREAM: u64 = 0x7370_6c69;
const SHUFFLE_STREAM: u64 = 0x7368_7566;
const AUGMENT_STREAM: u64 = 0x6175_676d;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub class: usize,
    pub id: u64,
    pub split: Split,
}

impl SampleRef {
    pub fn id_hex(&self) -> String {
        format!("{:016x}", self.id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub samples: Vec<SampleRef>,
}

/// First 8 bytes of SHA-256 over the relative path.
pub fn sample_id(relative_path: &str) -> u64 {
    let digest = Sha256::digest(relative_path.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Scans `root`, assigns class indices in sorted-name order and splits
/// every class 50:50 (the odd sample goes to train).
pub fn index_dataset(root: impl AsRef<Path>, split_seed: u64) -> Result<DatasetIndex> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} is not a directory", root.display())));
    }
    let mut classes = Vec::new();
    let mut files_per_class = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Dataset(format!("class directory {} is not valid UTF-8", dir.display())))?
            .to_string();
        if name.starts_with('.') {
            continue;
        }
        let mut files = Vec::new();
        for f in sorted_entries(&dir)? {
            if f.is_file() && is_image(&f) {
                let file = f
                    .file_name()
                    .and_then(|n| n.to_str())
                    .ok_or_else(|| Error::Dataset(format!("file name {} is not valid UTF-8", f.display())))?;
                files.push(format!("{name}/{file}"));
            }
        }
        classes.push(name);
        files_per_class.push(files);
    }
    if classes.is_empty() {
        return Err(Error::Dataset(format!("no class directories under {}", root.display())));
    }
    let empty: Vec<&str> = classes
        .iter()
        .zip(&files_per_class)
        .filter(|(_, f)| f.is_empty())
        .map(|(c, _)| c.as_str())
        .collect();
    if !empty.is_empty() {
        return Err(Error::Dataset(format!("class directories without images: {}", empty.join(", "))));
    }
    let mut samples = Vec::new();
    for (class, files) in files_per_class.into_iter().enumerate() {
        let splits = split_assignment(files.len(), split_seed, class);
        for (path, split) in files.into_iter().zip(splits) {
            samples.push(SampleRef {
                id: sample_id(&path),
                path,
                class,
                split,
            });
        }
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        classes,
        samples,
    })
}

/// Split labels for the `n` path-sorted samples of one class: a seeded
/// shuffle of positions, the first `ceil(n/2)` of which go to train.
pub fn split_assignment(n: usize, split_seed: u64, class: usize) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(split_seed, stream_key(&[SPLIT_STREAM, class as u64])).shuffle(&mut order);
    let mut out = vec![Split::Test; n];
    for &i in &order[..n.div_ceil(2)] {
        out[i] = Split::Train;
    }
    out
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    /// Samples per class, as `(train, test)`.
    pub fn class_counts(&self) -> Vec<(usize, usize)> {
        let mut counts = vec![(0, 0); self.num_classes()];
        for s in &self.samples {
            match s.split {
                Split::Train => counts[s.class].0 += 1,
                Split::Test => counts[s.class].1 += 1,
            }
        }
        counts
    }

    pub fn full_path(&self, sample: &SampleRef) -> PathBuf {
        self.root.join(&sample.path)
    }

    /// CSV with header `path,class,split`.
    pub fn write_split_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        let err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        w.write_record(["path", "class", "split"]).map_err(err)?;
        for s in &self.samples {
            w.write_record([s.path.as_str(), &self.classes[s.class], s.split.as_str()])
                .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Interleaved 8-bit RGB pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.repeat(width * height),
        }
    }
}

pub trait Decoder: Send + Sync {
    fn decode(&self, path: &Path) -> Result<RgbImage>;
}

/// Binary PPM (`P6`, maxval 255).
#[derive(Debug, Clone, Copy, Default)]
pub struct PpmDecoder;

impl PpmDecoder {
    pub fn parse(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<String, String> {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err("truncated header".into()),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
                pos += 1;
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err("not a binary PPM (P6) file".into());
        }
        let mut number = |what: &str| -> std::result::Result<usize, String> {
            token()?.parse().map_err(|_| format!("bad {what}"))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if maxval != 255 {
            return Err(format!("only 8-bit PPM is supported, maxval is {maxval}"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or("image dimensions overflow")?;
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() < need {
            return Err(format!("raster has {} bytes, expected {need}", raster.len()));
        }
        RgbImage::new(width, height, raster[..need].to_vec()).map_err(|e| e.to_string())
    }
}

impl Decoder for PpmDecoder {
    fn decode(&self, path: &Path) -> Result<RgbImage> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes).map_err(|reason| Error::Decode {
            path: path.to_path_buf(),
            reason,
        })
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_ppm(img)).map_err(|e| Error::io(path, e))
}

/// Bilinear resize with corner-aligned sampling, on `[H, W, C]` tensors.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if img.rank() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape {
            shape: img.shape().to_vec(),
            reason: format!("cannot resize to {out_h}x{out_w}"),
        });
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let coords = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let src = if n_out == 1 {
                    0.0
                } else {
                    (i * (n_in - 1)) as f64 / (n_out - 1) as f64
                };
                let lo = (src.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = coords(h, out_h);
    let xs = coords(w, out_w);
    let src = img.data();
    let mut out = vec![0.0; out_h * out_w * c];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * out_w + ox) * c + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

/// A preprocessed image `[size, size, 3]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub id: u64,
}

/// Resize to `size x size` and divide every channel by 255.
pub fn preprocess(img: &RgbImage, size: usize) -> Result<Tensor> {
    let raw = Tensor::new(
        vec![img.height, img.width, 3],
        img.pixels.iter().map(|&p| f64::from(p)).collect(),
    )?;
    let resized = if img.height == size && img.width == size {
        raw
    } else {
        resize_bilinear(&raw, size, size)?
    };
    Ok(resized.map(|v| (v / 255.0).clamp(0.0, 1.0)))
}

pub fn load_and_preprocess(index: &DatasetIndex, sample: &SampleRef, decoder: &dyn Decoder, size: usize) -> Result<Sample> {
    let img = decoder.decode(&index.full_path(sample))?;
    Ok(Sample {
        image: preprocess(&img, size)?,
        label: sample.class,
        id: sample.id,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_rot90: f64,
    pub p_brightness_contrast: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub p_rgb_shift: f64,
    /// Additive per-channel shift range, in pixel units of 1/255.
    pub rgb_shift: f64,
    pub p_median_blur: f64,
    pub median_kernel: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_rot90: 0.5,
            p_brightness_contrast: 0.3,
            brightness: (0.8, 1.2),
            contrast: (0.8, 1.2),
            p_rgb_shift: 0.5,
            rgb_shift: 20.0,
            p_median_blur: 0.4,
            median_kernel: 3,
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_rot90: 0.0,
            p_brightness_contrast: 0.0,
            p_rgb_shift: 0.0,
            p_median_blur: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.p_hflip,
            self.p_vflip,
            self.p_rot90,
            self.p_brightness_contrast,
            self.p_rgb_shift,
            self.p_median_blur,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(format!("augmentation probabilities must be in [0, 1]: {probs:?}")));
        }
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if !range_ok(self.brightness) || !range_ok(self.contrast) {
            return Err(Error::InvalidArgument("brightness/contrast ranges must be positive and ordered".into()));
        }
        if !(self.rgb_shift >= 0.0 && self.rgb_shift <= 255.0) {
            return Err(Error::InvalidArgument("rgb shift must be in [0, 255]".into()));
        }
        if self.median_kernel == 0 || self.median_kernel % 2 == 0 {
            return Err(Error::InvalidArgument("median kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Which transforms fired for one call of [`augment`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Applied {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
    pub brightness_contrast: bool,
    pub rgb_shift: bool,
    pub median_blur: bool,
}

/// The augmentation stream of one sample in one epoch.
pub fn augment_rng(seed: u64, epoch: usize, sample_id: u64) -> Rng {
    Rng::new(seed, stream_key(&[AUGMENT_STREAM, epoch as u64, sample_id]))
}

fn dims(img: &Tensor) -> (usize, usize, usize) {
    let s = img.shape();
    (s[0], s[1], s[2])
}

fn remap(img: &Tensor, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor {
    let (_, w, c) = dims(img);
    let d = img.data();
    let mut out = Vec::with_capacity(img.len());
    for i in 0..out_h {
        for j in 0..out_w {
            let (y, x) = src(i, j);
            out.extend_from_slice(&d[(y * w + x) * c..(y * w + x + 1) * c]);
        }
    }
    Tensor::new(vec![out_h, out_w, c], out).expect("remap preserves size")
}

/// Mirror left-right.
pub fn hflip(img: &Tensor) -> Tensor {
    let (h, w, _) = dims(img);
    remap(img, h, w, |i, j| (i, w - 1 - j))
}

/// Mirror top-bottom.
pub fn vflip(img: &Tensor) -> Tensor {
    let (h, w, _) = dims(img);
    remap(img, h, w, |i, j| (h - 1 - i, j))
}

/// Quarter turn counterclockwise: `out[i][j] = in[j][W-1-i]`.
pub fn rot90(img: &Tensor) -> Tensor {
    let (h, w, _) = dims(img);
    remap(img, w, h, |i, j| (j, w - 1 - i))
}

/// Per-channel median over a `k x k` window with edge replication.
pub fn median_blur(img: &Tensor, k: usize) -> Tensor {
    let (h, w, c) = dims(img);
    let r = (k / 2) as isize;
    let d = img.data();
    let mut out = vec![0.0; img.len()];
    let mut window = Vec::with_capacity(k * k);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                window.clear();
                for dy in -r..=r {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        window.push(d[(yy * w + xx) * c + ch]);
                    }
                }
                window.sort_by(f64::total_cmp);
                out[(y * w + x) * c + ch] = window[window.len() / 2];
            }
        }
    }
    Tensor::new(vec![h, w, c], out).expect("same shape")
}

/// Scales by `brightness`, then stretches around the image mean by
/// `contrast`, clamped to `[0, 1]`.
pub fn brightness_contrast(img: &Tensor, brightness: f64, contrast: f64) -> Tensor {
    let scaled = img.scale(brightness);
    let mean = scaled.sum_all() / scaled.len().max(1) as f64;
    scaled.map(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0))
}

pub fn rgb_shift(img: &Tensor, shift: &[f64]) -> Tensor {
    let c = dims(img).2;
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v + shift[i % c]).clamp(0.0, 1.0);
    }
    out
}

/// Applies the policy's transforms in fixed order, each gated by an
/// independent Bernoulli draw. The label and id are never touched.
pub fn augment(sample: &Sample, policy: &AugmentPolicy, rng: &mut Rng) -> (Sample, Applied) {
    let mut img = sample.image.clone();
    let mut applied = Applied::default();
    if rng.bernoulli(policy.p_hflip) {
        img = hflip(&img);
        applied.hflip = true;
    }
    if rng.bernoulli(policy.p_vflip) {
        img = vflip(&img);
        applied.vflip = true;
    }
    if rng.bernoulli(policy.p_rot90) {
        img = rot90(&img);
        applied.rot90 = true;
    }
    if rng.bernoulli(policy.p_brightness_contrast) {
        let b = rng.uniform_range(policy.brightness.0, policy.brightness.1);
        let c = rng.uniform_range(policy.contrast.0, policy.contrast.1);
        img = brightness_contrast(&img, b, c);
        applied.brightness_contrast = true;
    }
    if rng.bernoulli(policy.p_rgb_shift) {
        let shift: Vec<f64> = (0..dims(&img).2)
            .map(|_| rng.uniform_range(-policy.rgb_shift, policy.rgb_shift) / 255.0)
            .collect();
        img = rgb_shift(&img, &shift);
        applied.rgb_shift = true;
    }
    if rng.bernoulli(policy.p_median_blur) {
        img = median_blur(&img, policy.median_kernel);
        applied.median_blur = true;
    }
    (
        Sample {
            image: img,
            label: sample.label,
            id: sample.id,
        },
        applied,
    )
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, size, size, 3]`
    pub images: Tensor,
    /// One-hot `[B, K]`.
    pub labels: Tensor,
    /// Positions in `DatasetIndex::samples`.
    pub indices: Vec<usize>,
    pub sample_ids: Vec<u64>,
}

impl Batch {
    pub fn label_indices(&self) -> Vec<usize> {
        let k = self.labels.shape()[1];
        self.labels
            .data()
            .chunks(k)
            .map(|row| row.iter().position(|&v| v == 1.0).expect("one-hot row"))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub image_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Applied only when iterating the train split.
    pub augment: Option<AugmentPolicy>,
}

/// Sample order for one epoch: the split's samples in index order, then a
/// shuffle keyed by (seed, epoch) when `shuffle` is set.
pub fn epoch_order(index: &DatasetIndex, split: Split, seed: u64, epoch: usize, shuffle: bool) -> Result<Vec<usize>> {
    let mut order = index.split_indices(split);
    if order.is_empty() {
        return Err(Error::Dataset(format!("{split} split is empty")));
    }
    if shuffle {
        Rng::new(seed, stream_key(&[SHUFFLE_STREAM, epoch as u64])).shuffle(&mut order);
    }
    Ok(order)
}

/// Lazily decodes, preprocesses and (on train) augments one batch at a time.
/// Samples inside a batch are prepared concurrently; batch order and
/// contents do not depend on the thread count.
pub struct BatchIter<'a> {
    index: &'a DatasetIndex,
    decoder: &'a dyn Decoder,
    config: BatchConfig,
    split: Split,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(
        index: &'a DatasetIndex,
        decoder: &'a dyn Decoder,
        split: Split,
        epoch: usize,
        config: BatchConfig,
    ) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if let Some(p) = &config.augment {
            p.validate()?;
        }
        let order = epoch_order(index, split, config.seed, epoch, config.shuffle)?;
        Ok(Self {
            index,
            decoder,
            config,
            split,
            epoch,
            order,
            pos: 0,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.config.batch_size)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    fn prepare(&self, i: usize) -> Result<Sample> {
        let sref = &self.index.samples[i];
        let sample = load_and_preprocess(self.index, sref, self.decoder, self.config.image_size)?;
        match (&self.config.augment, self.split) {
            (Some(policy), Split::Train) => {
                let mut rng = augment_rng(self.config.seed, self.epoch, sref.id);
                Ok(augment(&sample, policy, &mut rng).0)
            }
            _ => Ok(sample),
        }
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.config.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let prepared: Result<Vec<Sample>> = indices.par_iter().map(|&i| self.prepare(i)).collect();
        Some(prepared.and_then(|samples| {
            let k = self.index.num_classes();
            let mut labels = Tensor::zeros(&[samples.len(), k]);
            for (row, s) in samples.iter().enumerate() {
                labels.data_mut()[row * k + s.label] = 1.0;
            }
            let sample_ids = samples.iter().map(|s| s.id).collect();
            let images = Tensor::stack(&samples.into_iter().map(|s| s.image).collect::<Vec<_>>())?;
            Ok(Batch {
                images,
                labels,
                indices,
                sample_ids,
            })
        }))
    }
}
