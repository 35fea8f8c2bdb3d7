//! Image datasets: CIFAR-10 binary batches, the DRIM raw format, splits,
//! normalization, augmentation and batching.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const NUM_CLASSES: usize = 10;
pub const CIFAR_SHAPE: ImageShape = ImageShape {
    channels: 3,
    height: 32,
    width: 32,
};
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
/// Name of the directory the CIFAR-10 binary archive unpacks to.
pub const CIFAR_ARCHIVE_DIR: &str = "cifar-10-batches-bin";
pub const DRIM_MAGIC: &[u8; 4] = b"DRIM";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape {
            channels,
            height,
            width,
        }
    }

    pub fn len(self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn plane(self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

/// Byte images stored `C x H x W` per item, with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: ImageShape,
    images: Vec<u8>,
    labels: Vec<u8>,
    split: SplitTag,
}

impl Dataset {
    pub fn new(shape: ImageShape, images: Vec<u8>, labels: Vec<u8>, split: SplitTag) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Data(format!("empty image shape {shape:?}")));
        }
        if images.len() != labels.len() * shape.len() {
            return Err(Error::Data(format!(
                "{} image bytes for {} labels of {} bytes each",
                images.len(),
                labels.len(),
                shape.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                classes: NUM_CLASSES,
            });
        }
        Ok(Dataset {
            shape,
            images,
            labels,
            split,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.shape.len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    /// Items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Result<Dataset> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!("index {i} out of range for {} items", self.len())));
        }
        let mut images = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset {
            shape: self.shape,
            images,
            labels,
            split,
        })
    }

    /// The first `n` items.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            shape: self.shape,
            images: self.images[..n * self.shape.len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Train and test parts of a corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Dataset,
    pub test: Dataset,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

/// Parses one CIFAR-10 binary batch: records of one label byte followed by
/// the image bytes.
pub fn read_cifar_batch(path: &Path, split: SplitTag) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let record = 1 + CIFAR_SHAPE.len();
    let complete = bytes.len() / record;
    if complete * record != bytes.len() {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: (complete * record) as u64,
        });
    }
    let mut images = Vec::with_capacity(complete * CIFAR_SHAPE.len());
    let mut labels = Vec::with_capacity(complete);
    for (k, r) in bytes.chunks_exact(record).enumerate() {
        if r[0] as usize >= NUM_CLASSES {
            return Err(Error::Format {
                what: "CIFAR-10 batch",
                detail: format!("{}: label {} at byte offset {}", path.display(), r[0], k * record),
            });
        }
        labels.push(r[0]);
        images.extend_from_slice(&r[1..]);
    }
    Dataset::new(CIFAR_SHAPE, images, labels, split)
}

/// Writes `data` as CIFAR-10 binary records.
pub fn write_cifar_batch(path: &Path, data: &Dataset) -> Result<()> {
    if data.shape != CIFAR_SHAPE {
        return Err(Error::Data(format!(
            "CIFAR-10 records hold 3x32x32 images, got {:?}",
            data.shape
        )));
    }
    let mut out = Vec::with_capacity(data.len() * (1 + CIFAR_SHAPE.len()));
    for i in 0..data.len() {
        out.push(data.labels[i]);
        out.extend_from_slice(data.image(i));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Resolves either the archive directory itself or its parent.
pub fn cifar10_dir(root: &Path) -> PathBuf {
    let nested = root.join(CIFAR_ARCHIVE_DIR);
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// Loads the five training batches and the test batch.
pub fn load_cifar10(root: &Path) -> Result<Corpus> {
    let dir = cifar10_dir(root);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        let part = read_cifar_batch(&dir.join(name), SplitTag::Train)?;
        images.extend(part.images);
        labels.extend(part.labels);
    }
    let train = Dataset::new(CIFAR_SHAPE, images, labels, SplitTag::Train)?;
    let test = read_cifar_batch(&dir.join(CIFAR_TEST_FILE), SplitTag::Test)?;
    Ok(Corpus { train, test })
}

/// Writes a corpus in the CIFAR-10 directory layout. The training set is
/// spread evenly over the five batch files.
pub fn write_cifar10(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = corpus.train.len();
    let files = CIFAR_TRAIN_FILES.len();
    for (k, name) in CIFAR_TRAIN_FILES.iter().enumerate() {
        let idx: Vec<usize> = (k * n / files..(k + 1) * n / files).collect();
        write_cifar_batch(&dir.join(name), &corpus.train.subset(&idx, SplitTag::Train)?)?;
    }
    write_cifar_batch(&dir.join(CIFAR_TEST_FILE), &corpus.test)
}

/// Reads a DRIM file: magic, little-endian u32 count, u8 channels, height
/// and width, then per item a label byte and the image bytes.
pub fn load_raw(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let fmt = |detail: String| Error::Format { what: "DRIM", detail };
    if bytes.len() < 11 {
        return Err(fmt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != DRIM_MAGIC {
        return Err(fmt(format!("bad magic {:?}", &bytes[..4])));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes")) as usize;
    let shape = ImageShape::new(bytes[8] as usize, bytes[9] as usize, bytes[10] as usize);
    if shape.is_empty() {
        return Err(fmt(format!("empty image shape {shape:?}")));
    }
    let body = &bytes[11..];
    let record = 1 + shape.len();
    if body.len() != count * record {
        return Err(fmt(format!(
            "header declares {count} items but the body holds {} bytes ({} complete records)",
            body.len(),
            body.len() / record
        )));
    }
    let mut images = Vec::with_capacity(count * shape.len());
    let mut labels = Vec::with_capacity(count);
    for r in body.chunks_exact(record) {
        labels.push(r[0]);
        images.extend_from_slice(&r[1..]);
    }
    Dataset::new(shape, images, labels, SplitTag::Train)
}

pub fn write_raw(path: &Path, data: &Dataset) -> Result<()> {
    let s = data.shape;
    let dims: Vec<u8> = [s.channels, s.height, s.width]
        .iter()
        .map(|&d| u8::try_from(d).map_err(|_| Error::Data(format!("extent {d} does not fit the DRIM header"))))
        .collect::<Result<_>>()?;
    let count = u32::try_from(data.len()).map_err(|_| Error::Data("too many items for DRIM".into()))?;
    let mut out = fs::File::create(path)?;
    out.write_all(DRIM_MAGIC)?;
    out.write_all(&count.to_le_bytes())?;
    out.write_all(&dims)?;
    let mut body = Vec::with_capacity(data.len() * (1 + s.len()));
    for i in 0..data.len() {
        body.push(data.labels[i]);
        body.extend_from_slice(data.image(i));
    }
    out.write_all(&body)?;
    Ok(())
}

/// Class-dependent images: each class has its own base colour and stripe
/// orientation, with uniform pixel noise on top.
pub fn synthetic(n: usize, shape: ImageShape, split: SplitTag, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * shape.len());
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..NUM_CLASSES);
        labels.push(label as u8);
        for c in 0..shape.channels {
            let base = 40.0 + 170.0 * (((label * (2 * c + 1)) % NUM_CLASSES) as f64 / (NUM_CLASSES - 1) as f64);
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let stripe = match label % 3 {
                        0 => y / 2 % 2,
                        1 => x / 2 % 2,
                        _ => (x + y) / 2 % 2,
                    };
                    let v = base + if stripe == 1 { 30.0 } else { -30.0 } + rng.gen_range(-40.0..40.0);
                    images.push(v.clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    Dataset::new(shape, images, labels, split).expect("synthetic labels are in range")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitMode {
    /// Divides the training set into a weight part and an architecture
    /// part; `fraction` goes to the first.
    Search { fraction: f64 },
    /// Holds out `fraction` of the training set for validation.
    Retrain { fraction: f64 },
}

impl SplitMode {
    pub const SEARCH_DEFAULT: SplitMode = SplitMode::Search { fraction: 0.5 };
    /// 5,000 of the 50,000 CIFAR-10 training images.
    pub const RETRAIN_DEFAULT: SplitMode = SplitMode::Retrain { fraction: 0.1 };
}

/// Disjoint index sets whose union is `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    /// `train_cs` when searching, the training part when retraining.
    pub first: Vec<usize>,
    /// `val_cs` when searching, the validation part when retraining.
    pub second: Vec<usize>,
}

/// Random split of `n` items with a fixed seed.
pub fn make_splits(n: usize, mode: SplitMode, seed: u64) -> Result<SplitIndices> {
    let (fraction, first_share) = match mode {
        SplitMode::Search { fraction } => (fraction, true),
        SplitMode::Retrain { fraction } => (fraction, false),
    };
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let k = (fraction * n as f64).round() as usize;
    let first_len = if first_share { k } else { n - k };
    if first_len == 0 || first_len == n {
        return Err(Error::Data(format!(
            "{n} items are too few to split with fraction {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let second = order.split_off(first_len);
    Ok(SplitIndices { first: order, second })
}

/// Smallest accepted standard deviation.
pub const MIN_STD: f64 = 1e-8;

/// Per-channel statistics of `x / 255`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics over every pixel of the split.
    pub fn compute(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("cannot compute statistics of an empty split".into()));
        }
        let s = data.shape;
        let count = (data.len() * s.plane()) as f64;
        let planes = || (0..data.len()).flat_map(|i| data.image(i).chunks_exact(s.plane()).enumerate());
        let mut mean = vec![0.0f64; s.channels];
        for (c, plane) in planes() {
            mean[c] += plane.iter().map(|&b| b as f64 / 255.0).sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0f64; s.channels];
        for (c, plane) in planes() {
            var[c] += plane.iter().map(|&b| (b as f64 / 255.0 - mean[c]).powi(2)).sum::<f64>();
        }
        let std = var.iter().map(|v| (v / count).sqrt()).collect();
        let stats = NormStats { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(Error::Data("mean and std need one entry per channel".into()));
        }
        if self.std.iter().any(|&s| !(s > MIN_STD && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Data(format!("degenerate statistics {self:?}")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read_file(path)?).map_err(|e| Error::Format {
            what: "normalization statistics",
            detail: e.to_string(),
        })?;
        text.parse()
    }
}

impl fmt::Display for NormStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (key, values) in [("mean", &self.mean), ("std", &self.std)] {
            write!(f, "{key}")?;
            for v in values {
                write!(f, " {v}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl FromStr for NormStats {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let fmt = |detail: String| Error::Format {
            what: "normalization statistics",
            detail,
        };
        let mut mean = None;
        let mut std = None;
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let mut parts = line.split_whitespace();
            let key = parts.next().expect("non-empty line");
            let values = parts
                .map(|p| p.parse::<f64>().map_err(|_| fmt(format!("bad number `{p}`"))))
                .collect::<Result<Vec<_>>>()?;
            let slot = match key {
                "mean" => &mut mean,
                "std" => &mut std,
                other => return Err(fmt(format!("unknown key `{other}`"))),
            };
            if slot.replace(values).is_some() {
                return Err(fmt(format!("duplicate `{key}` line")));
            }
        }
        let stats = NormStats {
            mean: mean.ok_or_else(|| fmt("missing `mean` line".into()))?,
            std: std.ok_or_else(|| fmt("missing `std` line".into()))?,
        };
        stats.validate()?;
        Ok(stats)
    }
}

/// `(x / 255 - mean) / std` per channel of one image.
pub fn normalize<F: Scalar>(image: &[u8], shape: ImageShape, stats: &NormStats) -> Result<Vec<F>> {
    if image.len() != shape.len() || stats.mean.len() != shape.channels {
        return Err(Error::Shape {
            op: "normalize",
            detail: format!(
                "{} bytes for shape {shape:?} with {}-channel statistics",
                image.len(),
                stats.mean.len()
            ),
        });
    }
    Ok(image
        .chunks_exact(shape.plane())
        .enumerate()
        .flat_map(|(c, plane)| {
            plane
                .iter()
                .map(move |&b| F::from_f64((b as f64 / 255.0 - stats.mean[c]) / stats.std[c]))
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub crop_pad: usize,
    /// Side of the zeroed square; 0 disables cutout.
    pub cutout_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            crop_pad: 4,
            cutout_size: 16,
        }
    }
}

/// Mirrors every row.
pub fn hflip<F: Copy>(image: &mut [F], shape: ImageShape) {
    for row in image.chunks_exact_mut(shape.width) {
        row.reverse();
    }
}

/// Zero-pads by `pad` on every side and crops the window whose top-left
/// corner is `(dy, dx)` in padded coordinates. `(pad, pad)` is the identity.
pub fn pad_crop<F: Scalar>(image: &[F], shape: ImageShape, pad: usize, dy: usize, dx: usize) -> Vec<F> {
    debug_assert!(dy <= 2 * pad && dx <= 2 * pad);
    let (h, w) = (shape.height as isize, shape.width as isize);
    let mut out = vec![F::zero(); image.len()];
    for c in 0..shape.channels {
        let plane = &image[c * shape.plane()..(c + 1) * shape.plane()];
        let dst = &mut out[c * shape.plane()..(c + 1) * shape.plane()];
        for y in 0..h {
            let sy = y + dy as isize - pad as isize;
            if !(0..h).contains(&sy) {
                continue;
            }
            for x in 0..w {
                let sx = x + dx as isize - pad as isize;
                if (0..w).contains(&sx) {
                    dst[(y * w + x) as usize] = plane[(sy * w + sx) as usize];
                }
            }
        }
    }
    out
}

/// Zeroes the `size x size` square centred at `(cy, cx)`, clipped at the
/// borders, in every channel.
pub fn cutout<F: Scalar>(image: &mut [F], shape: ImageShape, size: usize, cy: usize, cx: usize) {
    if size == 0 {
        return;
    }
    let y0 = cy.saturating_sub(size / 2);
    let x0 = cx.saturating_sub(size / 2);
    let y1 = (cy + size - size / 2).min(shape.height);
    let x1 = (cx + size - size / 2).min(shape.width);
    for plane in image.chunks_exact_mut(shape.plane()) {
        for y in y0..y1 {
            plane[y * shape.width + x0..y * shape.width + x1].fill(F::zero());
        }
    }
}

/// Flip, then pad-and-crop, then cutout, on a normalized image.
pub fn augment<F: Scalar, R: Rng + ?Sized>(image: &[F], shape: ImageShape, cfg: &AugmentConfig, rng: &mut R) -> Vec<F> {
    let mut out = image.to_vec();
    if rng.gen_bool(cfg.hflip_prob.clamp(0.0, 1.0)) {
        hflip(&mut out, shape);
    }
    let dy = rng.gen_range(0..=2 * cfg.crop_pad);
    let dx = rng.gen_range(0..=2 * cfg.crop_pad);
    let mut out = pad_crop(&out, shape, cfg.crop_pad, dy, dx);
    let cy = rng.gen_range(0..shape.height);
    let cx = rng.gen_range(0..shape.width);
    cutout(&mut out, shape, cfg.cutout_size, cy, cx);
    out
}

/// Random stream for one item of one epoch, independent of how items are
/// distributed over workers.
pub fn item_rng(seed: u64, epoch: usize, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) ^ item as u64);
    rng
}

/// Whether a batch is built for training (augmented) or evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pipeline {
    Train {
        augment: Option<AugmentConfig>,
        seed: u64,
        epoch: usize,
    },
    Eval,
}

impl Pipeline {
    pub fn augments(&self) -> bool {
        matches!(self, Pipeline::Train { augment: Some(_), .. })
    }
}

/// Normalized `N x C x H x W` tensor and labels for the items at `indices`.
pub fn make_batch<F: Scalar>(
    data: &Dataset,
    indices: &[usize],
    stats: &NormStats,
    pipeline: Pipeline,
) -> Result<(Tensor<F>, Vec<usize>)> {
    if indices.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let s = data.shape;
    let mut values = Vec::with_capacity(indices.len() * s.len());
    for &i in indices {
        if i >= data.len() {
            return Err(Error::Data(format!("index {i} out of range for {} items", data.len())));
        }
        let image = normalize::<F>(data.image(i), s, stats)?;
        match pipeline {
            Pipeline::Train {
                augment: Some(cfg),
                seed,
                epoch,
            } => values.extend(augment(&image, s, &cfg, &mut item_rng(seed, epoch, i))),
            _ => values.extend(image),
        }
    }
    let labels = indices.iter().map(|&i| data.label(i)).collect();
    Ok((
        Tensor::new(&[indices.len(), s.channels, s.height, s.width], values)?,
        labels,
    ))
}

/// Batches of a seeded permutation of `0..n`; the last batch may be short.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut item_rng(seed, epoch, usize::MAX >> 32));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Batches of `0..n` in order.
pub fn sequential_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
