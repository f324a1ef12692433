//! Dataset loading, labeled splits and batch sampling.
//!
//! Images are kept as 8-bit HWC buffers and converted to `[0,1]` floats on
//! access; the STL-10 unlabeled set alone would need about 11 GB as `f32`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::augment::Image;
use crate::config::TrainConfig;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: file not found; {hint}")]
    Missing { path: PathBuf, hint: String },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown dataset `{0}` (expected cifar10, cifar100, svhn, stl10 or synthetic-shapes)")]
    UnknownDataset(String),
    #[error("dataset `{0}` needs a data root (--data-root or DOUBLEMATCH_DATA)")]
    NoRoot(String),
    #[error("invalid split: {0}")]
    Split(String),
}

/// Images of one size stored as 8-bit HWC, with optional labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageSet {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        if self.image_len() == 0 {
            0
        } else {
            self.pixels.len() / self.image_len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_labels(&self) -> bool {
        !self.labels.is_empty()
    }

    pub fn push_raw(&mut self, hwc: &[u8], label: Option<usize>) {
        assert_eq!(hwc.len(), self.image_len());
        self.pixels.extend_from_slice(hwc);
        if let Some(l) = label {
            self.labels.push(l);
        }
    }

    /// Quantise a `[0,1]` image to 8 bits and append it.
    pub fn push_image(&mut self, img: &Image, label: Option<usize>) {
        let raw: Vec<u8> = img.pixels().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        self.push_raw(&raw, label);
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> Image {
        let data = self.raw(i).iter().map(|&v| v as f32 / 255.0).collect();
        Image::new(self.height, self.width, self.channels, data).expect("consistent image size")
    }

    /// Per-channel mean pixel value in `[0,1]`.
    pub fn channel_mean(&self) -> Vec<f32> {
        let c = self.channels;
        let mut sum = vec![0f64; c];
        for (i, &v) in self.pixels.iter().enumerate() {
            sum[i % c] += v as f64;
        }
        let count = (self.pixels.len() / c.max(1)).max(1) as f64;
        sum.iter().map(|s| (s / count / 255.0) as f32).collect()
    }
}

/// A train/test partition plus images that are only ever used unlabeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub train: ImageSet,
    pub test: ImageSet,
    /// STL-10's unlabeled set, or the synthetic distractor class.
    pub extra_unlabeled: ImageSet,
}

impl Dataset {
    /// Image `u` of the combined pool: training images first, then the extras.
    pub fn pool_image(&self, u: usize) -> Image {
        if u < self.train.len() {
            self.train.image(u)
        } else {
            self.extra_unlabeled.image(u - self.train.len())
        }
    }

    pub fn image_size(&self) -> usize {
        self.train.height
    }
}

fn open(path: &Path, hint: &str) -> Result<BufReader<File>, DataError> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(DataError::Missing {
            path: path.to_path_buf(),
            hint: hint.to_string(),
        }),
        Err(source) => Err(DataError::Io {
            path: path.to_path_buf(),
            source,
        }),
    }
}

fn read_all(path: &Path, hint: &str) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    open(path, hint)?
        .read_to_end(&mut buf)
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(buf)
}

fn corrupt(path: &Path, message: impl Into<String>) -> DataError {
    DataError::Corrupt {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Records of `label_bytes` label bytes followed by a 3×32×32 CHW image.
fn read_cifar_records(path: &Path, label_bytes: usize, label_index: usize, classes: usize, hint: &str, out: &mut ImageSet) -> Result<(), DataError> {
    let bytes = read_all(path, hint)?;
    let rec = label_bytes + 3072;
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(corrupt(path, format!("size {} is not a multiple of the {rec}-byte record", bytes.len())));
    }
    let mut hwc = vec![0u8; 3072];
    for r in bytes.chunks_exact(rec) {
        let label = r[label_index] as usize;
        if label >= classes {
            return Err(corrupt(path, format!("label {label} out of range")));
        }
        let img = &r[label_bytes..];
        for c in 0..3 {
            for p in 0..1024 {
                hwc[p * 3 + c] = img[c * 1024 + p];
            }
        }
        out.push_raw(&hwc, Some(label));
    }
    Ok(())
}

const CIFAR10_HINT: &str = "extract cifar-10-binary.tar.gz from https://www.cs.toronto.edu/~kriz/cifar.html into the data root";
const CIFAR100_HINT: &str = "extract cifar-100-binary.tar.gz from https://www.cs.toronto.edu/~kriz/cifar.html into the data root";
const SVHN_HINT: &str = "download train_32x32.mat and test_32x32.mat from http://ufldl.stanford.edu/housenumbers/ into <data root>/svhn";
const STL10_HINT: &str = "extract stl10_binary.tar.gz from https://cs.stanford.edu/~acoates/stl10/ into the data root";

/// `cifar-10-batches-bin/data_batch_{1..5}.bin` and `test_batch.bin`.
pub fn load_cifar10(root: &Path) -> Result<Dataset, DataError> {
    let dir = root.join("cifar-10-batches-bin");
    let mut train = ImageSet::new(32, 32, 3);
    for i in 1..=5 {
        read_cifar_records(&dir.join(format!("data_batch_{i}.bin")), 1, 0, 10, CIFAR10_HINT, &mut train)?;
    }
    let mut test = ImageSet::new(32, 32, 3);
    read_cifar_records(&dir.join("test_batch.bin"), 1, 0, 10, CIFAR10_HINT, &mut test)?;
    Ok(Dataset {
        name: "cifar10".into(),
        num_classes: 10,
        train,
        test,
        extra_unlabeled: ImageSet::new(32, 32, 3),
    })
}

/// `cifar-100-binary/train.bin` and `test.bin`, fine labels.
pub fn load_cifar100(root: &Path) -> Result<Dataset, DataError> {
    let dir = root.join("cifar-100-binary");
    let mut train = ImageSet::new(32, 32, 3);
    read_cifar_records(&dir.join("train.bin"), 2, 1, 100, CIFAR100_HINT, &mut train)?;
    let mut test = ImageSet::new(32, 32, 3);
    read_cifar_records(&dir.join("test.bin"), 2, 1, 100, CIFAR100_HINT, &mut test)?;
    Ok(Dataset {
        name: "cifar100".into(),
        num_classes: 100,
        train,
        test,
        extra_unlabeled: ImageSet::new(32, 32, 3),
    })
}

fn numeric_as_f64(data: &matfile::NumericData) -> Vec<f64> {
    use matfile::NumericData::*;
    match data {
        Int8 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        UInt8 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        Int16 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        UInt16 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        Int32 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        UInt32 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        Int64 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        UInt64 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        Single { real, .. } => real.iter().map(|&v| v as f64).collect(),
        Double { real, .. } => real.clone(),
    }
}

/// One SVHN `.mat` file: `X` is 32×32×3×N (column-major), `y` holds 1..=10
/// with 10 standing for digit 0.
fn read_svhn_mat(path: &Path, out: &mut ImageSet) -> Result<(), DataError> {
    let mat = matfile::MatFile::parse(open(path, SVHN_HINT)?).map_err(|e| corrupt(path, format!("not a MATLAB v5 file: {e}")))?;
    let x = mat.find_by_name("X").ok_or_else(|| corrupt(path, "missing variable X"))?;
    let y = mat.find_by_name("y").ok_or_else(|| corrupt(path, "missing variable y"))?;
    let size = x.size();
    if size.len() != 4 || size[0] != 32 || size[1] != 32 || size[2] != 3 {
        return Err(corrupt(path, format!("X has shape {size:?}, expected [32, 32, 3, N]")));
    }
    let n = size[3];
    let pixels = match x.data() {
        matfile::NumericData::UInt8 { real, .. } => real,
        _ => return Err(corrupt(path, "X is not uint8")),
    };
    let labels = numeric_as_f64(y.data());
    if labels.len() != n || pixels.len() != n * 3072 {
        return Err(corrupt(path, "X and y sizes disagree"));
    }
    let mut hwc = vec![0u8; 3072];
    for (i, &label) in labels.iter().enumerate() {
        let label = label as usize;
        if !(1..=10).contains(&label) {
            return Err(corrupt(path, format!("label {label} out of range")));
        }
        for c in 0..3 {
            for col in 0..32 {
                for row in 0..32 {
                    hwc[(row * 32 + col) * 3 + c] = pixels[row + 32 * (col + 32 * (c + 3 * i))];
                }
            }
        }
        out.push_raw(&hwc, Some(label % 10));
    }
    Ok(())
}

/// `svhn/train_32x32.mat` and `svhn/test_32x32.mat`.
pub fn load_svhn(root: &Path) -> Result<Dataset, DataError> {
    let dir = root.join("svhn");
    let mut train = ImageSet::new(32, 32, 3);
    read_svhn_mat(&dir.join("train_32x32.mat"), &mut train)?;
    let mut test = ImageSet::new(32, 32, 3);
    read_svhn_mat(&dir.join("test_32x32.mat"), &mut test)?;
    Ok(Dataset {
        name: "svhn".into(),
        num_classes: 10,
        train,
        test,
        extra_unlabeled: ImageSet::new(32, 32, 3),
    })
}

/// STL-10 images are 3×96×96, each channel stored column-major.
fn read_stl_images(path: &Path, out: &mut ImageSet, labels: Option<&[usize]>) -> Result<(), DataError> {
    const SIDE: usize = 96;
    const LEN: usize = SIDE * SIDE * 3;
    let bytes = read_all(path, STL10_HINT)?;
    if bytes.is_empty() || bytes.len() % LEN != 0 {
        return Err(corrupt(path, format!("size {} is not a multiple of {LEN}", bytes.len())));
    }
    let n = bytes.len() / LEN;
    if let Some(l) = labels {
        if l.len() != n {
            return Err(corrupt(path, format!("{n} images but {} labels", l.len())));
        }
    }
    let mut hwc = vec![0u8; LEN];
    for (i, img) in bytes.chunks_exact(LEN).enumerate() {
        for c in 0..3 {
            for x in 0..SIDE {
                for y in 0..SIDE {
                    hwc[(y * SIDE + x) * 3 + c] = img[c * SIDE * SIDE + x * SIDE + y];
                }
            }
        }
        out.push_raw(&hwc, labels.map(|l| l[i]));
    }
    Ok(())
}

fn read_stl_labels(path: &Path) -> Result<Vec<usize>, DataError> {
    read_all(path, STL10_HINT)?
        .into_iter()
        .map(|b| {
            if (1..=10).contains(&b) {
                Ok(b as usize - 1)
            } else {
                Err(corrupt(path, format!("label {b} out of range")))
            }
        })
        .collect()
}

/// `stl10_binary/{train,test}_{X,y}.bin` and `unlabeled_X.bin`.
pub fn load_stl10(root: &Path) -> Result<Dataset, DataError> {
    let dir = root.join("stl10_binary");
    let mut train = ImageSet::new(96, 96, 3);
    let labels = read_stl_labels(&dir.join("train_y.bin"))?;
    read_stl_images(&dir.join("train_X.bin"), &mut train, Some(&labels))?;
    let mut test = ImageSet::new(96, 96, 3);
    let labels = read_stl_labels(&dir.join("test_y.bin"))?;
    read_stl_images(&dir.join("test_X.bin"), &mut test, Some(&labels))?;
    let mut extra = ImageSet::new(96, 96, 3);
    read_stl_images(&dir.join("unlabeled_X.bin"), &mut extra, None)?;
    Ok(Dataset {
        name: "stl10".into(),
        num_classes: 10,
        train,
        test,
        extra_unlabeled: extra,
    })
}

/// Parameters of the procedurally rendered shapes dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub image_size: usize,
    /// Add an extra shape class to the unlabeled pool only.
    pub distractor: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            train_size: 6000,
            test_size: 600,
            image_size: 32,
            distractor: false,
            seed: 0,
        }
    }
}

pub const SHAPE_NAMES: [&str; 5] = ["triangle", "square", "disc", "cross", "ring"];

/// Whether pixel centre `(px, py)`, expressed in the shape's rotated frame
/// relative to its centre with radius `r`, lies inside shape `kind`.
fn inside(kind: usize, px: f32, py: f32, r: f32) -> bool {
    match kind {
        0 => {
            // equilateral triangle with circumradius r, apex up
            let h = 1.5 * r;
            let top = -r;
            let rel = py - top;
            rel >= 0.0 && rel <= h && px.abs() <= rel / h * (r * 3f32.sqrt() / 2.0)
        }
        1 => {
            let s = r / std::f32::consts::SQRT_2 * 1.1;
            px.abs() <= s && py.abs() <= s
        }
        2 => px * px + py * py <= r * r,
        3 => {
            let arm = 0.3 * r;
            (px.abs() <= arm && py.abs() <= r) || (py.abs() <= arm && px.abs() <= r)
        }
        _ => {
            let d2 = px * px + py * py;
            d2 <= r * r && d2 >= 0.45 * r * r
        }
    }
}

/// Render one image of shape `kind`: a bright shape on a dark background.
/// Both colours, size, position, a small rotation and pixel noise are random.
pub fn render_shape<R: Rng>(kind: usize, size: usize, rng: &mut R) -> Image {
    let s = size as f32;
    let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.4));
    let fg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
    let r = rng.random_range(0.22 * s..0.34 * s);
    let margin = r + 1.0;
    let cx = rng.random_range(margin..s - margin);
    let cy = rng.random_range(margin..s - margin);
    let theta = rng.random_range(-0.2f32..0.2);
    let (sin, cos) = theta.sin_cos();
    let noise = rng.random_range(0.02..0.12);
    let mut img = Image::filled(size, size, 3, 0.0);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let (px, py) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let color = if inside(kind, px, py, r) { fg } else { bg };
            for c in 0..3 {
                let n: f32 = rng.random_range(-noise..noise);
                img.set(y, x, c, (color[c] + n).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Deterministic shapes dataset; class `i % C` for image `i`.
pub fn synthetic_shapes(spec: &SyntheticSpec) -> Dataset {
    assert!(spec.num_classes >= 1 && spec.num_classes <= 4, "synthetic-shapes supports 1 to 4 classes");
    let s = spec.image_size;
    let render = |split: u64, i: usize, kind: usize| {
        let mut rng = stream_rng(spec.seed, Stream::Synthetic, (split << 40) | i as u64);
        render_shape(kind, s, &mut rng)
    };
    let mut train = ImageSet::new(s, s, 3);
    for i in 0..spec.train_size {
        let c = i % spec.num_classes;
        train.push_image(&render(0, i, c), Some(c));
    }
    let mut test = ImageSet::new(s, s, 3);
    for i in 0..spec.test_size {
        let c = i % spec.num_classes;
        test.push_image(&render(1, i, c), Some(c));
    }
    let mut extra = ImageSet::new(s, s, 3);
    if spec.distractor {
        // the ring is never a labeled class
        for i in 0..spec.train_size / spec.num_classes {
            extra.push_image(&render(2, i, 4), None);
        }
    }
    Dataset {
        name: "synthetic-shapes".into(),
        num_classes: spec.num_classes,
        train,
        test,
        extra_unlabeled: extra,
    }
}

/// Load the dataset named in `cfg`. Real datasets need `root`.
pub fn load_dataset(cfg: &TrainConfig, root: Option<&Path>) -> Result<Dataset, DataError> {
    let need_root = || root.ok_or_else(|| DataError::NoRoot(cfg.dataset.clone()));
    let ds = match cfg.dataset.as_str() {
        "synthetic-shapes" => synthetic_shapes(&SyntheticSpec {
            num_classes: cfg.num_classes,
            train_size: cfg.synthetic_train_size,
            test_size: cfg.synthetic_test_size,
            image_size: 32,
            distractor: cfg.synthetic_distractor,
            seed: 0,
        }),
        "cifar10" => load_cifar10(need_root()?)?,
        "cifar100" => load_cifar100(need_root()?)?,
        "svhn" => load_svhn(need_root()?)?,
        "stl10" => load_stl10(need_root()?)?,
        other => return Err(DataError::UnknownDataset(other.to_string())),
    };
    if ds.num_classes != cfg.num_classes {
        return Err(DataError::Split(format!(
            "dataset {} has {} classes but num_classes = {}",
            ds.name, ds.num_classes, cfg.num_classes
        )));
    }
    Ok(ds)
}

/// Which training examples carry labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSplit {
    /// Sorted, unique indices into the training set.
    pub labeled_indices: Vec<usize>,
    pub fold_seed: u64,
    pub per_class: Vec<usize>,
}

/// Choose `num_labels` training examples, `num_labels / C` per class plus a
/// random remainder when the count is not divisible by C.
pub fn make_split(labels: &[usize], num_classes: usize, num_labels: usize, fold_seed: u64) -> Result<LabeledSplit, DataError> {
    if num_labels > labels.len() {
        return Err(DataError::Split(format!(
            "{num_labels} labels requested but the training set has {} images",
            labels.len()
        )));
    }
    if num_labels < num_classes {
        return Err(DataError::Split(format!(
            "{num_labels} labels cannot cover {num_classes} classes"
        )));
    }
    let mut rng = stream_rng(fold_seed, Stream::Split, 0);
    let per = num_labels / num_classes;
    let mut chosen = Vec::with_capacity(num_labels);
    let mut leftover = Vec::new();
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < per {
            return Err(DataError::Split(format!("class {c} has only {} examples, {per} needed", idx.len())));
        }
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..per]);
        leftover.extend_from_slice(&idx[per..]);
    }
    leftover.sort_unstable();
    leftover.shuffle(&mut rng);
    chosen.extend_from_slice(&leftover[..num_labels - chosen.len()]);
    chosen.sort_unstable();
    let mut per_class = vec![0; num_classes];
    for &i in &chosen {
        per_class[labels[i]] += 1;
    }
    Ok(LabeledSplit {
        labeled_indices: chosen,
        fold_seed,
        per_class,
    })
}

impl LabeledSplit {
    pub fn to_text(&self) -> String {
        let mut s = format!("# fold_seed {}\n# num_labels {}\n", self.fold_seed, self.labeled_indices.len());
        for i in &self.labeled_indices {
            writeln!(s, "{i}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str, labels: &[usize], num_classes: usize) -> Result<Self, DataError> {
        let mut fold_seed = None;
        let mut indices = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix("# fold_seed ") {
                fold_seed = Some(rest.parse().map_err(|_| DataError::Split(format!("bad header `{line}`")))?);
            } else if line.starts_with('#') {
                continue;
            } else {
                let i: usize = line.parse().map_err(|_| DataError::Split(format!("bad index `{line}`")))?;
                if i >= labels.len() {
                    return Err(DataError::Split(format!("index {i} out of range")));
                }
                indices.push(i);
            }
        }
        let fold_seed = fold_seed.ok_or_else(|| DataError::Split("missing fold_seed header".into()))?;
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::Split("indices must be sorted and unique".into()));
        }
        let mut per_class = vec![0; num_classes];
        for &i in &indices {
            per_class[labels[i]] += 1;
        }
        Ok(Self {
            labeled_indices: indices,
            fold_seed,
            per_class,
        })
    }
}

/// Unlabeled pool indices (see [`Dataset::pool_image`]).
pub fn unlabeled_pool(ds: &Dataset, split: &LabeledSplit, include_labeled: bool) -> Vec<usize> {
    let n = ds.train.len();
    let mut pool: Vec<usize> = if include_labeled {
        (0..n).collect()
    } else {
        let mut mark = vec![false; n];
        for &i in &split.labeled_indices {
            mark[i] = true;
        }
        (0..n).filter(|&i| !mark[i]).collect()
    };
    pool.extend(n..n + ds.extra_unlabeled.len());
    pool
}

/// Index-level batch of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct SslBatch {
    pub step: u64,
    /// Training-set indices of the B labeled images.
    pub labeled: Vec<usize>,
    pub labels: Vec<usize>,
    /// Pool indices of the μB unlabeled images.
    pub unlabeled: Vec<usize>,
}

/// Endless reshuffled pass over `items`; epoch `e` uses its own permutation,
/// so any position can be computed without replaying earlier ones.
#[derive(Debug, Clone)]
struct EpochCycle {
    items: Vec<usize>,
    seed: u64,
    tag: u64,
    epoch: Option<u64>,
    perm: Vec<usize>,
}

impl EpochCycle {
    fn new(items: Vec<usize>, seed: u64, tag: u64) -> Self {
        assert!(!items.is_empty(), "cannot cycle over an empty set");
        Self {
            items,
            seed,
            tag,
            epoch: None,
            perm: Vec::new(),
        }
    }

    fn at(&mut self, pos: u64) -> usize {
        let n = self.items.len() as u64;
        let epoch = pos / n;
        if self.epoch != Some(epoch) {
            let mut rng = stream_rng(self.seed, Stream::Data, (epoch << 1) | self.tag);
            self.perm = self.items.clone();
            self.perm.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        self.perm[(pos % n) as usize]
    }
}

/// Deterministic source of [`SslBatch`]es; the labeled and unlabeled streams
/// cycle independently.
#[derive(Debug, Clone)]
pub struct BatchStream {
    labeled: EpochCycle,
    unlabeled: EpochCycle,
    labels: Vec<usize>,
    batch: usize,
    mu: usize,
    next: u64,
}

impl BatchStream {
    pub fn new(split: &LabeledSplit, train_labels: &[usize], pool: Vec<usize>, batch: usize, mu: usize, seed: u64) -> Self {
        Self {
            labeled: EpochCycle::new(split.labeled_indices.clone(), seed, 0),
            unlabeled: EpochCycle::new(pool, seed, 1),
            labels: train_labels.to_vec(),
            batch,
            mu,
            next: 0,
        }
    }

    /// Batch of step `k`.
    pub fn batch_at(&mut self, k: u64) -> SslBatch {
        let b = self.batch as u64;
        let u = (self.batch * self.mu) as u64;
        let labeled: Vec<usize> = (k * b..(k + 1) * b).map(|p| self.labeled.at(p)).collect();
        let labels = labeled.iter().map(|&i| self.labels[i]).collect();
        let unlabeled = (k * u..(k + 1) * u).map(|p| self.unlabeled.at(p)).collect();
        SslBatch {
            step: k,
            labeled,
            labels,
            unlabeled,
        }
    }

    /// Continue iteration from step `k`.
    pub fn seek(&mut self, k: u64) {
        self.next = k;
    }
}

impl Iterator for BatchStream {
    type Item = SslBatch;

    fn next(&mut self) -> Option<SslBatch> {
        let b = self.batch_at(self.next);
        self.next += 1;
        Some(b)
    }
}

/// Convenience constructor matching the config's batch shape.
pub fn batch_stream(ds: &Dataset, split: &LabeledSplit, cfg: &TrainConfig, seed: u64) -> BatchStream {
    let pool = unlabeled_pool(ds, split, cfg.labeled_in_unlabeled);
    BatchStream::new(split, &ds.train.labels, pool, cfg.batch_size_labeled, cfg.mu, seed)
}
