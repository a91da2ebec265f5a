//! Binary image-classification data: IDX ingestion, two-class selection and
//! balanced train/test splitting.
//!
//! # IDX layout
//! ```text
//! images: 0x00000803 (BE u32) | N (BE u32) | rows (BE u32) | cols (BE u32) | N*rows*cols u8
//! labels: 0x00000801 (BE u32) | N (BE u32) | N u8
//! ```
//! Only 28x28 images are accepted.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{file}: bad magic number 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        file: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{file}: truncated, header promises {expected} bytes but only {found} present")]
    Truncated {
        file: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("unsupported image shape {rows}x{cols}, expected 28x28")]
    BadShape { rows: usize, cols: usize },
    #[error("binary selection needs two distinct classes, got {0} twice")]
    SameClass(u8),
    #[error("class {0} has no instances")]
    MissingClass(u8),
    #[error("label {label} has {available} instances, need more than {requested}")]
    InsufficientInstances {
        label: Label,
        available: usize,
        requested: usize,
    },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Binary class label after remapping: 0 is the negative class, 1 the positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Negative, Label::Positive];

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Negative => Label::Positive,
            Label::Positive => Label::Negative,
        }
    }
}

impl From<Label> for u8 {
    fn from(label: Label) -> u8 {
        label.as_u8()
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("binary label must be 0 or 1, got {other}")),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

/// Dense instance id, unique within one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub u32);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInstance {
    pub id: InstanceId,
    /// Row-major gray values in [0, 1], length 784.
    pub pixels: Vec<f64>,
    /// Raw class index from the source file (before any binary remap).
    pub class: u8,
}

impl ImageInstance {
    /// Binary label; only meaningful after [`select_binary`].
    pub fn label(&self) -> Label {
        if self.class == 0 {
            Label::Negative
        } else {
            Label::Positive
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    instances: Vec<ImageInstance>,
    class_counts: BTreeMap<u8, usize>,
}

impl LabeledDataset {
    pub fn new(instances: Vec<ImageInstance>) -> Self {
        let mut class_counts = BTreeMap::new();
        for inst in &instances {
            *class_counts.entry(inst.class).or_insert(0) += 1;
        }
        Self {
            instances,
            class_counts,
        }
    }

    pub fn instances(&self) -> &[ImageInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn class_counts(&self) -> &BTreeMap<u8, usize> {
        &self.class_counts
    }

    pub fn count_of(&self, label: Label) -> usize {
        self.class_counts.get(&label.as_u8()).copied().unwrap_or(0)
    }

    pub fn is_balanced(&self) -> bool {
        let mut counts = self.class_counts.values();
        match counts.next() {
            Some(first) => counts.all(|c| c == first),
            None => true,
        }
    }

    /// Lookup by id. Ids are dense after [`load_idx`] and [`select_binary`], so
    /// this is a direct index with a fallback scan for split subsets.
    pub fn get(&self, id: InstanceId) -> Option<&ImageInstance> {
        match self.instances.get(id.0 as usize) {
            Some(inst) if inst.id == id => Some(inst),
            _ => self.instances.iter().find(|inst| inst.id == id),
        }
    }

    fn indices_of(&self, label: Label) -> Vec<usize> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.class == label.as_u8())
            .map(|(i, _)| i)
            .collect()
    }

    fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset::new(indices.iter().map(|&i| self.instances[i].clone()).collect())
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]])
}

/// Parse an in-memory IDX image/label pair.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<LabeledDataset, DatasetError> {
    if image_bytes.len() < 16 {
        return Err(DatasetError::Truncated {
            file: "images",
            expected: 16,
            found: image_bytes.len(),
        });
    }
    let magic = read_be_u32(image_bytes, 0);
    if magic != IMAGE_MAGIC {
        return Err(DatasetError::BadMagic {
            file: "images",
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    if label_bytes.len() < 8 {
        return Err(DatasetError::Truncated {
            file: "labels",
            expected: 8,
            found: label_bytes.len(),
        });
    }
    let magic = read_be_u32(label_bytes, 0);
    if magic != LABEL_MAGIC {
        return Err(DatasetError::BadMagic {
            file: "labels",
            found: magic,
            expected: LABEL_MAGIC,
        });
    }

    let n_images = read_be_u32(image_bytes, 4) as usize;
    let rows = read_be_u32(image_bytes, 8) as usize;
    let cols = read_be_u32(image_bytes, 12) as usize;
    let n_labels = read_be_u32(label_bytes, 4) as usize;
    if n_images != n_labels {
        return Err(DatasetError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(DatasetError::BadShape { rows, cols });
    }

    let image_len = 16 + n_images * IMAGE_PIXELS;
    if image_bytes.len() < image_len {
        return Err(DatasetError::Truncated {
            file: "images",
            expected: image_len,
            found: image_bytes.len(),
        });
    }
    let label_len = 8 + n_labels;
    if label_bytes.len() < label_len {
        return Err(DatasetError::Truncated {
            file: "labels",
            expected: label_len,
            found: label_bytes.len(),
        });
    }

    let instances = image_bytes[16..image_len]
        .chunks_exact(IMAGE_PIXELS)
        .zip(&label_bytes[8..label_len])
        .enumerate()
        .map(|(i, (raw, &class))| ImageInstance {
            id: InstanceId(i as u32),
            pixels: raw.iter().map(|&b| f64::from(b) / 255.0).collect(),
            class,
        })
        .collect();
    Ok(LabeledDataset::new(instances))
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset, DatasetError> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| DatasetError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    let images = read(images_path.as_ref())?;
    let labels = read(labels_path.as_ref())?;
    parse_idx(&images, &labels)
}

/// Serialize a dataset back to IDX bytes (pixels are re-quantized to u8).
pub fn encode_idx(data: &LabeledDataset) -> (Vec<u8>, Vec<u8>) {
    let n = data.len() as u32;
    let mut images = Vec::with_capacity(16 + data.len() * IMAGE_PIXELS);
    images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    images.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    for inst in data.instances() {
        images.extend(inst.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
        labels.push(inst.class);
    }
    (images, labels)
}

/// Keep only `class_a` (remapped to 0) and `class_b` (remapped to 1), with ids
/// reassigned densely in original order.
pub fn select_binary(raw: &LabeledDataset, class_a: u8, class_b: u8) -> Result<LabeledDataset, DatasetError> {
    if class_a == class_b {
        return Err(DatasetError::SameClass(class_a));
    }
    for class in [class_a, class_b] {
        if raw.class_counts.get(&class).copied().unwrap_or(0) == 0 {
            return Err(DatasetError::MissingClass(class));
        }
    }
    let instances = raw
        .instances
        .iter()
        .filter_map(|inst| {
            let class = if inst.class == class_a {
                0
            } else if inst.class == class_b {
                1
            } else {
                return None;
            };
            Some((inst.pixels.clone(), class))
        })
        .enumerate()
        .map(|(i, (pixels, class))| ImageInstance {
            id: InstanceId(i as u32),
            pixels,
            class,
        })
        .collect();
    Ok(LabeledDataset::new(instances))
}

/// Draw exactly `test_per_class` instances of each binary label for the test
/// split; everything else is train. Both splits keep the original relative order.
pub fn balanced_split(
    data: &LabeledDataset,
    test_per_class: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_test = vec![false; data.len()];
    for label in Label::ALL {
        let idx = data.indices_of(label);
        if idx.len() <= test_per_class {
            return Err(DatasetError::InsufficientInstances {
                label,
                available: idx.len(),
                requested: test_per_class,
            });
        }
        for k in index::sample(&mut rng, idx.len(), test_per_class) {
            in_test[idx[k]] = true;
        }
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| in_test[i]);
    Ok((data.subset(&train), data.subset(&test)))
}

/// Seeded balanced subsample of `per_class` instances per label (ids kept).
pub fn take_balanced(data: &LabeledDataset, per_class: usize, seed: u64) -> Result<LabeledDataset, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(2 * per_class);
    for label in Label::ALL {
        let idx = data.indices_of(label);
        if idx.len() < per_class {
            return Err(DatasetError::InsufficientInstances {
                label,
                available: idx.len(),
                requested: per_class,
            });
        }
        keep.extend(
            index::sample(&mut rng, idx.len(), per_class)
                .into_iter()
                .map(|k| idx[k]),
        );
    }
    keep.sort_unstable();
    Ok(data.subset(&keep))
}

/// Binary task presets. Class indices refer to the source corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskPreset {
    /// Kuzushiji-49 "a" (index 0) vs "me" (index 33).
    Kuzushiji49,
    /// MNIST-style digits 3 vs 5; used when Kuzushiji files are unavailable.
    MnistFallback,
}

impl TaskPreset {
    pub fn classes(self) -> (u8, u8) {
        match self {
            TaskPreset::Kuzushiji49 => (0, 33),
            TaskPreset::MnistFallback => (3, 5),
        }
    }

    pub fn is_fallback(self) -> bool {
        matches!(self, TaskPreset::MnistFallback)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskPreset::Kuzushiji49 => "kuzushiji49-a-vs-me",
            TaskPreset::MnistFallback => "mnist-3-vs-5-fallback",
        }
    }
}

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// How a corpus directory becomes training data and an explanation pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataPlan {
    pub preset: TaskPreset,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for DataPlan {
    fn default() -> Self {
        Self {
            preset: TaskPreset::MnistFallback,
            train_per_class: 1000,
            test_per_class: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    /// Balanced training subset of the train file.
    pub train: LabeledDataset,
    /// Balanced held-out test split of the train file.
    pub test: LabeledDataset,
    /// Every binary instance not used for training (train-file remainder, then
    /// the whole test file), with fresh dense ids. Categorization, the catalog
    /// and the task all draw from here.
    pub pool: LabeledDataset,
}

/// Load `dir/{train,t10k}-*-idx*-ubyte` and split according to `plan`.
pub fn prepare(dir: impl AsRef<Path>, plan: &DataPlan) -> Result<PreparedData, DatasetError> {
    let dir = dir.as_ref();
    let (a, b) = plan.preset.classes();
    let train_file = select_binary(&load_idx(dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS))?, a, b)?;
    let test_file = select_binary(&load_idx(dir.join(TEST_IMAGES), dir.join(TEST_LABELS))?, a, b)?;
    let (rest, test) = balanced_split(&train_file, plan.test_per_class, plan.seed)?;
    let train = take_balanced(&rest, plan.train_per_class, plan.seed)?;
    let mut used = vec![false; train_file.len()];
    for inst in train.instances() {
        used[inst.id.0 as usize] = true;
    }
    let unused = train_file.instances().iter().filter(|inst| !used[inst.id.0 as usize]);
    let pool = unused
        .chain(test_file.instances())
        .enumerate()
        .map(|(i, inst)| ImageInstance {
            id: InstanceId(i as u32),
            pixels: inst.pixels.clone(),
            class: inst.class,
        })
        .collect();
    Ok(PreparedData {
        train,
        test,
        pool: LabeledDataset::new(pool),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(counts: &[(u8, usize)]) -> LabeledDataset {
        let mut instances = Vec::new();
        for &(class, n) in counts {
            for _ in 0..n {
                let id = InstanceId(instances.len() as u32);
                instances.push(ImageInstance {
                    id,
                    pixels: vec![f64::from(id.0 % 7) / 7.0; IMAGE_PIXELS],
                    class,
                });
            }
        }
        LabeledDataset::new(instances)
    }

    fn idx_files(n_images: u32, n_labels: u32, fill: u8) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        images.extend_from_slice(&n_images.to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        images.extend(std::iter::repeat_n(fill, n_images as usize * IMAGE_PIXELS));
        let mut labels = Vec::new();
        labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        labels.extend_from_slice(&n_labels.to_be_bytes());
        labels.extend(std::iter::repeat_n(1u8, n_labels as usize));
        (images, labels)
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let (img, lbl) = idx_files(0, 0, 0);
        let data = parse_idx(&img, &lbl).unwrap();
        assert!(data.is_empty());
    }

    #[test]
    fn count_mismatch() {
        let (img, lbl) = idx_files(10, 9, 0);
        assert!(matches!(
            parse_idx(&img, &lbl),
            Err(DatasetError::CountMismatch { images: 10, labels: 9 })
        ));
    }

    #[test]
    fn all_255_rescales_to_one() {
        let (img, lbl) = idx_files(1, 1, 255);
        let data = parse_idx(&img, &lbl).unwrap();
        assert_eq!(data.len(), 1);
        assert!(data.instances()[0].pixels.iter().all(|&p| p == 1.0));
        assert_eq!(data.instances()[0].pixels.len(), IMAGE_PIXELS);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let (mut img, lbl) = idx_files(2, 2, 3);
        img.truncate(16 + IMAGE_PIXELS);
        assert!(matches!(parse_idx(&img, &lbl), Err(DatasetError::Truncated { .. })));
        let (mut img, lbl) = idx_files(1, 1, 3);
        img[3] = 0x01;
        assert!(matches!(parse_idx(&img, &lbl), Err(DatasetError::BadMagic { .. })));
        let (img, mut lbl) = idx_files(1, 1, 3);
        lbl[3] = 0x03;
        assert!(matches!(parse_idx(&img, &lbl), Err(DatasetError::BadMagic { .. })));
    }

    #[test]
    fn select_binary_counts_and_remap() {
        let raw = synthetic(&[(0, 5), (1, 3), (2, 4)]);
        let bin = select_binary(&raw, 0, 2).unwrap();
        assert_eq!(bin.len(), 9);
        assert_eq!(bin.count_of(Label::Negative), 5);
        assert_eq!(bin.count_of(Label::Positive), 4);
        for (i, inst) in bin.instances().iter().enumerate() {
            assert_eq!(inst.id, InstanceId(i as u32));
            assert!(inst.class <= 1);
        }
    }

    #[test]
    fn select_binary_rejects_degenerate() {
        let raw = synthetic(&[(0, 5), (1, 3)]);
        assert!(matches!(select_binary(&raw, 3, 3), Err(DatasetError::SameClass(3))));
        assert!(matches!(select_binary(&raw, 0, 7), Err(DatasetError::MissingClass(7))));
    }

    #[test]
    fn balanced_split_counts_and_determinism() {
        let data = synthetic(&[(0, 100), (1, 100)]);
        let (train, test) = balanced_split(&data, 20, 9).unwrap();
        assert_eq!(test.len(), 40);
        assert_eq!(train.len(), 160);
        assert!(test.is_balanced());
        let (train2, test2) = balanced_split(&data, 20, 9).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
    }

    #[test]
    fn balanced_split_insufficient() {
        let data = synthetic(&[(0, 100), (1, 100)]);
        assert!(matches!(
            balanced_split(&data, 200, 1),
            Err(DatasetError::InsufficientInstances { requested: 200, .. })
        ));
    }

    #[test]
    fn prepare_keeps_training_out_of_the_pool() {
        let dir = tempfile::tempdir().unwrap();
        let write = |data: &LabeledDataset, images: &str, labels: &str| {
            let (img, lbl) = encode_idx(data);
            std::fs::write(dir.path().join(images), img).unwrap();
            std::fs::write(dir.path().join(labels), lbl).unwrap();
        };
        write(&synthetic(&[(3, 30), (5, 30), (7, 10)]), TRAIN_IMAGES, TRAIN_LABELS);
        write(&synthetic(&[(3, 4), (5, 6)]), TEST_IMAGES, TEST_LABELS);
        let plan = DataPlan {
            train_per_class: 10,
            test_per_class: 5,
            ..DataPlan::default()
        };
        let data = prepare(dir.path(), &plan).unwrap();
        assert_eq!(data.train.len(), 20);
        assert_eq!(data.test.len(), 10);
        assert!(data.train.is_balanced() && data.test.is_balanced());
        // 60 binary train-file instances minus 20 trained on, plus 10 from the test file.
        assert_eq!(data.pool.len(), 50);
        for (i, inst) in data.pool.instances().iter().enumerate() {
            assert_eq!(inst.id, InstanceId(i as u32));
        }
        assert_eq!(prepare(dir.path(), &plan).unwrap(), data);
    }

    #[test]
    fn idx_encode_round_trip() {
        let data = synthetic(&[(0, 3), (1, 2)]);
        let (img, lbl) = encode_idx(&data);
        let back = parse_idx(&img, &lbl).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in back.instances().iter().zip(data.instances()) {
            assert_eq!(a.class, b.class);
            for (x, y) in a.pixels.iter().zip(&b.pixels) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}
