//! MNIST IDX ingestion and tracked-subset selection.

use std::fs;
use std::path::Path;

use crate::rng::SplitMix64;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;
pub const TRACKED_PER_CLASS: usize = 100;

pub const TRAIN_SIZE: usize = 60_000;
pub const TEST_SIZE: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("bad IDX magic: expected {expected}, found {found}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX stream: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("bad IDX image dims: {rows}x{cols} (expected 28x28)")]
    BadDims { rows: u32, cols: u32 },
    #[error("bad label byte {value} at index {index}")]
    BadLabel { index: usize, value: u8 },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("unexpected {split:?} split size {found} (expected {expected})")]
    WrongSplitSize {
        split: Split,
        expected: usize,
        found: usize,
    },
    #[error("class {class} has only {available} test samples, need {needed}")]
    ClassUnderfilled {
        class: u8,
        available: usize,
        needed: usize,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// Flattened 28x28 image, each entry in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub label: u8,
    /// Position in the original IDX file.
    pub source_index: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: Split,
}

/// Indices into the test split, 100 per class, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackedSubset {
    pub sample_refs: Vec<usize>,
    pub seed: u64,
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32, DatasetError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DatasetError::Truncated {
            expected: end,
            found: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Parse an IDX image stream into raw 784-byte images.
pub fn load_idx_images(bytes: &[u8]) -> Result<Vec<Vec<u8>>, DatasetError> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(DatasetError::BadMagic {
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let n_images = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)?;
    let cols = read_be_u32(bytes, 12)?;
    if rows != IMAGE_SIDE as u32 || cols != IMAGE_SIDE as u32 {
        return Err(DatasetError::BadDims { rows, cols });
    }
    let expected = 16 + n_images * IMAGE_PIXELS;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[16..expected]
        .chunks_exact(IMAGE_PIXELS)
        .map(|c| c.to_vec())
        .collect())
}

/// Parse an IDX label stream.
pub fn load_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DatasetError> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(DatasetError::BadMagic {
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let n_items = read_be_u32(bytes, 4)? as usize;
    let expected = 8 + n_items;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let labels = &bytes[8..expected];
    for (index, &value) in labels.iter().enumerate() {
        if value > 9 {
            return Err(DatasetError::BadLabel { index, value });
        }
    }
    Ok(labels.to_vec())
}

/// Scale raw bytes to `[0, 1]` by dividing by 255.
pub fn normalize(raw: &[u8]) -> Vec<f32> {
    raw.iter().map(|&b| b as f32 / 255.0).collect()
}

/// Assemble a dataset from parallel image/label streams, enforcing the
/// standard MNIST split sizes.
pub fn build_dataset(
    image_bytes: &[u8],
    label_bytes: &[u8],
    split: Split,
) -> Result<Dataset, DatasetError> {
    let images = load_idx_images(image_bytes)?;
    let labels = load_idx_labels(label_bytes)?;
    if images.len() != labels.len() {
        return Err(DatasetError::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let expected = match split {
        Split::Train => TRAIN_SIZE,
        Split::Test => TEST_SIZE,
    };
    if images.len() != expected {
        return Err(DatasetError::WrongSplitSize {
            split,
            expected,
            found: images.len(),
        });
    }
    let samples = images
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(source_index, (raw, &label))| Sample {
            pixels: normalize(raw),
            label,
            source_index,
        })
        .collect();
    Ok(Dataset { samples, split })
}

/// Load the standard four MNIST IDX files from a directory.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset), DatasetError> {
    let read = |name: &str| fs::read(dir.join(name));
    let train = build_dataset(
        &read("train-images-idx3-ubyte")?,
        &read("train-labels-idx1-ubyte")?,
        Split::Train,
    )?;
    let test = build_dataset(
        &read("t10k-images-idx3-ubyte")?,
        &read("t10k-labels-idx1-ubyte")?,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Draw the fixed tracked subset: a class-stratified 10% of the test split,
/// 100 samples per digit. Per class (in label order 0..9) the candidate
/// indices are Fisher-Yates shuffled with one [`SplitMix64`] stream seeded by
/// `seed`, and the first 100 taken; the union is returned sorted ascending.
pub fn draw_tracked_subset(test: &Dataset, seed: u64) -> Result<TrackedSubset, DatasetError> {
    let mut rng = SplitMix64::new(seed);
    let mut sample_refs = Vec::with_capacity(NUM_CLASSES * TRACKED_PER_CLASS);
    for class in 0..NUM_CLASSES as u8 {
        let mut candidates: Vec<usize> = test
            .samples
            .iter()
            .filter(|s| s.label == class)
            .map(|s| s.source_index)
            .collect();
        if candidates.len() < TRACKED_PER_CLASS {
            return Err(DatasetError::ClassUnderfilled {
                class,
                available: candidates.len(),
                needed: TRACKED_PER_CLASS,
            });
        }
        rng.shuffle(&mut candidates);
        sample_refs.extend_from_slice(&candidates[..TRACKED_PER_CLASS]);
    }
    sample_refs.sort_unstable();
    Ok(TrackedSubset { sample_refs, seed })
}
