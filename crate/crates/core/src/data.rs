//! IDX container decoding (MNIST / EMNIST distribution format) and the
//! labeled datasets built from it.
//!
//! Header layout, all big-endian:
//!
//! ```text
//! 0x00 0x00 <type code> <rank>   magic
//! u32 * rank                     dimension sizes
//! payload                        row-major elements
//! ```
//!
//! Only the unsigned byte type (code `0x08`) is supported.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IdxError, Result};

pub const IDX_TYPE_U8: u8 = 0x08;
pub const EMNIST_LETTERS_CLASSES: usize = 26;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    U8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub element_type: ElementType,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(Error::invalid(format!(
                "unsupported IDX rank {}",
                dims.len()
            )));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(IdxTensor {
            dims,
            element_type: ElementType::U8,
            data,
        })
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn magic(&self) -> u32 {
        (IDX_TYPE_U8 as u32) << 8 | self.rank() as u32
    }
}

/// Decode an uncompressed IDX buffer.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::TooShort(bytes.len()));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 || bytes[3] == 0 {
        return Err(IdxError::BadMagic(magic));
    }
    if bytes[2] != IDX_TYPE_U8 {
        return Err(IdxError::UnsupportedType(bytes[2]));
    }
    let rank = bytes[3] as usize;
    let header_len = 4 + 4 * rank;
    if bytes.len() < header_len {
        return Err(IdxError::Truncated {
            expected: header_len,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload_len = dims
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or(IdxError::BadMagic(magic))?;
    let payload = &bytes[header_len..];
    if payload.len() < payload_len {
        return Err(IdxError::Truncated {
            expected: header_len + payload_len,
            found: bytes.len(),
        });
    }
    if payload.len() > payload_len {
        return Err(IdxError::TrailingBytes(payload.len() - payload_len));
    }
    Ok(IdxTensor {
        dims,
        element_type: ElementType::U8,
        data: payload.to_vec(),
    })
}

/// Encode a tensor as an uncompressed IDX buffer.
pub fn serialize_idx(tensor: &IdxTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * tensor.rank() + tensor.data.len());
    out.extend_from_slice(&tensor.magic().to_be_bytes());
    for d in &tensor.dims {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    out.extend_from_slice(&tensor.data);
    out
}

/// Inflate `bytes` if they carry a gzip header, otherwise return them as-is.
pub fn maybe_gunzip(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::DataIntegrity(format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Read and decode an IDX file, raw or gzip-compressed.
pub fn read_idx_file(path: &Path) -> Result<IdxTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(parse_idx(&maybe_gunzip(bytes)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Flattened images in `[0, 1]` with labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split_tag: SplitTag,
}

/// How source labels map onto class indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelScheme {
    /// EMNIST-Letters: source labels `1..=26` become `0..=25`.
    Letters,
    /// MNIST digits: labels used as-is, `0..=9`.
    Digits,
}

impl LabelScheme {
    pub fn num_classes(self) -> usize {
        match self {
            LabelScheme::Letters => EMNIST_LETTERS_CLASSES,
            LabelScheme::Digits => 10,
        }
    }

    fn remap(self, raw: u8) -> Option<usize> {
        match self {
            LabelScheme::Letters => (1..=26).contains(&raw).then(|| raw as usize - 1),
            LabelScheme::Digits => (raw < 10).then_some(raw as usize),
        }
    }
}

impl Dataset {
    pub fn new(
        images: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        split_tag: SplitTag,
    ) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::DataIntegrity(format!(
                "{} images but {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::DataIntegrity(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        if images.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::DataIntegrity("pixel outside [0, 1]".into()));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.images.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize], split_tag: SplitTag) -> Dataset {
        Dataset {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|i| self.labels[*i]).collect(),
            num_classes: self.num_classes,
            split_tag,
        }
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for l in &self.labels {
            counts[*l] += 1;
        }
        counts
    }

    /// A seeded random subset of `n` samples (all samples if `n >= len`).
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx, self.split_tag)
    }
}

/// Decode an image/label file pair into a [`Dataset`].
pub fn dataset_from_idx(
    images: &IdxTensor,
    labels: &IdxTensor,
    scheme: LabelScheme,
    transpose: bool,
    split_tag: SplitTag,
) -> Result<Dataset> {
    if images.rank() != 3 {
        return Err(Error::DataIntegrity(format!(
            "image file has rank {}, expected 3",
            images.rank()
        )));
    }
    if labels.rank() != 1 {
        return Err(Error::DataIntegrity(format!(
            "label file has rank {}, expected 1",
            labels.rank()
        )));
    }
    let (n, rows, cols) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(Error::DataIntegrity(format!(
            "{n} images but {} labels",
            labels.dims[0]
        )));
    }
    if transpose && rows != cols {
        return Err(Error::DataIntegrity(format!(
            "cannot transpose non-square {rows}x{cols} images"
        )));
    }
    let pixels = rows * cols;
    let mut data = Vec::with_capacity(n * pixels);
    for img in images.data.chunks_exact(pixels) {
        if transpose {
            for r in 0..rows {
                for c in 0..cols {
                    data.push(img[c * cols + r] as f64 / 255.0);
                }
            }
        } else {
            data.extend(img.iter().map(|b| *b as f64 / 255.0));
        }
    }
    let labels = labels
        .data
        .iter()
        .enumerate()
        .map(|(i, raw)| {
            scheme.remap(*raw).ok_or_else(|| {
                Error::DataIntegrity(format!(
                    "sample {i} has label {raw} outside {scheme:?} range"
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let images = Array2::from_shape_vec((n, pixels), data)
        .map_err(|e| Error::DataIntegrity(e.to_string()))?;
    Ok(Dataset {
        images,
        labels,
        num_classes: scheme.num_classes(),
        split_tag,
    })
}

/// Load an EMNIST-Letters image/label pair, remapping labels to `0..26`.
pub fn load_emnist_letters(
    images_path: &Path,
    labels_path: &Path,
    transpose: bool,
) -> Result<Dataset> {
    load_idx_pair(
        images_path,
        labels_path,
        LabelScheme::Letters,
        transpose,
        SplitTag::Train,
    )
}

pub fn load_idx_pair(
    images_path: &Path,
    labels_path: &Path,
    scheme: LabelScheme,
    transpose: bool,
    split_tag: SplitTag,
) -> Result<Dataset> {
    let images = read_idx_file(images_path)?;
    let labels = read_idx_file(labels_path)?;
    dataset_from_idx(&images, &labels, scheme, transpose, split_tag)
}

/// Seeded shuffled partition into `(train, val)`. The validation part holds
/// `floor(n * val_fraction)` samples, kept within `[1, n - 1]`.
pub fn split(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config(format!(
            "val_fraction {val_fraction} outside (0, 1)"
        )));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(Error::invalid(format!("cannot split {n} samples")));
    }
    let (train_idx, val_idx) = split_indices(n, val_fraction, seed);
    Ok((
        dataset.select(&train_idx, SplitTag::Train),
        dataset.select(&val_idx, SplitTag::Val),
    ))
}

/// Index form of [`split`]; both halves come back sorted.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = ((n as f64 * val_fraction).floor() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

/// Parameters of a synthetic classification problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Half-width of the uniform pixel noise around each class prototype.
    pub noise: f64,
    /// Fraction of samples whose label is replaced by a random class.
    pub label_noise: f64,
    pub seed: u64,
}

/// Prototype-plus-noise images: each class gets a random prototype in
/// `[0, 1]^d`, and samples perturb it with clamped uniform noise.
pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.samples == 0 || spec.input_dim == 0 || spec.num_classes < 2 {
        return Err(Error::config(
            "synthetic data needs samples, pixels and >= 2 classes",
        ));
    }
    if !(0.0..=1.0).contains(&spec.label_noise) || !(spec.noise >= 0.0) {
        return Err(Error::config("synthetic noise levels out of range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes =
        Array2::from_shape_simple_fn((spec.num_classes, spec.input_dim), || rng.gen::<f64>());
    let mut labels = Vec::with_capacity(spec.samples);
    let mut images = Array2::zeros((spec.samples, spec.input_dim));
    for (i, mut row) in images.rows_mut().into_iter().enumerate() {
        let class = i % spec.num_classes;
        for (px, proto) in row.iter_mut().zip(prototypes.row(class)) {
            let v = proto + spec.noise * (2.0 * rng.gen::<f64>() - 1.0);
            *px = v.clamp(0.0, 1.0);
        }
        let label = if rng.gen::<f64>() < spec.label_noise {
            rng.gen_range(0..spec.num_classes)
        } else {
            class
        };
        labels.push(label);
    }
    Dataset::new(images, labels, spec.num_classes, SplitTag::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn header(magic: [u8; 4], dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn parses_labels() {
        let mut bytes = header([0, 0, 8, 1], &[2]);
        bytes.extend_from_slice(&[5, 7]);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![2]);
        assert_eq!(t.data, vec![5, 7]);
    }

    #[test]
    fn parses_images() {
        let mut bytes = header([0, 0, 8, 3], &[1, 2, 2]);
        bytes.extend_from_slice(&[0x00, 0xFF, 0x80, 0x40]);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![1, 2, 2]);
        assert_eq!(t.data, vec![0, 255, 128, 64]);
    }

    #[test]
    fn parse_errors_are_distinct() {
        assert_eq!(parse_idx(&[0, 0, 8]), Err(IdxError::TooShort(3)));
        assert_eq!(
            parse_idx(&header([0, 0, 9, 3], &[1, 1, 1])),
            Err(IdxError::UnsupportedType(9))
        );
        assert!(matches!(
            parse_idx(&header([1, 0, 8, 1], &[1])),
            Err(IdxError::BadMagic(_))
        ));
        assert!(matches!(
            parse_idx(&header([0, 0, 8, 1], &[3])),
            Err(IdxError::Truncated {
                expected: 11,
                found: 8
            })
        ));
        assert!(matches!(
            parse_idx(&[0, 0, 8, 3, 0, 0]),
            Err(IdxError::Truncated { .. })
        ));
        let mut extra = header([0, 0, 8, 1], &[1]);
        extra.extend_from_slice(&[1, 2]);
        assert_eq!(parse_idx(&extra), Err(IdxError::TrailingBytes(1)));
    }

    #[test]
    fn letters_remap_and_scaling() {
        let images = IdxTensor::new(vec![2, 2, 2], vec![255, 0, 0, 0, 0, 0, 0, 255]).unwrap();
        let labels = IdxTensor::new(vec![2], vec![1, 26]).unwrap();
        let d = dataset_from_idx(
            &images,
            &labels,
            LabelScheme::Letters,
            false,
            SplitTag::Train,
        )
        .unwrap();
        assert_eq!(d.labels, vec![0, 25]);
        assert_eq!(d.images[[0, 0]], 1.0);
        assert_eq!(d.images[[0, 1]], 0.0);
        assert_eq!(d.num_classes, 26);

        let bad = IdxTensor::new(vec![2], vec![0, 26]).unwrap();
        assert!(matches!(
            dataset_from_idx(&images, &bad, LabelScheme::Letters, false, SplitTag::Train),
            Err(Error::DataIntegrity(_))
        ));
        let short = IdxTensor::new(vec![1], vec![3]).unwrap();
        assert!(matches!(
            dataset_from_idx(
                &images,
                &short,
                LabelScheme::Letters,
                false,
                SplitTag::Train
            ),
            Err(Error::DataIntegrity(_))
        ));
    }

    #[test]
    fn transpose_moves_pixel() {
        let mut px = vec![0u8; 28 * 28];
        px[2 * 28 + 5] = 255;
        let images = IdxTensor::new(vec![1, 28, 28], px).unwrap();
        let labels = IdxTensor::new(vec![1], vec![3]).unwrap();
        let d = dataset_from_idx(
            &images,
            &labels,
            LabelScheme::Letters,
            true,
            SplitTag::Train,
        )
        .unwrap();
        let lit: Vec<usize> = (0..784).filter(|i| d.images[[0, *i]] > 0.0).collect();
        assert_eq!(lit, vec![5 * 28 + 2]);
    }

    #[test]
    fn split_examples() {
        let spec = SyntheticSpec {
            samples: 10,
            input_dim: 3,
            num_classes: 2,
            noise: 0.1,
            label_noise: 0.0,
            seed: 1,
        };
        let d = synthetic(&spec).unwrap();
        let (a, b) = split_indices(10, 0.2, 42);
        assert_eq!((a.len(), b.len()), (8, 2));
        let all: BTreeSet<usize> = a.iter().chain(&b).copied().collect();
        assert_eq!(all, (0..10).collect());
        assert_eq!(split_indices(10, 0.2, 42), (a, b));
        let (train, val) = split(&d, 0.2, 42).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        assert_eq!(val.split_tag, SplitTag::Val);
        assert!(split(&d, 1.0, 1).is_err());
        assert!(split(&d, 0.0, 1).is_err());
    }

    #[test]
    fn gzip_container_detected() {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        use std::io::Write;
        let t = IdxTensor::new(vec![3], vec![1, 2, 3]).unwrap();
        let raw = serialize_idx(&t);
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(parse_idx(&maybe_gunzip(gz).unwrap()).unwrap(), t);
        assert_eq!(maybe_gunzip(raw.clone()).unwrap(), raw);
    }
}
