//! Datasets, the IDX loader, a synthetic Gaussian-mixture generator and
//! minibatch samplers.
//!
//! IDX files are read bit-exactly: a big-endian `u32` magic (`0x00000803`
//! for images, `0x00000801` for labels), one big-endian `u32` per dimension,
//! then an unsigned-byte payload. Gzip input is detected by its `1F 8B`
//! prefix and decompressed transparently. Pixels map to `byte / 255`.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{norm2, RngStream, Vector};

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// Supervision attached to each sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Class ids in `[0, num_classes)`.
    Classes { ids: Vec<usize>, num_classes: usize },
    /// Regression or reconstruction targets.
    Vectors(Vec<Vector>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { ids, .. } => ids.len(),
            Targets::Vectors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Immutable collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    features: Vec<Vector>,
    targets: Targets,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Vec<Vector>, targets: Targets) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::param("dataset must contain at least one sample"));
        }
        if features.len() != targets.len() {
            return Err(Error::Dimension {
                expected: features.len(),
                actual: targets.len(),
            });
        }
        let dim = features[0].len();
        if let Some(bad) = features.iter().find(|f| f.len() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                actual: bad.len(),
            });
        }
        match &targets {
            Targets::Classes { ids, num_classes } => {
                if let Some(&y) = ids.iter().find(|&&y| y >= *num_classes) {
                    return Err(Error::param(format!(
                        "label {y} outside [0, {num_classes})"
                    )));
                }
            }
            Targets::Vectors(v) => {
                if let Some(bad) = v.iter().find(|t| t.len() != v[0].len()) {
                    return Err(Error::Dimension {
                        expected: v[0].len(),
                        actual: bad.len(),
                    });
                }
            }
        }
        Ok(Dataset {
            name: name.into(),
            features,
            targets,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn features(&self) -> &[Vector] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &Vector {
        &self.features[i]
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Classes { num_classes, .. } => Some(num_classes),
            Targets::Vectors(_) => None,
        }
    }

    /// Same features, with each sample's target replaced by its own features.
    pub fn into_autoencoding(self) -> Dataset {
        let targets = Targets::Vectors(self.features.clone());
        Dataset {
            name: format!("{}-autoencoding", self.name),
            features: self.features,
            targets,
        }
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split_at(self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::param(format!(
                "split point {n} must be inside (0, {})",
                self.len()
            )));
        }
        let mut features = self.features;
        let rest_features = features.split_off(n);
        let (head, tail) = match self.targets {
            Targets::Classes {
                mut ids,
                num_classes,
            } => {
                let rest = ids.split_off(n);
                (
                    Targets::Classes { ids, num_classes },
                    Targets::Classes {
                        ids: rest,
                        num_classes,
                    },
                )
            }
            Targets::Vectors(mut v) => {
                let rest = v.split_off(n);
                (Targets::Vectors(v), Targets::Vectors(rest))
            }
        };
        Ok((
            Dataset {
                name: format!("{}-train", self.name),
                features,
                targets: head,
            },
            Dataset {
                name: format!("{}-test", self.name),
                features: rest_features,
                targets: tail,
            },
        ))
    }
}

/// Distinct sample indices into a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Batch {
    indices: Vec<usize>,
}

impl Batch {
    /// Validates bounds and uniqueness against a dataset of `len` samples.
    pub fn new(indices: Vec<usize>, len: usize) -> Result<Self> {
        let mut seen = vec![false; len];
        for &i in &indices {
            if i >= len {
                return Err(Error::param(format!("batch index {i} out of bounds for {len}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::param(format!("duplicate batch index {i}")));
            }
        }
        Ok(Batch { indices })
    }

    pub fn all(len: usize) -> Self {
        Batch {
            indices: (0..len).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Minibatch sampling regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Each sample joins independently with probability `rate`. Matches the accountant.
    #[default]
    Poisson,
    /// Fixed-size draw without replacement. Accounting under this sampler is approximate.
    Uniform,
}

/// Poisson subsampling over a dataset of `len` samples. May return an empty batch.
pub fn poisson_sample(len: usize, rate: f64, rng: &mut RngStream) -> Result<Batch> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::param(format!("sampling rate must be in (0, 1], got {rate}")));
    }
    let indices = (0..len).filter(|_| rng.next_uniform() < rate).collect();
    Ok(Batch { indices })
}

/// `size` distinct indices drawn uniformly without replacement (partial Fisher–Yates).
pub fn uniform_sample(len: usize, size: usize, rng: &mut RngStream) -> Result<Batch> {
    if size > len {
        return Err(Error::param(format!(
            "cannot draw {size} distinct samples from {len}"
        )));
    }
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..size {
        let j = i + rng.next_below(len - i);
        pool.swap(i, j);
    }
    pool.truncate(size);
    Ok(Batch { indices: pool })
}

/// Gaussian mixture with one unit-variance spherical component per class.
///
/// Class means point in uniformly random directions with norm `separation`.
/// Labels cycle through the classes and are then shuffled, so every class
/// gets `n / num_classes` samples up to rounding.
pub fn synth_classification(
    n: usize,
    dim: usize,
    num_classes: usize,
    separation: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if num_classes < 2 || n < num_classes || dim == 0 {
        return Err(Error::param(format!(
            "synthetic data needs n >= classes >= 2 and dim >= 1 (n={n}, classes={num_classes}, dim={dim})"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::param("separation must be finite and >= 0"));
    }
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let mut dir: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();
            let norm = norm2(&Vector::from_raw(dir.clone()));
            let scale = if norm > 0.0 { separation / norm } else { 0.0 };
            dir.iter_mut().for_each(|x| *x *= scale);
            dir
        })
        .collect();

    let mut ids: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    for i in (1..n).rev() {
        let j = rng.next_below(i + 1);
        ids.swap(i, j);
    }
    let features = ids
        .iter()
        .map(|&y| Vector::from_raw(means[y].iter().map(|m| m + rng.next_normal()).collect()))
        .collect();
    Dataset::new(
        format!("synth-{n}x{dim}-k{num_classes}"),
        features,
        Targets::Classes { ids, num_classes },
    )
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!("truncated while reading {what}"),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
    }
}

/// Parsed IDX header plus the raw payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an in-memory IDX file whose magic must equal `expected_magic`.
pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<IdxArray> {
    let mut r = IdxReader { bytes, pos: 0 };
    let magic = r.read_u32("magic number")?;
    if magic != expected_magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic number {magic:#010x}, expected {expected_magic:#010x}"),
        });
    }
    let ndims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        dims.push(r.read_u32(&format!("dimension {d}"))? as usize);
    }
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format {
            offset: 4,
            message: "dimension product overflows".into(),
        })?;
    let payload = &bytes[r.pos..];
    if payload.len() < expected {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!(
                "truncated payload: header declares {expected} bytes, found {}",
                payload.len()
            ),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format {
            offset: (r.pos + expected) as u64,
            message: format!("{} trailing bytes after payload", payload.len() - expected),
        });
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                offset: 0,
                message: format!("{}: gzip stream: {e}", path.display()),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Reads only the header of an IDX file (plain or gzip) and returns its dimensions.
pub fn read_idx_dims(path: &Path, expected_magic: u32) -> Result<Vec<usize>> {
    let file = std::fs::File::open(path)?;
    let mut prefix = [0u8; 2];
    let mut peek = std::io::BufReader::new(file);
    let head = {
        use std::io::BufRead;
        let buf = peek.fill_buf()?;
        prefix.iter_mut().zip(buf).for_each(|(p, b)| *p = *b);
        buf.len()
    };
    let mut reader: Box<dyn Read> = if head >= 2 && prefix == [0x1f, 0x8b] {
        Box::new(GzDecoder::new(peek))
    } else {
        Box::new(peek)
    };
    let mut word = [0u8; 4];
    let mut read_word = |what: &str, offset: u64| -> Result<u32> {
        reader.read_exact(&mut word).map_err(|_| Error::Format {
            offset,
            message: format!("truncated header: missing {what}"),
        })?;
        Ok(u32::from_be_bytes(word))
    };
    let magic = read_word("magic number", 0)?;
    if magic != expected_magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic number {magic:#010x}, expected {expected_magic:#010x}"),
        });
    }
    (0..(magic & 0xff) as u64)
        .map(|d| read_word(&format!("dimension {d}"), 4 + 4 * d).map(|v| v as usize))
        .collect()
}

/// Builds a classification dataset from in-memory image and label IDX files.
pub fn dataset_from_idx_bytes(name: &str, images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let images = parse_idx(images, IDX_IMAGES_MAGIC)?;
    let labels = parse_idx(labels, IDX_LABELS_MAGIC)?;
    let (n_img, n_lab) = (images.dims[0], labels.dims[0]);
    if n_img != n_lab {
        return Err(Error::Format {
            offset: 4,
            message: format!("label file declares {n_lab} items but image file declares {n_img}"),
        });
    }
    if n_img == 0 {
        return Err(Error::Format {
            offset: 4,
            message: "empty dataset".into(),
        });
    }
    let pixels = images.dims[1] * images.dims[2];
    let features = images
        .data
        .chunks_exact(pixels)
        .map(|img| Vector::from_raw(img.iter().map(|&b| f64::from(b) / 255.0).collect()))
        .collect();
    let ids: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
    let num_classes = ids.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(name, features, Targets::Classes { ids, num_classes })
}

/// Loads an image/label IDX pair (plain or gzip).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_maybe_gzip(images_path)?;
    let labels = read_maybe_gzip(labels_path)?;
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    dataset_from_idx_bytes(&name, &images, &labels)
}

/// Serializes images and labels as an IDX pair. Used by tests and tooling.
pub fn encode_idx(images: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_idx() -> (Vec<u8>, Vec<u8>) {
        let images = vec![vec![0u8, 255, 128, 1], vec![255u8, 0, 0, 0], vec![7u8; 4]];
        encode_idx(&images, 2, 2, &[3, 1, 0])
    }

    #[test]
    fn idx_scaling_and_layout() {
        let (img, lab) = tiny_idx();
        let ds = dataset_from_idx_bytes("tiny", &img, &lab).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.feature_dim(), 4);
        assert_eq!(ds.feature(0).as_slice()[0], 0.0);
        assert_eq!(ds.feature(0).as_slice()[1], 1.0);
        assert_eq!(ds.feature(1).as_slice()[0], 1.0);
        assert_eq!(ds.num_classes(), Some(4));
    }

    #[test]
    fn idx_full_mnist_shape() {
        let images = vec![vec![0u8; 784]; 60000];
        let labels: Vec<u8> = (0..60000).map(|i| (i % 10) as u8).collect();
        let (img, lab) = encode_idx(&images, 28, 28, &labels);
        let ds = dataset_from_idx_bytes("mnist", &img, &lab).unwrap();
        assert_eq!(ds.len(), 60000);
        assert_eq!(ds.feature_dim(), 784);
        assert_eq!(ds.num_classes(), Some(10));
    }

    #[test]
    fn idx_count_mismatch() {
        let images = vec![vec![0u8; 4]; 5];
        let (img, _) = encode_idx(&images, 2, 2, &[0; 5]);
        let (_, lab) = encode_idx(&images[..4], 2, 2, &[0; 4]);
        let err = dataset_from_idx_bytes("x", &img, &lab).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 4, .. }), "{err}");
    }

    #[test]
    fn idx_bad_magic() {
        let (img, lab) = tiny_idx();
        assert!(matches!(
            dataset_from_idx_bytes("x", &lab, &img),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn idx_gzip_round_trip() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let (img, lab) = tiny_idx();
        let dir = tempfile::tempdir().unwrap();
        let gz = |bytes: &[u8]| {
            let mut e = GzEncoder::new(Vec::new(), Compression::default());
            e.write_all(bytes).unwrap();
            e.finish().unwrap()
        };
        let ip = dir.path().join("images.gz");
        let lp = dir.path().join("labels");
        std::fs::write(&ip, gz(&img)).unwrap();
        std::fs::write(&lp, &lab).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds, dataset_from_idx_bytes("tiny", &img, &lab).unwrap().renamed(ds.name()));
        let dims = read_idx_dims(&ip, IDX_IMAGES_MAGIC).unwrap();
        assert_eq!(dims[0], ds.len());
        assert_eq!(read_idx_dims(&lp, IDX_LABELS_MAGIC).unwrap(), vec![ds.len()]);
        assert!(matches!(
            read_idx_dims(&lp, IDX_IMAGES_MAGIC),
            Err(Error::Format { offset: 0, .. })
        ));
        std::fs::write(&lp, &lab[..6]).unwrap();
        assert!(matches!(
            read_idx_dims(&lp, IDX_LABELS_MAGIC),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    impl Dataset {
        fn renamed(mut self, name: &str) -> Self {
            self.name = name.to_string();
            self
        }
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let (img, lab) = tiny_idx();
        for cut in 0..img.len() {
            let err = dataset_from_idx_bytes("x", &img[..cut], &lab).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
        for cut in 0..lab.len() {
            let err = dataset_from_idx_bytes("x", &img, &lab[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let (img, lab) = tiny_idx();
            let _ = dataset_from_idx_bytes("x", &bytes, &lab);
            let _ = dataset_from_idx_bytes("x", &img, &bytes);
        }
    }

    #[test]
    fn synth_is_balanced_and_deterministic() {
        let ds = synth_classification(4, 1, 2, 0.0, &mut RngStream::new(1, 0)).unwrap();
        let Targets::Classes { ids, .. } = ds.targets() else { unreachable!() };
        assert_eq!(ids.iter().filter(|&&y| y == 0).count(), 2);
        let a = synth_classification(50, 3, 5, 2.0, &mut RngStream::new(8, 1)).unwrap();
        let b = synth_classification(50, 3, 5, 2.0, &mut RngStream::new(8, 1)).unwrap();
        assert_eq!(a, b);
        assert!(synth_classification(3, 2, 4, 1.0, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn poisson_full_rate_takes_everything() {
        let b = poisson_sample(100, 1.0, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(b.indices(), (0..100).collect::<Vec<_>>().as_slice());
        assert!(poisson_sample(10, 0.0, &mut RngStream::new(3, 0)).is_err());
    }

    #[test]
    fn poisson_tiny_rate_is_empty() {
        let mut rng = RngStream::new(5, 0);
        let empties = (0..100)
            .filter(|_| poisson_sample(100, 1e-12, &mut rng).unwrap().is_empty())
            .count();
        assert_eq!(empties, 100);
    }

    #[test]
    fn poisson_mean_batch_size() {
        // Binomial(60000, 512/60000) has sd ~22.5; the mean of 1000 draws has
        // sd ~0.71, so +-15 is a very loose bound.
        let mut rng = RngStream::new(11, 0);
        let rate = 512.0 / 60000.0;
        let total: usize = (0..1000)
            .map(|_| poisson_sample(60000, rate, &mut rng).unwrap().len())
            .sum();
        let mean = total as f64 / 1000.0;
        assert!((mean - 512.0).abs() < 15.0, "mean {mean}");
    }

    #[test]
    fn poisson_size_chi_square() {
        // n = 20, rate = 0.3; bins {<=3, 4, 5, 6, 7, 8, >=9}, 6 dof.
        let (n, p, draws) = (20usize, 0.3, 5000usize);
        let mut rng = RngStream::new(99, 0);
        let mut counts = [0usize; 7];
        for _ in 0..draws {
            let k = poisson_sample(n, p, &mut rng).unwrap().len();
            counts[k.clamp(3, 9) - 3] += 1;
        }
        let pmf = |k: usize| {
            let mut c = 1.0;
            for i in 0..k {
                c *= (n - i) as f64 / (i + 1) as f64;
            }
            c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
        };
        let mut probs = [0.0; 7];
        for k in 0..=n {
            probs[k.clamp(3, 9) - 3] += pmf(k);
        }
        let chi2: f64 = counts
            .iter()
            .zip(probs)
            .map(|(&o, q)| {
                let e = q * draws as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        // 99.9th percentile of chi-square with 6 dof
        assert!(chi2 < 22.458, "chi2 {chi2}");
    }

    #[test]
    fn uniform_examples() {
        let mut rng = RngStream::new(4, 0);
        let mut all = uniform_sample(10, 10, &mut rng).unwrap().indices().to_vec();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(uniform_sample(10, 0, &mut rng).unwrap().is_empty());
        assert!(uniform_sample(3, 4, &mut rng).is_err());
    }

    #[test]
    fn uniform_single_index_frequencies() {
        // Multinomial(3000, 1/3 each): sd ~25.8, so 1000 +- 100 is ~3.9 sd.
        let mut rng = RngStream::new(21, 0);
        let mut freq = [0usize; 3];
        for _ in 0..3000 {
            freq[uniform_sample(3, 1, &mut rng).unwrap().indices()[0]] += 1;
        }
        for f in freq {
            assert!((900..=1100).contains(&f), "{freq:?}");
        }
    }

    proptest! {
        #[test]
        fn samplers_never_duplicate(seed in any::<u64>(), n in 1usize..200, rate in 0.01f64..1.0) {
            let mut rng = RngStream::new(seed, 0);
            let p = poisson_sample(n, rate, &mut rng).unwrap();
            prop_assert!(Batch::new(p.indices().to_vec(), n).is_ok());
            let size = (n as f64 * rate) as usize;
            let u = uniform_sample(n, size, &mut rng).unwrap();
            prop_assert_eq!(u.len(), size);
            prop_assert!(Batch::new(u.indices().to_vec(), n).is_ok());
        }
    }

    #[test]
    fn batch_validation() {
        assert!(Batch::new(vec![0, 1, 1], 3).is_err());
        assert!(Batch::new(vec![3], 3).is_err());
        assert!(Batch::new(vec![2, 0], 3).is_ok());
    }

    #[test]
    fn split_and_autoencoding() {
        let ds = synth_classification(10, 2, 2, 1.0, &mut RngStream::new(0, 0)).unwrap();
        let (a, b) = ds.clone().split_at(7).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        assert_eq!(b.feature(0), ds.feature(7));
        let ae = a.into_autoencoding();
        let Targets::Vectors(t) = ae.targets() else { unreachable!() };
        assert_eq!(&t[3], ae.feature(3));
    }
}
