//! Dataset container, IDX ingestion, and the synthetic Gaussian generator.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Idx,
    Synthetic,
}

/// Flat n x d feature matrix with labels. Features live in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<f32>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(
        examples: Vec<f32>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Dataset> {
        if dim == 0 {
            return Err(Error::Data("dimension must be positive".into()));
        }
        if labels.is_empty() {
            return Err(Error::Data("dataset must hold at least one example".into()));
        }
        if examples.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} feature values do not tile {} examples of dim {dim}",
                examples.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset { examples, labels, dim, num_classes, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn example(&self, i: usize) -> &[f32] {
        &self.examples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

/// Parse the big-endian IDX pair. Pixels map to [-1, 1] via x/127.5 - 1.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut images = BufReader::new(File::open(images_path)?);
    let magic = images.read_u32::<BigEndian>()?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad images magic {magic:#010x}, want {IMAGES_MAGIC:#010x}"
        )));
    }
    let count = images.read_u32::<BigEndian>()? as usize;
    let rows = images.read_u32::<BigEndian>()? as usize;
    let cols = images.read_u32::<BigEndian>()? as usize;
    let dim = rows * cols;
    let mut pixels = vec![0u8; count * dim];
    images.read_exact(&mut pixels)?;

    let mut labels_file = BufReader::new(File::open(labels_path)?);
    let magic = labels_file.read_u32::<BigEndian>()?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad labels magic {magic:#010x}, want {LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = labels_file.read_u32::<BigEndian>()? as usize;
    if label_count != count {
        return Err(Error::Format(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let mut raw_labels = vec![0u8; label_count];
    labels_file.read_exact(&mut raw_labels)?;

    let examples: Vec<f32> = pixels.iter().map(|&p| p as f32 / 127.5 - 1.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(examples, labels, dim, num_classes, Provenance::Idx)
}

/// n_per_class draws from Normal(mu_c, sigma^2 * I) per class, block-ordered
/// by class, deterministic in `seed`.
pub fn generate_gaussian_dataset(
    class_means: &[Vec<f32>],
    sigma: f64,
    n_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    if class_means.len() < 2 {
        return Err(Error::Parameter("need at least two classes".into()));
    }
    if n_per_class == 0 {
        return Err(Error::Parameter("n_per_class must be at least 1".into()));
    }
    let dim = class_means[0].len();
    if dim == 0 || class_means.iter().any(|m| m.len() != dim) {
        return Err(Error::Shape("class means must share one nonzero dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(class_means.len() * n_per_class * dim);
    let mut labels = Vec::with_capacity(class_means.len() * n_per_class);
    for (c, mean) in class_means.iter().enumerate() {
        for _ in 0..n_per_class {
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                examples.push((m as f64 + sigma * z) as f32);
            }
            labels.push(c);
        }
    }
    Dataset::new(examples, labels, dim, class_means.len(), Provenance::Synthetic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_pair(
        dir: &Path,
        count: u32,
        rows: u32,
        cols: u32,
        pixels: &[u8],
        labels: &[u8],
        images_magic: u32,
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let images_path = dir.join("images.idx");
        let labels_path = dir.join("labels.idx");
        let mut f = File::create(&images_path).unwrap();
        f.write_all(&images_magic.to_be_bytes()).unwrap();
        f.write_all(&count.to_be_bytes()).unwrap();
        f.write_all(&rows.to_be_bytes()).unwrap();
        f.write_all(&cols.to_be_bytes()).unwrap();
        f.write_all(pixels).unwrap();
        let mut f = File::create(&labels_path).unwrap();
        f.write_all(&LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (images_path, labels_path)
    }

    #[test]
    fn hand_built_idx_pair_parses() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = [0u8, 255, 128, 64, 10, 20, 30, 40];
        let (ip, lp) = write_idx_pair(dir.path(), 2, 2, 2, &pixels, &[1, 0], IMAGES_MAGIC);
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 4);
        assert_eq!(d.label(0), 1);
        assert_eq!(d.label(1), 0);
        assert_eq!(d.provenance(), Provenance::Idx);
        assert_eq!(d.example(0)[0], -1.0);
        assert_eq!(d.example(0)[1], 1.0);
        assert!((d.example(0)[2] - (128.0 / 127.5 - 1.0)).abs() < 1e-7);
    }

    #[test]
    fn idx_error_cases() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = [0u8; 8];
        // Labels magic where the images magic belongs.
        let (ip, lp) = write_idx_pair(dir.path(), 2, 2, 2, &pixels, &[0, 1], LABELS_MAGIC);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))));
        // Count mismatch between the two files.
        let (ip, lp) = write_idx_pair(dir.path(), 2, 2, 2, &pixels, &[0, 1, 1], IMAGES_MAGIC);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))));
        // Truncated pixel payload.
        let (ip, lp) = write_idx_pair(dir.path(), 3, 2, 2, &pixels, &[0, 1, 1], IMAGES_MAGIC);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Io(_))));
    }

    /// Minimal reference parser used only as an oracle: reads the whole file
    /// into memory and slices it by hand.
    fn reference_parse(images: &[u8], labels: &[u8]) -> Option<(Vec<f32>, Vec<usize>, usize)> {
        let u32_at = |b: &[u8], i: usize| -> Option<u32> {
            Some(u32::from_be_bytes(b.get(i..i + 4)?.try_into().ok()?))
        };
        if u32_at(images, 0)? != 0x0803 || u32_at(labels, 0)? != 0x0801 {
            return None;
        }
        let n = u32_at(images, 4)? as usize;
        let r = u32_at(images, 8)? as usize;
        let c = u32_at(images, 12)? as usize;
        if u32_at(labels, 4)? as usize != n {
            return None;
        }
        let px = images.get(16..16 + n * r * c)?;
        let lb = labels.get(8..8 + n)?;
        Some((
            px.iter().map(|&p| p as f32 / 127.5 - 1.0).collect(),
            lb.iter().map(|&l| l as usize).collect(),
            r * c,
        ))
    }

    #[test]
    fn idx_matches_reference_parser_on_random_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..100 {
            let count = rng.random_range(1..6u32);
            let rows = rng.random_range(1..5u32);
            let cols = rng.random_range(1..5u32);
            let n_px = (count * rows * cols) as usize;
            let pixels: Vec<u8> = (0..n_px).map(|_| rng.random()).collect();
            let labels: Vec<u8> =
                (0..count).map(|_| rng.random_range(0..4)).collect();
            let (ip, lp) =
                write_idx_pair(dir.path(), count, rows, cols, &pixels, &labels, IMAGES_MAGIC);
            let got = load_idx(&ip, &lp).unwrap();
            let raw_images = std::fs::read(&ip).unwrap();
            let raw_labels = std::fs::read(&lp).unwrap();
            let (want_px, want_lb, want_dim) =
                reference_parse(&raw_images, &raw_labels).unwrap();
            assert_eq!(got.dim(), want_dim, "case {case}");
            assert_eq!(got.len(), want_lb.len());
            for i in 0..got.len() {
                assert_eq!(got.label(i), want_lb[i]);
                assert_eq!(got.example(i), &want_px[i * want_dim..(i + 1) * want_dim]);
            }
        }
    }

    #[test]
    fn gaussian_generator_is_deterministic() {
        let means = [vec![1.0, -1.0], vec![-1.0, 1.0]];
        let a = generate_gaussian_dataset(&means, 0.5, 5, 7).unwrap();
        let b = generate_gaussian_dataset(&means, 0.5, 5, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert_eq!(a.num_classes(), 2);
        let labels: Vec<usize> = (0..10).map(|i| a.label(i)).collect();
        assert_eq!(labels, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert_ne!(a, generate_gaussian_dataset(&means, 0.5, 5, 8).unwrap());
    }

    #[test]
    fn gaussian_generator_moments() {
        let means = [vec![2.0, -1.5], vec![0.0, 0.0]];
        let sigma = 0.8;
        let n = 10_000;
        let d = generate_gaussian_dataset(&means, sigma, n, 21).unwrap();
        for (c, mean) in means.iter().enumerate() {
            for j in 0..2 {
                let mut acc = 0.0_f64;
                for i in 0..n {
                    acc += d.example(c * n + i)[j] as f64;
                }
                let sample_mean = acc / n as f64;
                let bound = 4.0 * sigma / (n as f64).sqrt();
                assert!(
                    (sample_mean - mean[j] as f64).abs() < bound,
                    "class {c} dim {j}: {sample_mean} vs {}",
                    mean[j]
                );
            }
        }
    }

    #[test]
    fn generator_rejects_bad_parameters() {
        let means = [vec![1.0], vec![-1.0]];
        assert!(matches!(
            generate_gaussian_dataset(&means, 0.0, 5, 7),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            generate_gaussian_dataset(&means[..1], 1.0, 5, 7),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            generate_gaussian_dataset(&means, 1.0, 0, 7),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            generate_gaussian_dataset(&[vec![1.0], vec![1.0, 2.0]], 1.0, 5, 7),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dataset_invariants() {
        assert!(Dataset::new(vec![1.0], vec![0], 1, 1, Provenance::Synthetic).is_ok());
        assert!(matches!(
            Dataset::new(vec![1.0], vec![1], 1, 1, Provenance::Synthetic),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            Dataset::new(vec![], vec![], 1, 1, Provenance::Synthetic),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            Dataset::new(vec![1.0, 2.0, 3.0], vec![0, 0], 2, 1, Provenance::Synthetic),
            Err(Error::Shape(_))
        ));
    }
}
