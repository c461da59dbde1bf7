//! Feature, label and code files, synthetic data and db/query splits.
//!
//! All three on-disk formats share one layout: a four byte magic, two
//! little-endian `u32` dimensions, then a dense row-major payload.
//!
//! | file | magic  | dims                  | payload                                  |
//! |------|--------|-----------------------|------------------------------------------|
//! | features | `XMH1` | rows, cols        | `rows * cols` little-endian `f32`        |
//! | labels   | `XML1` | rows, num_classes | `rows * num_classes` bytes, each 0 or 1  |
//! | codes    | `XMC1` | rows, bits        | `rows * ceil(bits / 8)` bytes, LSB-first |

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::index::PackedCodes;
use crate::Modality;

pub const FEATURE_MAGIC: &[u8; 4] = b"XMH1";
pub const LABEL_MAGIC: &[u8; 4] = b"XML1";
pub const CODE_MAGIC: &[u8; 4] = b"XMC1";

/// File names used when a dataset is stored as a directory.
pub const IMAGE_FILE: &str = "image.xmh";
pub const TEXT_FILE: &str = "text.xmh";
pub const LABEL_FILE: &str = "labels.xml";

const HEADER_LEN: usize = 12;

/// Dense row-major `f32` matrix, one instance per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "feature matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: values.len(),
                context: "feature matrix payload",
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature matrix entry ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::invalid(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            values.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.cols, values)
    }

    /// Scales every row to unit Euclidean norm. All-zero rows are left as is.
    pub fn l2_normalized(&self) -> Self {
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.cols) {
            let norm = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v = (f64::from(*v) / norm) as f32);
            }
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            values,
        }
    }
}

/// Multi-hot class membership, one byte (0 or 1) per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    rows: usize,
    num_classes: usize,
    values: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(rows: usize, num_classes: usize, values: Vec<u8>) -> Result<Self> {
        if rows == 0 || num_classes == 0 {
            return Err(Error::invalid(format!(
                "label matrix must be non-empty, got {rows}x{num_classes}"
            )));
        }
        if values.len() != rows * num_classes {
            return Err(Error::DimensionMismatch {
                expected: rows * num_classes,
                actual: values.len(),
                context: "label matrix payload",
            });
        }
        if let Some(pos) = values.iter().position(|&v| v > 1) {
            return Err(Error::invalid(format!(
                "label entry {pos} is {}, expected 0 or 1",
                values[pos]
            )));
        }
        Ok(Self {
            rows,
            num_classes,
            values,
        })
    }

    /// One-hot labels from class ids.
    pub fn one_hot(ids: &[usize], num_classes: usize) -> Result<Self> {
        let mut values = vec![0u8; ids.len() * num_classes];
        for (row, &id) in ids.iter().enumerate() {
            if id >= num_classes {
                return Err(Error::invalid(format!("class id {id} >= {num_classes}")));
            }
            values[row * num_classes + id] = 1;
        }
        Self::new(ids.len(), num_classes, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.values[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Number of rows with no class set. Such rows are never scored as queries.
    pub fn count_empty_rows(&self) -> usize {
        self.values
            .chunks(self.num_classes)
            .filter(|row| row.iter().all(|&v| v == 0))
            .count()
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(indices.len() * self.num_classes);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::invalid(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            values.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.num_classes, values)
    }
}

/// Paired image/text features. Row `i` of both modalities is one co-occurring pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    image: FeatureMatrix,
    text: FeatureMatrix,
    labels: Option<LabelMatrix>,
}

impl Dataset {
    pub fn new(image: FeatureMatrix, text: FeatureMatrix, labels: Option<LabelMatrix>) -> Result<Self> {
        if image.rows() != text.rows() {
            return Err(Error::DimensionMismatch {
                expected: image.rows(),
                actual: text.rows(),
                context: "text rows vs image rows",
            });
        }
        if let Some(labels) = &labels {
            if labels.rows() != image.rows() {
                return Err(Error::DimensionMismatch {
                    expected: image.rows(),
                    actual: labels.rows(),
                    context: "label rows vs feature rows",
                });
            }
        }
        Ok(Self {
            image,
            text,
            labels,
        })
    }

    /// Number of pairs.
    pub fn len(&self) -> usize {
        self.image.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self) -> &FeatureMatrix {
        &self.image
    }

    pub fn text(&self) -> &FeatureMatrix {
        &self.text
    }

    pub fn features(&self, modality: Modality) -> &FeatureMatrix {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn labels(&self) -> Option<&LabelMatrix> {
        self.labels.as_ref()
    }

    /// The pairs at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.image.gather(indices)?,
            self.text.gather(indices)?,
            self.labels.as_ref().map(|l| l.gather(indices)).transpose()?,
        )
    }

    pub fn l2_normalized(&self) -> Self {
        Self {
            image: self.image.l2_normalized(),
            text: self.text.l2_normalized(),
            labels: self.labels.clone(),
        }
    }

    /// Writes `image.xmh`, `text.xmh` and, if present, `labels.xml` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_features(&self.image, &dir.join(IMAGE_FILE))?;
        save_features(&self.text, &dir.join(TEXT_FILE))?;
        if let Some(labels) = &self.labels {
            save_labels(labels, &dir.join(LABEL_FILE))?;
        }
        Ok(())
    }

    /// Inverse of [`Dataset::save_dir`]. A missing label file yields an unlabeled dataset.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let image = load_features(&dir.join(IMAGE_FILE))?;
        let text = load_features(&dir.join(TEXT_FILE))?;
        let label_path = dir.join(LABEL_FILE);
        let labels = if label_path.exists() {
            Some(load_labels(&label_path)?)
        } else {
            None
        };
        Self::new(image, text, labels)
    }
}

/// Partition of `0..n` into a retrieval database (also the training set) and queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub db: Vec<usize>,
    pub query: Vec<usize>,
}

impl Split {
    /// Draws `round(n * query_fraction)` query indices uniformly without
    /// replacement. Both lists are returned in ascending order.
    pub fn random(n: usize, query_fraction: f64, seed: u64) -> Result<Self> {
        if !(query_fraction > 0.0 && query_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "query fraction must lie in (0, 1), got {query_fraction}"
            )));
        }
        let num_query = (n as f64 * query_fraction).round() as usize;
        if num_query == 0 || num_query >= n {
            return Err(Error::invalid(format!(
                "query fraction {query_fraction} of {n} pairs leaves an empty query or database set"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut is_query = vec![false; n];
        for i in sample(&mut rng, n, num_query) {
            is_query[i] = true;
        }
        let (query, db): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_query[i]);
        Ok(Self { db, query })
    }
}

pub fn split_dataset(dataset: &Dataset, query_fraction: f64, seed: u64) -> Result<Split> {
    Split::random(dataset.len(), query_fraction, seed)
}

/// Parameters of the clustered synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_pairs: usize,
    pub num_clusters: usize,
    pub dim_image: usize,
    pub dim_text: usize,
    pub noise_sigma: f64,
    /// Centroids are rescaled, when needed, so that the closest two sit at
    /// least `min_separation * noise_sigma` apart.
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_pairs: 2000,
            num_clusters: 10,
            dim_image: 64,
            dim_text: 32,
            noise_sigma: 0.3,
            min_separation: 6.0,
            seed: 0,
        }
    }
}

/// Generates paired features around per-cluster centroids.
///
/// Every pair gets a uniformly drawn cluster id. Its image row is the image
/// centroid of that cluster plus isotropic Gaussian noise, and likewise for
/// text. Labels are the one-hot cluster ids.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.num_clusters == 0 || cfg.num_clusters > cfg.num_pairs {
        return Err(Error::invalid(format!(
            "need 1 <= clusters <= pairs, got {} clusters for {} pairs",
            cfg.num_clusters, cfg.num_pairs
        )));
    }
    if cfg.dim_image == 0 || cfg.dim_text == 0 {
        return Err(Error::invalid("feature dimensions must be at least 1"));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "noise sigma must be finite and non-negative, got {}",
            cfg.noise_sigma
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let image_centroids = centroids(&mut rng, cfg.num_clusters, cfg.dim_image, cfg);
    let text_centroids = centroids(&mut rng, cfg.num_clusters, cfg.dim_text, cfg);

    let mut ids = Vec::with_capacity(cfg.num_pairs);
    let mut image = Vec::with_capacity(cfg.num_pairs * cfg.dim_image);
    let mut text = Vec::with_capacity(cfg.num_pairs * cfg.dim_text);
    for _ in 0..cfg.num_pairs {
        let c = rng.random_range(0..cfg.num_clusters);
        ids.push(c);
        push_noisy(&mut rng, &mut image, &image_centroids[c], cfg.noise_sigma);
        push_noisy(&mut rng, &mut text, &text_centroids[c], cfg.noise_sigma);
    }

    Dataset::new(
        FeatureMatrix::new(cfg.num_pairs, cfg.dim_image, image)?,
        FeatureMatrix::new(cfg.num_pairs, cfg.dim_text, text)?,
        Some(LabelMatrix::one_hot(&ids, cfg.num_clusters)?),
    )
}

fn centroids(rng: &mut ChaCha8Rng, k: usize, dim: usize, cfg: &SyntheticConfig) -> Vec<Vec<f64>> {
    let mut cs: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..k {
        for b in a + 1..k {
            let d2: f64 = cs[a].iter().zip(&cs[b]).map(|(x, y)| (x - y).powi(2)).sum();
            min_dist = min_dist.min(d2.sqrt());
        }
    }
    let wanted = cfg.min_separation * cfg.noise_sigma;
    if min_dist.is_finite() && min_dist > 0.0 && min_dist < wanted {
        let scale = wanted / min_dist;
        cs.iter_mut().flatten().for_each(|v| *v *= scale);
    }
    cs
}

fn push_noisy(rng: &mut ChaCha8Rng, out: &mut Vec<f32>, centroid: &[f64], sigma: f64) {
    for &c in centroid {
        let z: f64 = rng.sample(StandardNormal);
        out.push((c + sigma * z) as f32);
    }
}

fn write_file(path: &Path, magic: &[u8; 4], d0: usize, d1: usize, payload: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + payload.len());
    buf.extend_from_slice(magic);
    for d in [d0, d1] {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.extend_from_slice(payload);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a whole file, checks its magic and returns `(d0, d1, payload)`.
/// The payload length is checked against `d0 * d1 * elem_bytes(d1)`.
fn read_file(
    path: &Path,
    magic: &[u8; 4],
    row_bytes: impl Fn(usize) -> usize,
) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&bytes, magic, row_bytes)
}

fn parse_header(
    bytes: &[u8],
    magic: &[u8; 4],
    row_bytes: impl Fn(usize) -> usize,
) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "file ends inside the magic"));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "file ends inside the header"));
    }
    let d0 = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d1 = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if d0 == 0 {
        return Err(Error::format(4, "row count is zero"));
    }
    if d1 == 0 {
        return Err(Error::format(8, "column count is zero"));
    }
    let expected = d0
        .checked_mul(row_bytes(d1))
        .ok_or_else(|| Error::format(4, "declared size overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: {} of {expected} bytes present", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            (HEADER_LEN + expected) as u64,
            format!("{} trailing bytes after payload", payload.len() - expected),
        ));
    }
    Ok((d0, d1, payload.to_vec()))
}

pub fn save_features(matrix: &FeatureMatrix, path: &Path) -> Result<()> {
    let payload: Vec<u8> = matrix.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(path, FEATURE_MAGIC, matrix.rows, matrix.cols, &payload)
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    let (rows, cols, payload) = read_file(path, FEATURE_MAGIC, |c| c * 4)?;
    let mut values = Vec::with_capacity(rows * cols);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                (HEADER_LEN + 4 * i) as u64,
                format!("non-finite value {v} in feature payload"),
            ));
        }
        values.push(v);
    }
    FeatureMatrix::new(rows, cols, values)
}

pub fn save_labels(labels: &LabelMatrix, path: &Path) -> Result<()> {
    write_file(path, LABEL_MAGIC, labels.rows, labels.num_classes, &labels.values)
}

pub fn load_labels(path: &Path) -> Result<LabelMatrix> {
    let (rows, num_classes, payload) = read_file(path, LABEL_MAGIC, |c| c)?;
    if let Some(pos) = payload.iter().position(|&v| v > 1) {
        return Err(Error::format(
            (HEADER_LEN + pos) as u64,
            format!("label byte {} is not 0 or 1", payload[pos]),
        ));
    }
    LabelMatrix::new(rows, num_classes, payload)
}

pub fn save_codes(codes: &PackedCodes, path: &Path) -> Result<()> {
    write_file(path, CODE_MAGIC, codes.rows(), codes.bits(), codes.data())
}

pub fn load_codes(path: &Path) -> Result<PackedCodes> {
    let (rows, bits, payload) = read_file(path, CODE_MAGIC, |b| b.div_ceil(8))?;
    PackedCodes::from_bytes(rows, bits, payload).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::format(HEADER_LEN as u64, msg),
        other => other,
    })
}
