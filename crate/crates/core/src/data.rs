//! IDX ingestion, normalisation and seeded batching.
//!
//! IDX layout: two zero bytes, a dtype code, the number of dimensions, then one
//! big-endian `u32` per dimension and the payload. Only unsigned-byte payloads
//! (dtype `0x08`) are accepted, which covers MNIST and Fashion-MNIST.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

pub const DTYPE_U8: u8 = 0x08;

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "FORGETNET_DATA";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != DTYPE_U8 || bytes[3] == 0 {
        return Err(Error::BadMagic(bytes.iter().take(4).copied().collect()));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    Ok(IdxTensor {
        dims,
        data: payload.to_vec(),
    })
}

pub fn serialize_idx(t: &IdxTensor) -> Vec<u8> {
    let mut out = vec![0, 0, DTYPE_U8, t.dims.len() as u8];
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&t.data);
    out
}

/// Anything that can hand out labelled rows by index.
pub trait Samples {
    fn len(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn gather(&self, idx: &[usize]) -> (Matrix, Vec<usize>);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Matrix,
    labels: Vec<usize>,
    name: String,
    /// (file name, sha256 hex) of the source files.
    digests: Vec<(String, String)>,
}

impl Dataset {
    pub fn new(images: Matrix, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            name: name.into(),
            digests: Vec::new(),
        })
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn digests(&self) -> &[(String, String)] {
        &self.digests
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Dataset {
            images: self.images.select_rows(&idx),
            labels: self.labels[..n].to_vec(),
            name: self.name.clone(),
            digests: self.digests.clone(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            name: self.name.clone(),
            digests: self.digests.clone(),
        }
    }

    /// Relative frequency of each class among `classes` labels.
    pub fn label_frequencies(&self, classes: usize) -> Vec<f64> {
        let mut counts = vec![0usize; classes];
        for &l in &self.labels {
            if l < classes {
                counts[l] += 1;
            }
        }
        let n = self.labels.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }
}

impl Samples for Dataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn input_dim(&self) -> usize {
        self.images.cols()
    }

    fn gather(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.images.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Scale raw image bytes to [0, 1] and flatten each image to one row.
pub fn normalize(images: &IdxTensor, labels: &IdxTensor, name: &str) -> Result<Dataset> {
    let n = *images.dims.first().ok_or(Error::EmptyDataset)?;
    let width: usize = images.dims[1..].iter().product();
    if labels.dims != [n] {
        return Err(Error::InvalidArgument(format!(
            "label dims {:?} do not match {n} images",
            labels.dims
        )));
    }
    let data: Vec<f64> = images.data.iter().map(|&b| b as f64 / 255.0).collect();
    let images = Matrix::new(n, width, data)?;
    let labels = labels.data.iter().map(|&b| b as usize).collect();
    Dataset::new(images, labels, name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Data directory: explicit flag, then `$FORGETNET_DATA`, then `./data`.
pub fn resolve_data_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse a digest list: one `name,sha256` pair per line.
pub fn parse_digest_list(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, hex) = line.split_once(',').ok_or_else(|| {
            Error::InvalidConfig(format!("digest list line {}: expected name,sha256", lineno + 1))
        })?;
        out.push((name.trim().to_string(), hex.trim().to_lowercase()));
    }
    Ok(out)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Load one split of an MNIST-style dataset stored as
/// `<dir>/{train,t10k}-{images-idx3,labels-idx1}-ubyte`.
///
/// When `expected` digests are supplied, every file named there must match.
pub fn load_split(
    dir: &Path,
    split: Split,
    name: &str,
    expected: Option<&[(String, String)]>,
) -> Result<Dataset> {
    let img_name = format!("{}-images-idx3-ubyte", split.prefix());
    let lbl_name = format!("{}-labels-idx1-ubyte", split.prefix());
    let img_bytes = read_file(&dir.join(&img_name))?;
    let lbl_bytes = read_file(&dir.join(&lbl_name))?;
    let mut digests = Vec::new();
    for (file, bytes) in [(&img_name, &img_bytes), (&lbl_name, &lbl_bytes)] {
        let actual = sha256_hex(bytes);
        if let Some(list) = expected {
            if let Some((_, want)) = list.iter().find(|(n, _)| n == file) {
                if *want != actual {
                    return Err(Error::DigestMismatch {
                        file: file.clone(),
                        expected: want.clone(),
                        actual,
                    });
                }
            }
        }
        digests.push((file.clone(), actual));
    }
    let images = parse_idx(&img_bytes)?;
    let labels = parse_idx(&lbl_bytes)?;
    let mut ds = normalize(&images, &labels, name)?;
    ds.digests = digests;
    Ok(ds)
}

/// Shuffled mini-batches for one epoch. The order depends only on
/// `(seed, epoch)`; the final short batch is kept.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::new(seed ^ epoch).shuffle(&mut idx);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
