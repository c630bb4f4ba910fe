//! Dataset loading: synthetic blobs, a small binary tensor format, and CSV.
//!
//! Tensor files: magic `BNT1`, `u32` rank, `rank` × `u32` extents (all
//! little-endian), then one `u8` per element mapped to `[-1, 1]` as
//! `x / 127.5 - 1`. Label files: magic `BNL1`, `u32` count, `count` × `u32`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::DatasetSpec;

pub const TENSOR_MAGIC: &[u8; 4] = b"BNT1";
pub const LABEL_MAGIC: &[u8; 4] = b"BNL1";

/// Distance scale of the blob centres relative to unit-variance noise.
const BLOB_SPREAD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ...]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rank() == 0 || inputs.batch() != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some((row, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Data(format!("row {row}: label {l} out of range for {num_classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Labels as an `[N]` tensor of class indices.
    pub fn label_tensor(&self) -> Tensor {
        Tensor::from_vec(self.labels.iter().map(|&l| l as f64).collect())
    }

    /// Reinterprets each sample with `shape`, which must hold the same number of elements.
    pub fn reshape_samples(self, shape: &[usize]) -> Result<Dataset> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        if shape.iter().product::<usize>() != self.inputs.row_len() {
            return Err(Error::Data(format!(
                "samples of shape {:?} cannot be viewed as {shape:?}",
                self.sample_shape()
            )));
        }
        Ok(Dataset {
            inputs: self.inputs.reshape(&full)?,
            ..self
        })
    }

    /// Deterministic split into (train, validation).
    pub fn split(&self, validation_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SPLIT_STREAM);
        idx.shuffle(&mut rng);
        let n_val = ((self.len() as f64) * validation_fraction).round() as usize;
        let n_val = n_val.min(self.len().saturating_sub(1));
        let (val, train) = idx.split_at(n_val);
        let (mut train, mut val) = (train.to_vec(), val.to_vec());
        train.sort_unstable();
        val.sort_unstable();
        (self.subset(&train), self.subset(&val))
    }
}

const SPLIT_STREAM: u64 = 3;

/// Per-feature standardization to zero mean and unit variance; constant
/// features are only centred.
pub fn standardize(x: &mut Tensor) {
    let n = x.batch();
    let d = x.row_len();
    if n == 0 {
        return;
    }
    let data = x.data_mut();
    for j in 0..d {
        let mean = (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (data[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            data[i * d + j] = (data[i * d + j] - mean) / sd;
        }
    }
}

/// Gaussian blobs around random centres, one per class, standardized.
pub fn synthetic_blobs(seed: u64, n: usize, classes: usize, dim: usize) -> Result<Dataset> {
    if classes == 0 || dim == 0 {
        return Err(Error::Data("synthetic_blobs needs at least one class and one dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<f64> = (0..classes * dim)
        .map(|_| BLOB_SPREAD * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let mut data = Vec::with_capacity(n * dim);
    for &l in &labels {
        for j in 0..dim {
            data.push(centres[l * dim + j] + rng.sample::<f64, _>(StandardNormal));
        }
    }
    let mut inputs = Tensor::new(vec![n, dim], data)?;
    standardize(&mut inputs);
    Dataset::new(inputs, labels, classes)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl ByteReader<'_> {
    fn err(&self, offset: usize, msg: impl std::fmt::Display) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            message: format!("byte offset {offset}: {msg}"),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            )),
        }
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            let got = got.to_vec();
            return Err(self.err(
                0,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&got), String::from_utf8_lossy(expected)),
            ));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(self.pos, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn parse_tensor_bytes(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = ByteReader { bytes, pos: 0, path };
    r.magic(TENSOR_MAGIC)?;
    let rank = r.u32("rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(r.err(4, format!("rank {rank} outside 1..=8")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(r.u32(&format!("extent {i}"))? as usize);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.err(8, "element count overflows"))?;
    let payload = r.take(len, "payload")?;
    let data = payload.iter().map(|&b| b as f64 / 127.5 - 1.0).collect();
    r.finish()?;
    Tensor::new(shape, data)
}

pub fn parse_label_bytes(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let mut r = ByteReader { bytes, pos: 0, path };
    r.magic(LABEL_MAGIC)?;
    let count = r.u32("count")? as usize;
    let mut labels = Vec::with_capacity(count.min(bytes.len() / 4));
    for i in 0..count {
        labels.push(r.u32(&format!("label {i}"))? as usize);
    }
    r.finish()?;
    Ok(labels)
}

/// Encodes `u8` data in the tensor file format.
pub fn encode_tensor_file(shape: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = TENSOR_MAGIC.to_vec();
    out.extend((shape.len() as u32).to_le_bytes());
    for d in shape {
        out.extend(d.to_le_bytes());
    }
    out.extend_from_slice(payload);
    out
}

pub fn encode_label_file(labels: &[u32]) -> Vec<u8> {
    let mut out = LABEL_MAGIC.to_vec();
    out.extend((labels.len() as u32).to_le_bytes());
    for l in labels {
        out.extend(l.to_le_bytes());
    }
    out
}

fn resolve_classes(labels: &[usize], given: Option<usize>) -> usize {
    given.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1))
}

pub fn load_tensor_file(path: &Path, labels_path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let inputs = parse_tensor_bytes(&bytes, path)?;
    let lbytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let labels = parse_label_bytes(&lbytes, labels_path)?;
    let classes = resolve_classes(&labels, num_classes);
    Dataset::new(inputs, labels, classes)
}

/// CSV with a header row; the `label` column holds class indices, every
/// other column is a feature. Features are standardized.
pub fn parse_csv_dataset(text: &str, path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let perr = |offset: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        message: format!("byte offset {offset}: {msg}"),
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| perr(0, e.to_string()))?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| perr(0, "missing `label` column".into()))?;
    let d = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| {
            let off = e.position().map_or(0, |p| p.byte());
            perr(off, e.to_string())
        })?;
        let off = rec.position().map_or(0, |p| p.byte());
        for (col, field) in rec.iter().enumerate() {
            if col == label_col {
                let l: usize = field
                    .parse()
                    .map_err(|_| perr(off, format!("row {row}: label `{field}` is not a class index")))?;
                labels.push(l);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| perr(off, format!("row {row}, column `{}`: `{field}` is not a number", &headers[col])))?;
                data.push(v);
            }
        }
    }
    let classes = resolve_classes(&labels, num_classes);
    let mut inputs = Tensor::new(vec![labels.len(), d], data)?;
    standardize(&mut inputs);
    Dataset::new(inputs, labels, classes)
}

pub fn load_csv_dataset(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv_dataset(&text, path, num_classes)
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::SyntheticBlobs { seed, n, classes, dim } => synthetic_blobs(*seed, *n, *classes, *dim),
        DatasetSpec::TensorFile { path, labels, num_classes } => load_tensor_file(path, labels, *num_classes),
        DatasetSpec::Csv { path, num_classes } => load_csv_dataset(path, *num_classes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_standardized() {
        let a = synthetic_blobs(7, 200, 2, 16).unwrap();
        let b = synthetic_blobs(7, 200, 2, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.inputs.shape(), &[200, 16]);
        for j in 0..16 {
            let col: Vec<f64> = (0..200).map(|i| a.inputs.row(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / 200.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 200.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
        assert!(a.labels.contains(&0) && a.labels.contains(&1));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let d = synthetic_blobs(1, 100, 3, 4).unwrap();
        let (t, v) = d.split(0.2, 9);
        assert_eq!((t.len(), v.len()), (80, 20));
        assert_eq!(d.split(0.2, 9), (t.clone(), v));
        assert_ne!(d.split(0.2, 10).0, t);
    }

    #[test]
    fn tensor_file_round_trip() {
        let bytes = encode_tensor_file(&[2, 3], &[0, 255, 51, 204, 127, 128]);
        let t = parse_tensor_bytes(&bytes, Path::new("x.bnt")).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[1], 1.0);
        assert!(t.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        let l = parse_label_bytes(&encode_label_file(&[1, 0]), Path::new("y")).unwrap();
        assert_eq!(l, vec![1, 0]);
    }

    #[test]
    fn tensor_file_errors_carry_offsets() {
        let mut bytes = encode_tensor_file(&[2, 3], &[0; 6]);
        bytes.truncate(14);
        let err = parse_tensor_bytes(&bytes, Path::new("x.bnt")).unwrap_err().to_string();
        assert!(err.contains("byte offset 12") && err.contains("x.bnt"), "{err}");
        let err = parse_tensor_bytes(b"XXXX\x01\0\0\0", Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("byte offset 0") && err.contains("magic"), "{err}");
    }

    #[test]
    fn csv_label_range_and_malformed_rows() {
        let ok = parse_csv_dataset("a,label,b\n1,0,2\n3,1,4\n5,1,7\n", Path::new("d.csv"), None).unwrap();
        assert_eq!(ok.labels, vec![0, 1, 1]);
        assert_eq!(ok.num_classes, 2);
        assert_eq!(ok.inputs.shape(), &[3, 2]);

        let err = parse_csv_dataset("a,label\n1,0\n2,5\n", Path::new("d.csv"), Some(2)).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("row 1")), "{err}");

        let err = parse_csv_dataset("a,label\n1,0\nx,1\n", Path::new("d.csv"), None).unwrap_err().to_string();
        assert!(err.contains("byte offset 12") && err.contains("row 1"), "{err}");

        let err = parse_csv_dataset("a,b\n1,0\n", Path::new("d.csv"), None).unwrap_err().to_string();
        assert!(err.contains("label"), "{err}");
    }
}
