//! Per-frame embedding vectors: the in-memory set, the binary file format
//! and the providers that produce them.
//!
//! File layout (all little-endian): magic `GZEB`, `u32` version, `u32` n,
//! `u32` dim, then `n * dim` `f32` values row by row. Version 2 appends a
//! `u32` rank and `rank` `u32` extents after the header; it carries tensors
//! whose element count is `n * dim`. Frame indices for version 1 files live
//! in a sidecar CSV with a single `frame` column.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use crate::error::{Error, Result};
use crate::fsio;

pub const MAGIC: [u8; 4] = *b"GZEB";
pub const VERSION_PLAIN: u32 = 1;
pub const VERSION_SHAPED: u32 = 2;

/// Side length of the default image embedding (16×16 grayscale).
pub const IMAGE_EMBEDDING_SIDE: u32 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f64>,
    frame_indices: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<Vec<f64>>, frame_indices: Vec<usize>) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if let Some(i) = vectors.iter().position(|v| v.len() != dim) {
            return Err(Error::Structural(format!(
                "vector {i} has dimension {}, expected {dim}",
                vectors[i].len()
            )));
        }
        Self::from_flat(dim, vectors.concat(), frame_indices)
    }

    pub fn from_flat(dim: usize, data: Vec<f64>, frame_indices: Vec<usize>) -> Result<Self> {
        if dim == 0 && !data.is_empty() {
            return Err(Error::Structural("dimension 0 with non-empty data".into()));
        }
        let n = data.len().checked_div(dim).unwrap_or(0);
        if n * dim != data.len() || n != frame_indices.len() {
            return Err(Error::Structural(format!(
                "{} values at dim {dim} do not match {} frame indices",
                data.len(),
                frame_indices.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Structural(
                "embedding contains non-finite values".into(),
            ));
        }
        if frame_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Structural(
                "frame indices must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            dim,
            data,
            frame_indices,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_indices.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frame_indices(&self) -> &[usize] {
        &self.frame_indices
    }

    /// Position of `frame` in this set, if it has an embedding.
    pub fn position_of(&self, frame: usize) -> Option<usize> {
        self.frame_indices.binary_search(&frame).ok()
    }

    pub fn for_frame(&self, frame: usize) -> Option<&[f64]> {
        self.position_of(frame).map(|i| self.vector(i))
    }

    /// Keeps only the listed frames (those that have embeddings).
    pub fn restricted_to(&self, frames: &[usize]) -> Self {
        let mut data = Vec::new();
        let mut idx = Vec::new();
        let mut wanted: Vec<usize> = frames.to_vec();
        wanted.sort_unstable();
        wanted.dedup();
        for f in wanted {
            if let Some(v) = self.for_frame(f) {
                data.extend_from_slice(v);
                idx.push(f);
            }
        }
        Self {
            dim: self.dim,
            data,
            frame_indices: idx,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_matrix(path, self.len(), self.dim, None, &self.data)?;
        write_frame_sidecar(&sidecar_path(path), &self.frame_indices)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let matrix = read_matrix(path)?;
        let frames = read_frame_sidecar(&sidecar_path(path))?;
        Self::from_flat(matrix.dim, matrix.data, frames)
    }
}

/// `emb.bin` → `emb.bin.frames.csv`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".frames.csv");
    PathBuf::from(s)
}

/// Contents of a binary matrix file.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub dim: usize,
    pub shape: Option<Vec<usize>>,
    pub data: Vec<f64>,
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} does not fit in 32 bits")))
}

pub fn write_matrix(
    path: &Path,
    n: usize,
    dim: usize,
    shape: Option<&[usize]>,
    data: &[f64],
) -> Result<()> {
    if n * dim != data.len() {
        return Err(Error::Structural(format!(
            "{} values do not fill a {n}x{dim} matrix",
            data.len()
        )));
    }
    if let Some(shape) = shape {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Structural(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("refusing to write non-finite values".into()));
    }
    let mut bytes = Vec::with_capacity(16 + data.len() * 4);
    bytes.extend_from_slice(&MAGIC);
    let version = if shape.is_some() {
        VERSION_SHAPED
    } else {
        VERSION_PLAIN
    };
    bytes.extend_from_slice(&version.to_le_bytes());
    bytes.extend_from_slice(&to_u32(n, "row count")?.to_le_bytes());
    bytes.extend_from_slice(&to_u32(dim, "dimension")?.to_le_bytes());
    if let Some(shape) = shape {
        bytes.extend_from_slice(&to_u32(shape.len(), "rank")?.to_le_bytes());
        for &s in shape {
            bytes.extend_from_slice(&to_u32(s, "extent")?.to_le_bytes());
        }
    }
    for &x in data {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fsio::write_atomic(path, |w| {
        w.write_all(&bytes)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    })
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |msg: &str| Error::parse(path, msg.to_string());
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| bad("truncated header"))
    };
    if bytes.get(0..4) != Some(&MAGIC[..]) {
        return Err(bad("bad magic"));
    }
    let version = word(4)?;
    let n = word(8)? as usize;
    let dim = word(12)? as usize;
    let mut pos = 16;
    let shape = match version {
        VERSION_PLAIN => None,
        VERSION_SHAPED => {
            let rank = word(pos)? as usize;
            pos += 4;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(word(pos)? as usize);
                pos += 4;
            }
            Some(shape)
        }
        v => return Err(bad(&format!("unsupported version {v}"))),
    };
    let count = n * dim;
    if bytes.len() != pos + count * 4 {
        return Err(bad(&format!(
            "expected {} data bytes, found {}",
            count * 4,
            bytes.len().saturating_sub(pos)
        )));
    }
    if let Some(shape) = &shape {
        if shape.iter().product::<usize>() != count {
            return Err(bad("shape does not match n * dim"));
        }
    }
    let data = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Matrix {
        n,
        dim,
        shape,
        data,
    })
}

pub fn write_frame_sidecar(path: &Path, frames: &[usize]) -> Result<()> {
    fsio::write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Structural(format!("writing frame sidecar: {e}"));
        csv.write_record(["frame"]).map_err(err)?;
        for f in frames {
            csv.write_record([f.to_string()]).map_err(err)?;
        }
        csv.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    })
}

pub fn read_frame_sidecar(path: &Path) -> Result<Vec<usize>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        let f = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::parse(path, format!("line {}: bad frame index", row + 2)))?;
        out.push(f);
    }
    Ok(out)
}

/// Source of per-frame embeddings for refinement.
pub trait EmbeddingProvider {
    /// Embeddings for whichever of `frames` the provider can supply.
    fn embeddings(&self, frames: &[usize]) -> Result<EmbeddingSet>;
}

/// Embeddings precomputed by an external model, read from a binary file.
#[derive(Debug, Clone)]
pub struct FileEmbeddings {
    set: EmbeddingSet,
}

impl FileEmbeddings {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self {
            set: EmbeddingSet::read(path)?,
        })
    }
}

impl EmbeddingProvider for FileEmbeddings {
    fn embeddings(&self, frames: &[usize]) -> Result<EmbeddingSet> {
        Ok(self.set.restricted_to(frames))
    }
}

/// Default provider: each frame image shrunk to 16×16 grayscale, flattened
/// and mean-centred. Frames are looked up as `<dir>/frame_<index:06>.<ext>`.
#[derive(Debug, Clone)]
pub struct ImageEmbeddings {
    pub dir: PathBuf,
    pub extension: String,
}

impl ImageEmbeddings {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            extension: "png".into(),
        }
    }

    pub fn frame_path(&self, frame: usize) -> PathBuf {
        self.dir
            .join(format!("frame_{frame:06}.{}", self.extension))
    }
}

/// 16×16 grayscale, mean-centred pixel vector of an image.
pub fn image_embedding(img: &image::DynamicImage) -> Vec<f64> {
    let small = img
        .resize_exact(
            IMAGE_EMBEDDING_SIDE,
            IMAGE_EMBEDDING_SIDE,
            FilterType::Triangle,
        )
        .to_luma8();
    let mut v: Vec<f64> = small.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    v
}

impl EmbeddingProvider for ImageEmbeddings {
    fn embeddings(&self, frames: &[usize]) -> Result<EmbeddingSet> {
        let mut wanted = frames.to_vec();
        wanted.sort_unstable();
        wanted.dedup();
        let mut vectors = Vec::new();
        let mut idx = Vec::new();
        for f in wanted {
            let path = self.frame_path(f);
            if !path.exists() {
                continue;
            }
            vectors.push(image_embedding(&image::open(&path)?));
            idx.push(f);
        }
        if vectors.is_empty() {
            return EmbeddingSet::from_flat(
                (IMAGE_EMBEDDING_SIDE * IMAGE_EMBEDDING_SIDE) as usize,
                Vec::new(),
                Vec::new(),
            );
        }
        EmbeddingSet::new(vectors, idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn invariants_are_checked() {
        assert!(EmbeddingSet::new(vec![vec![1.0], vec![1.0, 2.0]], vec![0, 1]).is_err());
        assert!(EmbeddingSet::new(vec![vec![1.0], vec![2.0]], vec![1, 1]).is_err());
        assert!(EmbeddingSet::new(vec![vec![f64::NAN]], vec![0]).is_err());
        assert!(EmbeddingSet::new(vec![vec![1.0]], vec![0, 1]).is_err());
    }

    #[test]
    fn header_layout_is_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        let set = EmbeddingSet::new(vec![vec![1.0, -2.0]], vec![7]).unwrap();
        set.write(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[0..4], b"GZEB");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 24);
        assert_eq!(
            std::fs::read_to_string(sidecar_path(&p)).unwrap(),
            "frame\n7\n"
        );
    }

    proptest! {
        #[test]
        fn file_round_trip(
            rows in proptest::collection::vec(proptest::collection::vec(-1e3f32..1e3, 3), 0..20)
        ) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("e.bin");
            let vectors: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
            let frames: Vec<usize> = (0..vectors.len()).map(|i| i * 3 + 1).collect();
            let set = EmbeddingSet::from_flat(3, vectors.concat(), frames).unwrap();
            set.write(&p).unwrap();
            prop_assert_eq!(EmbeddingSet::read(&p).unwrap(), set);
        }
    }

    #[test]
    fn shaped_matrix_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.bin");
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        write_matrix(&p, 2, 6, Some(&[2, 3, 1, 2]), &data).unwrap();
        let m = read_matrix(&p).unwrap();
        assert_eq!(m.shape, Some(vec![2, 3, 1, 2]));
        assert_eq!(m.data, data);
        assert!(write_matrix(&p, 2, 6, Some(&[5]), &data).is_err());
        std::fs::write(&p, b"XXXX").unwrap();
        assert!(read_matrix(&p).is_err());
    }

    #[test]
    fn restriction_keeps_available_frames() {
        let set = EmbeddingSet::new(vec![vec![0.0], vec![1.0], vec![2.0]], vec![2, 4, 6]).unwrap();
        let r = set.restricted_to(&[6, 3, 2]);
        assert_eq!(r.frame_indices(), &[2, 6]);
        assert_eq!(r.for_frame(6), Some(&[2.0][..]));
    }

    #[test]
    fn image_provider_mean_centres() {
        let dir = tempfile::tempdir().unwrap();
        let provider = ImageEmbeddings::new(dir.path());
        let img =
            image::GrayImage::from_fn(32, 32, |x, _| image::Luma([if x < 16 { 0 } else { 255 }]));
        img.save(provider.frame_path(3)).unwrap();
        let set = provider.embeddings(&[1, 3]).unwrap();
        assert_eq!(set.frame_indices(), &[3]);
        assert_eq!(set.dim(), 256);
        let v = set.vector(0);
        assert!(v.iter().sum::<f64>().abs() < 1e-9);
        assert!(v[0] < 0.0 && v[15] > 0.0);
    }
}
