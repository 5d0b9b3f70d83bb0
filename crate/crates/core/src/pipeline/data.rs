use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// `(C, H, W)` of a CIFAR-10 image.
pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
/// Bytes per record of the CIFAR-10 binary format: one label, then the
/// red, green and blue planes.
pub const RECORD_LEN: usize = 1 + 3 * 32 * 32;

/// Which files of a CIFAR-10 directory to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labelled images with pixels in `[0, 1]`, stored `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    images: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], images: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if images.len() != per * labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} pixels for {} images of {shape:?}", images.len(), labels.len()),
            ));
        }
        Ok(Dataset { shape, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    fn per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.per_image();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    /// Images at `indices` as an `[n, C, H, W]` tensor, with their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.shape;
        let t = Tensor::new(&[indices.len(), c, h, w], data).expect("batch size matches");
        (t, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }

    /// Contiguous batches of at most `size` images, in order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |s| {
            let idx: Vec<usize> = (s..(s + size).min(self.len())).collect();
            self.batch(&idx)
        })
    }

    /// First `n` images (all if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            shape: self.shape,
            images: self.images[..n * self.per_image()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Same images in a seeded random order.
    pub fn shuffled(&self, seed: u64) -> Dataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (images, labels) = self.batch(&order);
        Dataset { shape: self.shape, images: images.to_vec(), labels: labels.iter().map(|&l| l as u8).collect() }
    }

    /// Replaces the pixels, keeping labels and shape.
    pub fn with_images(&self, images: Vec<f32>) -> Result<Dataset> {
        Dataset::new(self.shape, images, self.labels.clone())
    }

    /// Parses concatenated CIFAR-10 binary records.
    pub fn from_cifar_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % RECORD_LEN != 0 {
            return Err(Error::Format(format!(
                "{} bytes is not a whole number of {RECORD_LEN}-byte records",
                bytes.len()
            )));
        }
        let n = bytes.len() / RECORD_LEN;
        let mut images = Vec::with_capacity(n * (RECORD_LEN - 1));
        let mut labels = Vec::with_capacity(n);
        for rec in bytes.chunks_exact(RECORD_LEN) {
            if rec[0] > 9 {
                return Err(Error::Format(format!("label byte {} out of range", rec[0])));
            }
            labels.push(rec[0]);
            images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
        Dataset::new(CIFAR_SHAPE, images, labels)
    }

    /// Serializes in the CIFAR-10 binary format, rounding pixels to bytes.
    pub fn to_cifar_bytes(&self) -> Result<Vec<u8>> {
        if self.shape != CIFAR_SHAPE {
            return Err(Error::Format(format!("CIFAR records are 3x32x32, dataset is {:?}", self.shape)));
        }
        let mut out = Vec::with_capacity(self.len() * RECORD_LEN);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend(self.image(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_cifar_bytes()?)?;
        Ok(())
    }

    /// Concatenates several CIFAR-10 binary files, in the given order.
    pub fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
        let shape = parts.first().map_or(CIFAR_SHAPE, |d| d.shape);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.shape != shape {
                return Err(Error::Format("datasets with different image shapes".into()));
            }
            images.extend(p.images);
            labels.extend(p.labels);
        }
        Dataset::new(shape, images, labels)
    }
}

/// Files making up `split` in a CIFAR-10 binary directory.
pub fn split_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .filter(|p| p.exists())
            .collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

/// Loads a CIFAR-10 binary file, or the files of `split` when `path` is a
/// directory (`data_batch_{1..5}.bin` / `test_batch.bin`).
pub fn load_dataset(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let files = if path.is_dir() { split_files(path, split) } else { vec![path.to_path_buf()] };
    if files.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no {split:?} files in {}", path.display()),
        )));
    }
    let parts = files
        .iter()
        .map(|f| {
            let bytes = std::fs::read(f).map_err(|e| {
                Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", f.display())))
            })?;
            Dataset::from_cifar_bytes(&bytes)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::concat(parts)
}
