//! IDX ingestion for MNIST.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => (TRAIN_IMAGES, TRAIN_LABELS),
            Split::Test => (TEST_IMAGES, TEST_LABELS),
        }
    }
}

/// Images as `n x 1 x rows x cols` in `[0, 1]` plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MnistSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

fn read_header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header,
            found: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header,
            found: bytes.len(),
        });
    }
    let shape: Vec<usize> = (0..dims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let expected = header + shape.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(shape)
}

impl MnistSet {
    pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Self> {
        let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
        let ib = fs::read(ip)?;
        let lb = fs::read(lp)?;
        let ishape = read_header(ip, &ib, IMAGE_MAGIC, 3)?;
        let lshape = read_header(lp, &lb, LABEL_MAGIC, 1)?;
        let (n, rows, cols) = (ishape[0], ishape[1], ishape[2]);
        if n != lshape[0] {
            return Err(Error::Count {
                images: n,
                labels: lshape[0],
            });
        }
        if n == 0 || rows == 0 || cols == 0 {
            return Err(Error::Validation(format!("{}: empty image set", ip.display())));
        }
        let pixels = ib[16..16 + n * rows * cols].iter().map(|&b| b as f32 / 255.0).collect();
        let labels: Vec<usize> = lb[8..8 + n].iter().map(|&b| b as usize).collect();
        if let Some(i) = labels.iter().position(|&l| l >= 10) {
            return Err(Error::Validation(format!(
                "{}: label {} at item {i} is not a digit",
                lp.display(),
                labels[i]
            )));
        }
        Ok(MnistSet {
            images: Tensor::new([n, 1, rows, cols], pixels)?,
            labels,
        })
    }

    /// Loads one split from a directory holding the canonical file names.
    pub fn load_dir(dir: impl AsRef<Path>, split: Split) -> Result<Self> {
        let (i, l) = split.file_names();
        Self::load_idx(dir.as_ref().join(i), dir.as_ref().join(l))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` items.
    pub fn take(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(contract(format!("cannot take {n} of {} items", self.len())));
        }
        Ok(MnistSet {
            images: self.images.slice_leading(0, n)?,
            labels: self.labels[..n].to_vec(),
        })
    }

    pub fn write_idx(&self, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
        let shape = self.images.shape();
        let mut ib = Vec::with_capacity(16 + self.images.numel());
        ib.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        for &d in [shape[0], shape[2], shape[3]].iter() {
            ib.extend_from_slice(&(d as u32).to_be_bytes());
        }
        ib.extend(
            self.images
                .data()
                .iter()
                .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        let mut lb = Vec::with_capacity(8 + self.len());
        lb.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        lb.extend_from_slice(&(self.len() as u32).to_be_bytes());
        lb.extend(self.labels.iter().map(|&l| l as u8));
        fs::write(images_path, ib)?;
        fs::write(labels_path, lb)?;
        Ok(())
    }
}

/// Checks that both splits exist and parse; returns `(train, test)` sizes.
pub fn check_dir(dir: impl AsRef<Path>) -> Result<(usize, usize)> {
    let train = MnistSet::load_dir(&dir, Split::Train)?;
    let test = MnistSet::load_dir(&dir, Split::Test)?;
    Ok((train.len(), test.len()))
}

/// `MNIST_DIR` if set, else `data/mnist` under `root`.
pub fn default_dir(root: impl AsRef<Path>) -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| root.as_ref().join("data").join("mnist"))
}
