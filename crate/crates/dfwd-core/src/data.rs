//! Dataset loading and normalization.
//!
//! Supported on-disk formats: IDX (raw or gzip) for the MNIST family and
//! the CIFAR-10 binary batches. A deterministic synthetic set covers smoke
//! tests and machines without data. Pixels load as [0, 1]; per-channel
//! standardization is fit on the training split only.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{stream, substream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

/// One split, ready for a trainer: images are [N, C, H, W].
pub struct PreparedData<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> PreparedData<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` examples (cheap way to build fast surrogate runs).
    pub fn take(&self, n: usize) -> PreparedData<T> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        PreparedData {
            images: self.images.gather_rows(&idx),
            labels: self.labels[..n].to_vec(),
        }
    }
}

pub struct Dataset<T: Scalar> {
    pub name: String,
    pub train: PreparedData<T>,
    pub test: PreparedData<T>,
    pub num_classes: usize,
    pub image_shape: [usize; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
    Synthetic,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion-mnist" | "fashion_mnist" => Ok(DatasetKind::FashionMnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::config(format!(
                "unknown dataset '{other}' (expected mnist | fashion-mnist | cifar10 | synthetic)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Synthetic => "synthetic",
        }
    }

    fn dir_name(&self) -> &'static str {
        // synthetic never touches disk
        self.name()
    }
}

/// Load a dataset from `root/<kind>/`, raw pixels in [0, 1].
pub fn load<T: Scalar>(kind: DatasetKind, root: &Path) -> Result<Dataset<T>> {
    match kind {
        DatasetKind::Synthetic => Ok(synthetic(2048, 512, 4, 0)),
        DatasetKind::Mnist | DatasetKind::FashionMnist => {
            let dir = root.join(kind.dir_name());
            let train = PreparedData {
                images: load_idx_images(&find(&dir, "train-images-idx3-ubyte")?)?,
                labels: load_idx_labels(&find(&dir, "train-labels-idx1-ubyte")?)?,
            };
            let test = PreparedData {
                images: load_idx_images(&find(&dir, "t10k-images-idx3-ubyte")?)?,
                labels: load_idx_labels(&find(&dir, "t10k-labels-idx1-ubyte")?)?,
            };
            check_split(&train)?;
            check_split(&test)?;
            Ok(Dataset {
                name: kind.name().into(),
                num_classes: 10,
                image_shape: [1, 28, 28],
                train,
                test,
            })
        }
        DatasetKind::Cifar10 => {
            let dir = root.join(kind.dir_name());
            let mut train_bytes = Vec::new();
            for b in 1..=5 {
                train_bytes.push(read_maybe_gz(&find(
                    &dir,
                    &format!("data_batch_{b}.bin"),
                )?)?);
            }
            let train = parse_cifar_batches(&train_bytes)?;
            let test = parse_cifar_batches(&[read_maybe_gz(&find(&dir, "test_batch.bin")?)?])?;
            check_split(&train)?;
            check_split(&test)?;
            Ok(Dataset {
                name: kind.name().into(),
                num_classes: 10,
                image_shape: [3, 32, 32],
                train,
                test,
            })
        }
    }
}

fn check_split<T: Scalar>(d: &PreparedData<T>) -> Result<()> {
    if d.images.dim0() != d.labels.len() {
        return Err(Error::Parse {
            path: String::new(),
            offset: 0,
            what: format!(
                "image count {} does not match label count {}",
                d.images.dim0(),
                d.labels.len()
            ),
        });
    }
    Ok(())
}

/// Resolve `name` inside `dir`, falling back to `name.gz`.
fn find(dir: &Path, name: &str) -> Result<PathBuf> {
    let raw = dir.join(name);
    if raw.exists() {
        return Ok(raw);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::Parse {
        path: dir.join(name).display().to_string(),
        offset: 0,
        what: "file not found (also tried .gz)".into(),
    })
}

/// Read a file, transparently gunzipping when it starts with the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Parse {
                path: path.display().to_string(),
                offset: 0,
                what: format!("gzip decode failed: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            offset: offset as u64,
            what: "truncated header".into(),
        })
}

/// IDX3 images (magic 0x00000803) as [N, 1, H, W] scaled to [0, 1].
pub fn load_idx_images<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != 0x0000_0803 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            offset: 0,
            what: format!("bad image magic {magic:#010x} (want 0x00000803)"),
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let h = be_u32(&bytes, 8, path)? as usize;
    let w = be_u32(&bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * h * w {
        return Err(Error::Parse {
            path: path.display().to_string(),
            offset: 16,
            what: format!("expected {} pixels, found {}", n * h * w, body.len()),
        });
    }
    let data: Vec<T> = body.iter().map(|&b| T::from_f64(b as f64 / 255.0)).collect();
    Tensor::from_vec(&[n, 1, h, w], data)
}

/// IDX1 labels (magic 0x00000801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != 0x0000_0801 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            offset: 0,
            what: format!("bad label magic {magic:#010x} (want 0x00000801)"),
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Parse {
            path: path.display().to_string(),
            offset: 8,
            what: format!("expected {n} labels, found {}", body.len()),
        });
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// CIFAR-10 binary batches: 3073-byte records, label byte then a
/// channel-major 3×32×32 image — already the [C, H, W] layout we use.
fn parse_cifar_batches<T: Scalar>(batches: &[Vec<u8>]) -> Result<PreparedData<T>> {
    let mut n = 0usize;
    for (i, b) in batches.iter().enumerate() {
        if b.len() % CIFAR_RECORD != 0 {
            return Err(Error::Parse {
                path: format!("batch {i}"),
                offset: (b.len() - b.len() % CIFAR_RECORD) as u64,
                what: format!("length {} is not a multiple of {CIFAR_RECORD}", b.len()),
            });
        }
        n += b.len() / CIFAR_RECORD;
    }
    let mut images = Tensor::zeros(&[n, 3, 32, 32]);
    let mut labels = Vec::with_capacity(n);
    let mut r = 0usize;
    for (i, b) in batches.iter().enumerate() {
        for rec in b.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::Parse {
                    path: format!("batch {i}"),
                    offset: (r * CIFAR_RECORD) as u64,
                    what: format!("label {label} out of range"),
                });
            }
            labels.push(label);
            let dst = images.row_mut(r);
            for (d, &s) in dst.iter_mut().zip(&rec[1..]) {
                *d = T::from_f64(s as f64 / 255.0);
            }
            r += 1;
        }
    }
    Ok(PreparedData { images, labels })
}

/// Deterministic synthetic classification set: each class is a distinct
/// 2×2 bright patch on an 8×8 single-channel image plus uniform noise.
pub fn synthetic<T: Scalar>(
    n_train: usize,
    n_test: usize,
    num_classes: usize,
    seed: u64,
) -> Dataset<T> {
    assert!(num_classes <= 9, "synthetic supports at most 9 patch positions");
    let gen = |n: usize, salt: u64| {
        let mut rng = substream(seed ^ salt, stream::INIT);
        let mut images = Tensor::zeros(&[n, 1, 8, 8]);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let k = rng.random_range(0..num_classes);
            let (py, px) = (2 * (k / 3), 2 * (k % 3));
            let row = images.row_mut(i);
            for v in row.iter_mut() {
                *v = T::from_f64(rng.random_range(0.0..0.2));
            }
            for y in 0..2 {
                for x in 0..2 {
                    row[(py + y + 1) * 8 + px + x + 1] =
                        T::from_f64(0.8 + rng.random_range(0.0..0.2));
                }
            }
            labels.push(k);
        }
        PreparedData { images, labels }
    };
    Dataset {
        name: "synthetic".into(),
        train: gen(n_train, 0x5eed_0001),
        test: gen(n_test, 0x5eed_0002),
        num_classes,
        image_shape: [1, 8, 8],
    }
}

/// Per-channel standardization, fit on the training split.
#[derive(Clone, Debug)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit<T: Scalar>(images: &Tensor<T>) -> Result<Self> {
        let &[n, c, h, w] = images.shape() else {
            return Err(Error::dim("normalizer fit", images.shape(), &[0, 0, 0, 0]));
        };
        if n == 0 {
            return Err(Error::InsufficientData("cannot normalize an empty split".into()));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..n {
            let row = images.row(i);
            for ch in 0..c {
                for &v in &row[ch * plane..(ch + 1) * plane] {
                    let x = v.to_f64();
                    mean[ch] += x;
                    sq[ch] += x * x;
                }
            }
        }
        let mut std = vec![0.0f64; c];
        for ch in 0..c {
            mean[ch] /= count;
            let var = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0);
            std[ch] = var.sqrt().max(1e-8);
        }
        Ok(Normalizer { mean, std })
    }

    pub fn apply<T: Scalar>(&self, images: &mut Tensor<T>) -> Result<()> {
        let &[n, c, h, w] = images.shape() else {
            return Err(Error::dim("normalizer apply", images.shape(), &[0, 0, 0, 0]));
        };
        if c != self.mean.len() {
            return Err(Error::dim("normalizer apply", &[c], &[self.mean.len()]));
        }
        let plane = h * w;
        for i in 0..n {
            let row = images.row_mut(i);
            for ch in 0..c {
                let (m, s) = (self.mean[ch], self.std[ch]);
                for v in &mut row[ch * plane..(ch + 1) * plane] {
                    *v = T::from_f64((v.to_f64() - m) / s);
                }
            }
        }
        Ok(())
    }
}

/// Fit on train, apply to both splits.
pub fn standardize<T: Scalar>(ds: &mut Dataset<T>) -> Result<Normalizer> {
    let norm = Normalizer::fit(&ds.train.images)?;
    norm.apply(&mut ds.train.images)?;
    norm.apply(&mut ds.test.images)?;
    Ok(norm)
}
