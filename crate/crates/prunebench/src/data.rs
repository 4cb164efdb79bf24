//! Dataset ingestion (IDX files), splits, and synthetic generators.

use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled image set with pixel values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (h, w, c) of a single sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> Tensor {
        let (h, w, c) = self.sample_shape();
        let n = h * w * c;
        Tensor::new(vec![1, h, w, c], self.images.data()[i * n..(i + 1) * n].to_vec())
            .expect("sample slice has static shape")
    }

    /// Batched tensor of the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> Dataset {
        let (h, w, c) = self.sample_shape();
        let n = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        Dataset {
            images: Tensor::new(vec![indices.len(), h, w, c], data).expect("static shape"),
            labels,
            class_count: self.class_count,
        }
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.gather(&idx)
    }
}

/// Parse IDX image + label files (pre-decompressed, big-endian headers).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;

    let mut r = std::io::Cursor::new(&img_bytes[..]);
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Format("image file truncated in header".into()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {:#010x}, expected {:#010x}",
            magic, IDX_IMAGES_MAGIC
        )));
    }
    let n = read_dim(&mut r)?;
    let h = read_dim(&mut r)?;
    let w = read_dim(&mut r)?;
    let pixels = &img_bytes[16..];
    if pixels.len() != n * h * w {
        return Err(Error::Format(format!(
            "image payload has {} bytes, header implies {}",
            pixels.len(),
            n * h * w
        )));
    }

    let mut r = std::io::Cursor::new(&lbl_bytes[..]);
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Format("label file truncated in header".into()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {:#010x}, expected {:#010x}",
            magic, IDX_LABELS_MAGIC
        )));
    }
    let nl = read_dim(&mut r)?;
    if nl != n {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            n, nl
        )));
    }
    let raw_labels = &lbl_bytes[8..];
    if raw_labels.len() != n {
        return Err(Error::Format(format!(
            "label payload has {} bytes, header implies {}",
            raw_labels.len(),
            n
        )));
    }

    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    Ok(Dataset {
        images: Tensor::new(vec![n, h, w, 1], data)?,
        labels,
        class_count,
    })
}

fn read_dim(r: &mut std::io::Cursor<&[u8]>) -> Result<usize> {
    r.read_u32::<BigEndian>()
        .map(|v| v as usize)
        .map_err(|_| Error::Format("IDX file truncated in dimensions".into()))
}

/// Write a dataset back out as a pair of IDX files (bytes quantized to 0..255).
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (h, w, c) = ds.sample_shape();
    if c != 1 {
        return Err(Error::Contract("IDX export supports single-channel images".into()));
    }
    let mut img = Vec::with_capacity(16 + ds.len() * h * w);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in ds.images.data() {
        img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lbl.extend(ds.labels.iter().map(|&l| l as u8));
    std::fs::write(images_path, img)?;
    std::fs::write(labels_path, lbl)?;
    Ok(())
}

/// Deterministic, disjoint, exhaustive train/validation split.
pub fn split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Contract(format!(
            "val_fraction must be in (0,1), got {}",
            val_fraction
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let val_n = ((ds.len() as f64) * val_fraction).round() as usize;
    let val_n = val_n.clamp(1, ds.len() - 1);
    let (val_idx, train_idx) = idx.split_at(val_n);
    Ok((ds.gather(train_idx), ds.gather(val_idx)))
}

/// Gaussian class clusters clipped to [0,1]^dim, shaped [n, dim, 1, 1].
pub fn synthetic_blobs(classes: usize, n: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Contract("need at least 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // well-separated centers on a coarse lattice inside the box
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            (0..dim)
                .map(|d| {
                    let t = ((c * 31 + d * 17 + 7) % 97) as f64 / 96.0;
                    0.15 + 0.7 * t
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for d in 0..dim {
            let v: f64 = centers[c][d] + noise.sample(&mut rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, dim, 1, 1], data)?,
        labels,
        class_count: classes,
    })
}

/// Procedurally rendered 28x28 seven-segment digit glyphs with jitter and
/// noise. Serves as a deterministic stand-in for handwritten digits when no
/// IDX files are available.
pub fn synthetic_glyphs(n: usize, seed: u64) -> Dataset {
    // segment layout: 0 top, 1 top-left, 2 top-right, 3 middle,
    // 4 bottom-left, 5 bottom-right, 6 bottom
    const SEGMENTS: [[bool; 7]; 10] = [
        [true, true, true, false, true, true, true],    // 0
        [false, false, true, false, false, true, false], // 1
        [true, false, true, true, true, false, true],   // 2
        [true, false, true, true, false, true, true],   // 3
        [false, true, true, true, false, true, false],  // 4
        [true, true, false, true, false, true, true],   // 5
        [true, true, false, true, true, true, true],    // 6
        [true, false, true, false, false, true, false], // 7
        [true, true, true, true, true, true, true],     // 8
        [true, true, true, true, false, true, true],    // 9
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 28 * 28);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        labels.push(digit);
        let dx = rng.gen_range(-3i32..=3);
        let dy = rng.gen_range(-3i32..=3);
        let intensity: f64 = rng.gen_range(0.7..1.0);
        let mut img = vec![0.0f64; 28 * 28];
        // glyph body occupies rows 5..23, cols 9..19 before jitter
        let (top, mid, bot) = (5i32, 14i32, 23i32);
        let (left, right) = (9i32, 19i32);
        let mut stroke = |y0: i32, x0: i32, y1: i32, x1: i32| {
            for y in y0.min(y1)..=y0.max(y1) {
                for x in x0.min(x1)..=x0.max(x1) {
                    let (py, px) = (y + dy, x + dx);
                    if (0..28).contains(&py) && (0..28).contains(&px) {
                        img[(py * 28 + px) as usize] = intensity;
                    }
                }
            }
        };
        let seg = SEGMENTS[digit];
        if seg[0] {
            stroke(top, left, top + 1, right);
        }
        if seg[1] {
            stroke(top, left, mid, left + 1);
        }
        if seg[2] {
            stroke(top, right - 1, mid, right);
        }
        if seg[3] {
            stroke(mid, left, mid + 1, right);
        }
        if seg[4] {
            stroke(mid, left, bot, left + 1);
        }
        if seg[5] {
            stroke(mid, right - 1, bot, right);
        }
        if seg[6] {
            stroke(bot - 1, left, bot, right);
        }
        for v in img.iter_mut() {
            let noisy: f64 = *v + rng.gen_range(-0.05..0.05);
            *v = noisy.clamp(0.0, 1.0);
        }
        data.extend_from_slice(&img);
    }
    Dataset {
        images: Tensor::new(vec![n, 28, 28, 1], data).expect("static shape"),
        labels,
        class_count: 10,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip_and_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        // hand-built 2-image 28x28 file: first pixel 255, second 0
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        let mut pixels = vec![0u8; 2 * 28 * 28];
        pixels[0] = 255;
        img.extend_from_slice(&pixels);
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[3u8, 7u8]);
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lbl).unwrap();

        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images.shape(), &[2, 28, 28, 1]);
        assert_eq!(ds.images.data()[0], 1.0);
        assert_eq!(ds.images.data()[1], 0.0);
        assert_eq!(ds.labels, vec![3, 7]);
    }

    #[test]
    fn idx_bad_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        let ds = synthetic_glyphs(4, 0);
        write_idx(&ds, &ip, &lp).unwrap();

        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        let bad = dir.path().join("bad");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_idx(&bad, &lp), Err(Error::Format(_))));

        // label count mismatch
        let mut lbl = std::fs::read(&lp).unwrap();
        lbl[7] = 3; // claims 3 labels for 4 images
        lbl.truncate(8 + 3);
        let badl = dir.path().join("badl");
        std::fs::write(&badl, &lbl).unwrap();
        assert!(matches!(load_idx(&ip, &badl), Err(Error::Format(_))));
    }

    #[test]
    fn idx_loading_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        write_idx(&synthetic_glyphs(10, 1), &ip, &lp).unwrap();
        assert_eq!(load_idx(&ip, &lp).unwrap(), load_idx(&ip, &lp).unwrap());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = synthetic_glyphs(100, 0);
        let (train, val) = split(&ds, 0.1, 5).unwrap();
        assert_eq!(train.len(), 90);
        assert_eq!(val.len(), 10);
        let (train2, val2) = split(&ds, 0.1, 5).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);
    }

    #[test]
    fn split_is_exhaustive_and_disjoint() {
        let ds = synthetic_glyphs(50, 3);
        let (train, val) = split(&ds, 0.2, 9).unwrap();
        // images are unique per index thanks to noise, so compare pixel sums
        let key = |t: &Dataset, i: usize| {
            let img = t.image(i);
            img.data().iter().sum::<f64>().to_bits()
        };
        let mut seen: Vec<u64> = (0..train.len())
            .map(|i| key(&train, i))
            .chain((0..val.len()).map(|i| key(&val, i)))
            .collect();
        let mut orig: Vec<u64> = (0..ds.len()).map(|i| key(&ds, i)).collect();
        seen.sort_unstable();
        orig.sort_unstable();
        assert_eq!(seen, orig);
    }

    #[test]
    fn split_degenerate_fraction_errors() {
        let ds = synthetic_glyphs(10, 0);
        assert!(matches!(split(&ds, 0.0, 0), Err(Error::Contract(_))));
        assert!(matches!(split(&ds, 1.0, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn blobs_in_box_and_deterministic() {
        let ds = synthetic_blobs(2, 10, 4, 7).unwrap();
        assert_eq!(ds.len(), 10);
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds, synthetic_blobs(2, 10, 4, 7).unwrap());
    }

    // linear probe (perceptron) reaches 100% train accuracy on blobs
    #[test]
    fn blobs_linearly_separable() {
        let ds = synthetic_blobs(2, 40, 3, 11).unwrap();
        let dim = 3;
        let mut w = vec![0.0f64; dim + 1];
        for _ in 0..200 {
            for i in 0..ds.len() {
                let x = &ds.images.data()[i * dim..(i + 1) * dim];
                let y = if ds.labels[i] == 1 { 1.0 } else { -1.0 };
                let score: f64 = w[dim] + x.iter().zip(&w[..dim]).map(|(a, b)| a * b).sum::<f64>();
                if y * score <= 0.0 {
                    for d in 0..dim {
                        w[d] += y * x[d];
                    }
                    w[dim] += y;
                }
            }
        }
        let correct = (0..ds.len())
            .filter(|&i| {
                let x = &ds.images.data()[i * dim..(i + 1) * dim];
                let score: f64 =
                    w[dim] + x.iter().zip(&w[..dim]).map(|(a, b)| a * b).sum::<f64>();
                (score > 0.0) == (ds.labels[i] == 1)
            })
            .count();
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn glyphs_are_valid_images() {
        let ds = synthetic_glyphs(30, 2);
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(ds.labels.iter().all(|&l| l < 10));
        assert_eq!(ds, synthetic_glyphs(30, 2));
    }
}
