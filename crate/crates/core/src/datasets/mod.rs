//! Dataset ingestion and preparation: IDX and CIFAR binary parsers, the raw
//! stack format, grayscale conversion, resizing, regularization-image
//! selection, and a self-contained synthetic shape dataset for tests and
//! smoke runs.

mod cifar;
mod idx;
mod stack;

pub use cifar::{cifar10_records, load_cifar_binary, write_cifar10, CifarVariant};
pub use idx::{load_idx, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use stack::{load_stack_file, read_stack, save_stack_file, write_stack};

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Images with labels and a record of how they were produced.
#[derive(Clone, Debug)]
pub struct LabeledImageSet {
    images: Tensor,
    labels: Vec<u8>,
    num_classes: usize,
    source_id: String,
    transform_chain: Vec<String>,
}

impl LabeledImageSet {
    pub fn new(
        images: Tensor,
        labels: Vec<u8>,
        num_classes: usize,
        source_id: String,
        transform_chain: Vec<String>,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape("LabeledImageSet", format!("images must be (N,C,H,W), got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "LabeledImageSet",
                format!("{} images but {} labels", images.shape()[0], labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= num_classes) {
            return Err(Error::invalid("LabeledImageSet", format!("label {bad} out of range for {num_classes} classes")));
        }
        images.check_range(0.0, 1.0, "LabeledImageSet pixels")?;
        Ok(LabeledImageSet { images, labels, num_classes, source_id, transform_chain })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn transform_chain(&self) -> &[String] {
        &self.transform_chain
    }

    /// (C,H,W) shape of a single image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Pixels of image `i`.
    pub fn image(&self, i: usize) -> &[f32] {
        let d: usize = self.image_shape().iter().product();
        &self.images.data()[i * d..(i + 1) * d]
    }

    /// New set containing the given images, in order.
    pub fn gather(&self, indices: &[usize]) -> Result<LabeledImageSet> {
        let [c, h, w] = self.image_shape();
        let d = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid("gather", format!("index {i} out of range for {} images", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let mut chain = self.transform_chain.clone();
        chain.push(format!("gather-{}", indices.len()));
        LabeledImageSet::new(
            Tensor::new(vec![indices.len(), c, h, w], data)?,
            labels,
            self.num_classes,
            self.source_id.clone(),
            chain,
        )
    }

    /// Batch tensor plus usize labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let d = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.label(i));
        }
        (Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape"), labels)
    }
}

/// BT.601 luma conversion of an RGB set: Y = 0.299 R + 0.587 G + 0.114 B.
pub fn to_grayscale(set: &LabeledImageSet) -> Result<LabeledImageSet> {
    let [c, h, w] = set.image_shape();
    if c != 3 {
        return Err(Error::invalid("to_grayscale", format!("expected 3 channels, got {c}")));
    }
    let n = set.len();
    let plane = h * w;
    let mut data = vec![0.0f32; n * plane];
    for i in 0..n {
        let img = set.image(i);
        for p in 0..plane {
            data[i * plane + p] =
                0.299 * img[p] + 0.587 * img[plane + p] + 0.114 * img[2 * plane + p];
        }
    }
    let mut chain = set.transform_chain().to_vec();
    chain.push("grayscale-bt601(0.299,0.587,0.114)".to_string());
    LabeledImageSet::new(
        Tensor::new(vec![n, 1, h, w], data)?,
        set.labels().to_vec(),
        set.num_classes(),
        set.source_id().to_string(),
        chain,
    )
}

/// Uniform sample of `n` images without replacement, seeded.
pub fn select_regularization_images(set: &LabeledImageSet, n: usize, seed: u64) -> Result<LabeledImageSet> {
    if n > set.len() {
        return Err(Error::invalid(
            "select_regularization_images",
            format!("requested {n} of {} images", set.len()),
        ));
    }
    let mut rng = rng::stream(seed, "reg-select", 0);
    let perm = rng::permutation(set.len(), &mut rng);
    set.gather(&perm[..n])
}

/// Center-crop to square, then bilinear-resize each image to (out_h, out_w).
pub fn resize_to(set: &LabeledImageSet, out_h: usize, out_w: usize) -> Result<LabeledImageSet> {
    let [c, h, w] = set.image_shape();
    if h == out_h && w == out_w {
        return Ok(set.clone());
    }
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let n = set.len();
    let mut data = vec![0.0f32; n * c * out_h * out_w];
    for i in 0..n {
        let img = set.image(i);
        for ch in 0..c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    // map output pixel center into crop coordinates
                    let fy = (oy as f32 + 0.5) * side as f32 / out_h as f32 - 0.5;
                    let fx = (ox as f32 + 0.5) * side as f32 / out_w as f32 - 0.5;
                    let fy = fy.clamp(0.0, (side - 1) as f32);
                    let fx = fx.clamp(0.0, (side - 1) as f32);
                    let (y1, x1) = (fy.floor() as usize, fx.floor() as usize);
                    let (y2, x2) = ((y1 + 1).min(side - 1), (x1 + 1).min(side - 1));
                    let (dy, dx) = (fy - y1 as f32, fx - x1 as f32);
                    let at = |yy: usize, xx: usize| img[ch * h * w + (y0 + yy) * w + x0 + xx];
                    let v = at(y1, x1) * (1.0 - dy) * (1.0 - dx)
                        + at(y1, x2) * (1.0 - dy) * dx
                        + at(y2, x1) * dy * (1.0 - dx)
                        + at(y2, x2) * dy * dx;
                    data[((i * c + ch) * out_h + oy) * out_w + ox] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    let mut chain = set.transform_chain().to_vec();
    chain.push(format!("center-crop-{side}+bilinear-{out_h}x{out_w}"));
    LabeledImageSet::new(
        Tensor::new(vec![n, c, out_h, out_w], data)?,
        set.labels().to_vec(),
        set.num_classes(),
        set.source_id().to_string(),
        chain,
    )
}

/// Procedural 10-class grayscale shape dataset (bars, diagonals, disks,
/// rings, corners, crosses, checkers) with positional jitter and pixel
/// noise. Entirely deterministic from the seed.
pub fn synthetic_shapes(n: usize, side: usize, seed: u64) -> Result<LabeledImageSet> {
    if side < 8 {
        return Err(Error::invalid("synthetic_shapes", "side must be >= 8"));
    }
    let mut rng = rng::stream(seed, "synthetic", 0);
    let mut data = vec![0.0f32; n * side * side];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 10) as u8;
        labels.push(class);
        let img = &mut data[i * side * side..(i + 1) * side * side];
        let jitter = |rng: &mut rand_chacha::ChaCha8Rng| rng.random_range(-2i32..=2);
        let fg: f32 = rng.random_range(0.55..0.95);
        let (cy, cx) = (side as i32 / 2 + jitter(&mut rng), side as i32 / 2 + jitter(&mut rng));
        let thick = rng.random_range(1i32..=2);
        let r_out = side as i32 / 3;
        let r_in = r_out - 2;
        for y in 0..side as i32 {
            for x in 0..side as i32 {
                let on = match class {
                    0 => (y - cy).abs() <= thick,
                    1 => (x - cx).abs() <= thick,
                    2 => (y - x + (cy - cx)).abs() <= thick,
                    3 => (y + x - cy - cx).abs() <= thick,
                    4 => (y - cy).pow(2) + (x - cx).pow(2) <= r_in.pow(2),
                    5 => {
                        let d2 = (y - cy).pow(2) + (x - cx).pow(2);
                        d2 <= r_out.pow(2) && d2 >= r_in.pow(2)
                    }
                    6 => (y - cy + r_in).abs() <= thick || (x - cx + r_in).abs() <= thick,
                    7 => (y - cy - r_in).abs() <= thick || (x - cx - r_in).abs() <= thick,
                    8 => (y - cy).abs() <= thick || (x - cx).abs() <= thick,
                    _ => ((y / 4) + (x / 4)) % 2 == 0,
                };
                let base = if on { fg } else { 0.08 };
                let noise: f32 = rng.random_range(-0.05..0.05);
                img[(y as usize) * side + x as usize] = (base + noise).clamp(0.0, 1.0);
            }
        }
    }
    LabeledImageSet::new(
        Tensor::new(vec![n, 1, side, side], data)?,
        labels,
        10,
        format!("synthetic:{n}x{side}@{seed}"),
        vec!["synthetic-shapes".to_string()],
    )
}

/// Seed that fixes the synthetic train/test split across all runs.
const SYNTHETIC_DATA_SEED: u64 = 9601;

/// Resolve a dataset id to (train, test) sets.
///
/// Known ids: `mnist`, `fashion_mnist` (IDX files under
/// `<data_dir>/<id>/`), `cifar10`, `cifar100` (binary batches under
/// `<data_dir>/<id>/`), and `synthetic` (generated, no files).
pub fn resolve(id: &str, data_dir: &Path) -> Result<(LabeledImageSet, LabeledImageSet)> {
    match id {
        "mnist" | "fashion_mnist" => {
            let dir = data_dir.join(id);
            let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
            let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
            Ok((train, test))
        }
        "cifar10" => {
            let dir = data_dir.join(id);
            let train_paths: Vec<_> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            let train = load_cifar_binary(&train_paths, CifarVariant::Cifar10)?;
            let test = load_cifar_binary(&[dir.join("test_batch.bin")], CifarVariant::Cifar10)?;
            Ok((train, test))
        }
        "cifar100" => {
            let dir = data_dir.join(id);
            let train = load_cifar_binary(&[dir.join("train.bin")], CifarVariant::Cifar100)?;
            let test = load_cifar_binary(&[dir.join("test.bin")], CifarVariant::Cifar100)?;
            Ok((train, test))
        }
        "synthetic" => {
            let train = synthetic_shapes(4000, 16, SYNTHETIC_DATA_SEED)?;
            let test = synthetic_shapes(1000, 16, SYNTHETIC_DATA_SEED + 1)?;
            Ok((train, test))
        }
        other => Err(Error::Dataset(format!(
            "unknown dataset id '{other}' (known: mnist, fashion_mnist, cifar10, cifar100, synthetic)"
        ))),
    }
}
