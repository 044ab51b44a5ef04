//! CIFAR binary format: fixed-size records of label byte(s) followed by
//! 3072 channel-planar pixels (32x32 RGB). CIFAR-100 records carry a coarse
//! and a fine label; the fine label is kept.

use std::path::Path;

use crate::error::{Error, FormatErrorKind, Result};
use crate::tensor::Tensor;

use super::LabeledImageSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

const PIXELS: usize = 3 * 32 * 32;
const FMT: &str = "CIFAR binary";

/// Load and concatenate CIFAR batch files.
pub fn load_cifar_binary(paths: &[std::path::PathBuf], variant: CifarVariant) -> Result<LabeledImageSet> {
    if paths.is_empty() {
        return Err(Error::invalid("load_cifar_binary", "no files given"));
    }
    let record = variant.label_bytes() + PIXELS;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path)?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(Error::format(
                FMT,
                FormatErrorKind::Truncated,
                format!("{}: {} bytes is not a multiple of the {record}-byte record", path.display(), bytes.len()),
            ));
        }
        for rec in bytes.chunks(record) {
            // CIFAR-100: coarse label first, fine label second.
            let label = rec[variant.label_bytes() - 1];
            if usize::from(label) >= variant.num_classes() {
                return Err(Error::format(FMT, FormatErrorKind::Corrupt, format!("label {label} out of range")));
            }
            labels.push(label);
            data.extend(rec[variant.label_bytes()..].iter().map(|&b| f32::from(b) / 255.0));
        }
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, 32, 32], data)?;
    LabeledImageSet::new(
        images,
        labels,
        variant.num_classes(),
        format!("cifar:{}", paths[0].display()),
        vec!["cifar-u8/255".to_string()],
    )
}

/// Write a (N,3,32,32) set as CIFAR-10-style records (test fixture helper).
pub fn write_cifar10(set: &LabeledImageSet, w: &mut impl std::io::Write) -> Result<()> {
    let shape = set.images().shape();
    if shape[1..] != [3, 32, 32] {
        return Err(Error::invalid("write_cifar10", format!("expected (N,3,32,32), got {shape:?}")));
    }
    for (i, img) in set.images().data().chunks(PIXELS).enumerate() {
        w.write_all(&[set.labels()[i]])?;
        let bytes: Vec<u8> = img.iter().map(|&v| (v * 255.0).round() as u8).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

/// Record count of a standard CIFAR-10 batch file.
pub fn cifar10_records(path: &Path) -> Result<usize> {
    let len = std::fs::metadata(path)?.len() as usize;
    Ok(len / 3073)
}
