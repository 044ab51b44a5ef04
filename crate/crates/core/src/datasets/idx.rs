//! IDX format (MNIST / FashionMNIST): big-endian magic and dimension sizes,
//! then unsigned bytes. Pixels are scaled by 1/255 on load; `write_idx`
//! inverts the scaling exactly, so load -> save reproduces the source bytes.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, FormatErrorKind, Result};
use crate::tensor::Tensor;

use super::LabeledImageSet;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const FMT: &str = "IDX";

fn truncated(what: &str) -> Error {
    Error::format(FMT, FormatErrorKind::Truncated, what.to_string())
}

fn read_images(r: &mut impl Read) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = r.read_u32::<BigEndian>().map_err(|_| truncated("image magic"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(FMT, FormatErrorKind::BadMagic, format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = r.read_u32::<BigEndian>().map_err(|_| truncated("image count"))? as usize;
    let h = r.read_u32::<BigEndian>().map_err(|_| truncated("rows"))? as usize;
    let w = r.read_u32::<BigEndian>().map_err(|_| truncated("cols"))? as usize;
    let mut data = vec![0u8; n * h * w];
    r.read_exact(&mut data).map_err(|_| truncated("pixel data"))?;
    Ok((n, h, w, data))
}

fn read_labels(r: &mut impl Read) -> Result<Vec<u8>> {
    let magic = r.read_u32::<BigEndian>().map_err(|_| truncated("label magic"))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(FMT, FormatErrorKind::BadMagic, format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = r.read_u32::<BigEndian>().map_err(|_| truncated("label count"))? as usize;
    let mut data = vec![0u8; n];
    r.read_exact(&mut data).map_err(|_| truncated("label data"))?;
    Ok(data)
}

/// Load an images/labels IDX pair into a labeled set with pixels in [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let mut ir = std::io::BufReader::new(std::fs::File::open(images_path)?);
    let (n, h, w, pixels) = read_images(&mut ir)?;
    let mut lr = std::io::BufReader::new(std::fs::File::open(labels_path)?);
    let labels = read_labels(&mut lr)?;
    if labels.len() != n {
        return Err(Error::format(
            FMT,
            FormatErrorKind::Corrupt,
            format!("{n} images but {} labels", labels.len()),
        ));
    }
    let data: Vec<f32> = pixels.iter().map(|&b| f32::from(b) / 255.0).collect();
    let images = Tensor::new(vec![n, 1, h, w], data)?;
    let num_classes = usize::from(labels.iter().copied().max().unwrap_or(0)) + 1;
    LabeledImageSet::new(
        images,
        labels,
        num_classes,
        format!("idx:{}", images_path.display()),
        vec!["idx-u8/255".to_string()],
    )
}

/// Serialize a set back to IDX bytes (single-channel sets only).
pub fn write_idx(set: &LabeledImageSet, images: &mut impl Write, labels: &mut impl Write) -> Result<()> {
    let shape = set.images().shape();
    if shape[1] != 1 {
        return Err(Error::invalid("write_idx", "IDX stores single-channel images"));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    images.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    images.write_u32::<BigEndian>(n as u32)?;
    images.write_u32::<BigEndian>(h as u32)?;
    images.write_u32::<BigEndian>(w as u32)?;
    let bytes: Vec<u8> = set.images().data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    images.write_all(&bytes)?;

    labels.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    labels.write_u32::<BigEndian>(n as u32)?;
    labels.write_all(set.labels())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::WriteBytesExt;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.write_u32::<BigEndian>(IDX_IMAGES_MAGIC).unwrap();
        img.write_u32::<BigEndian>(2).unwrap();
        img.write_u32::<BigEndian>(2).unwrap();
        img.write_u32::<BigEndian>(2).unwrap();
        img.extend_from_slice(&[0, 255, 128, 64, 10, 20, 30, 40]);
        let mut lab = Vec::new();
        lab.write_u32::<BigEndian>(IDX_LABELS_MAGIC).unwrap();
        lab.write_u32::<BigEndian>(2).unwrap();
        lab.extend_from_slice(&[7, 3]);
        (img, lab)
    }

    fn load_bytes(img: &[u8], lab: &[u8]) -> Result<LabeledImageSet> {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        load_idx(&ip, &lp)
    }

    #[test]
    fn scaling_endpoints_are_exact() {
        let (img, lab) = fixture();
        let set = load_bytes(&img, &lab).unwrap();
        assert_eq!(set.images().shape(), &[2, 1, 2, 2]);
        assert_eq!(set.images().data()[0], 0.0);
        assert_eq!(set.images().data()[1], 1.0);
        assert_eq!(set.labels(), &[7, 3]);
    }

    #[test]
    fn wrong_magic_is_distinct() {
        let (img, mut lab) = fixture();
        lab[3] = 0x99;
        let err = load_bytes(&img, &lab).unwrap_err();
        assert_eq!(err.format_kind(), Some(FormatErrorKind::BadMagic));
    }

    #[test]
    fn truncation_is_distinct() {
        let (img, lab) = fixture();
        let err = load_bytes(&img[..img.len() - 2], &lab).unwrap_err();
        assert_eq!(err.format_kind(), Some(FormatErrorKind::Truncated));
    }

    #[test]
    fn count_mismatch_is_corrupt() {
        let (img, mut lab) = fixture();
        lab[7] = 3; // claims 3 labels, provides 2
        lab.push(1);
        let err = load_bytes(&img, &lab).unwrap_err();
        assert_eq!(err.format_kind(), Some(FormatErrorKind::Corrupt));
    }

    #[test]
    fn reserialization_reproduces_source_bytes() {
        let (img, lab) = fixture();
        let set = load_bytes(&img, &lab).unwrap();
        let mut img2 = Vec::new();
        let mut lab2 = Vec::new();
        write_idx(&set, &mut img2, &mut lab2).unwrap();
        assert_eq!(img, img2);
        assert_eq!(lab, lab2);
    }
}
