//! Raw image-stack format: a plain container for float images, used for
//! regularization sets from arbitrary sources and for saving perturbations.
//!
//! Layout: magic "IMGS", u32 version (1), u32 N/C/H/W, then N*C*H*W f32
//! little-endian pixels, row-major NCHW.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, FormatErrorKind, Result};
use crate::tensor::Tensor;

pub const STACK_MAGIC: &[u8; 4] = b"IMGS";
pub const STACK_VERSION: u32 = 1;

const FMT: &str = "image stack";

pub fn write_stack(images: &Tensor, w: &mut impl Write) -> Result<()> {
    if images.rank() != 4 {
        return Err(Error::shape("write_stack", format!("expected (N,C,H,W), got {:?}", images.shape())));
    }
    w.write_all(STACK_MAGIC)?;
    w.write_u32::<LittleEndian>(STACK_VERSION)?;
    for &d in images.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in images.data() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_stack(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::format(FMT, FormatErrorKind::Truncated, "magic"))?;
    if &magic != STACK_MAGIC {
        return Err(Error::format(FMT, FormatErrorKind::BadMagic, format!("got {magic:02x?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| Error::format(FMT, FormatErrorKind::Truncated, "version"))?;
    if version != STACK_VERSION {
        return Err(Error::format(FMT, FormatErrorKind::UnsupportedVersion, format!("version {version}")));
    }
    let mut shape = [0usize; 4];
    for d in &mut shape {
        *d = r.read_u32::<LittleEndian>().map_err(|_| Error::format(FMT, FormatErrorKind::Truncated, "shape"))? as usize;
    }
    let n: usize = shape.iter().product();
    if n == 0 || n > (1 << 31) {
        return Err(Error::format(FMT, FormatErrorKind::Corrupt, format!("implausible shape {shape:?}")));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.read_f32::<LittleEndian>().map_err(|_| Error::format(FMT, FormatErrorKind::Truncated, "pixels"))?);
    }
    Tensor::new(shape.to_vec(), data).map_err(|e| Error::format(FMT, FormatErrorKind::Corrupt, e.to_string()))
}

pub fn save_stack_file(images: &Tensor, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_stack(images, &mut w)
}

pub fn load_stack_file(path: &Path) -> Result<Tensor> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_stack(&mut r)
}
