//! Binary model format.
//!
//! Layout (all integers little-endian unless noted):
//!
//! ```text
//! magic          4 bytes  "TNET"
//! version        u32      currently 1
//! arch id        u8 len + utf-8 bytes
//! input shape    u32 x3   (C, H, W)
//! num classes    u32
//! layer count    u32
//!   per layer    u8 tag   0=conv2d 1=relu 2=avg_pool 3=flatten 4=linear
//!                conv2d:  u32 x5 (in,out,kernel,stride,padding) + u8 skip
//!                avg_pool: u32 size
//!                linear:  u32 x2 (in_features, out_features)
//! tap count      u32  + u32 indices
//! param count    u32
//!   per param    u8 rank + u32 dims + f32 data (little-endian)
//! extra count    u32
//!   per extra    u8 name len + utf-8 + u8 rank + u32 dims + f32 data
//! ```
//!
//! The round trip is bit-exact on parameters and architecture.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, FormatErrorKind, Result};
use crate::tensor::Tensor;

use super::{LayerSpec, TapNet};

pub const MODEL_MAGIC: &[u8; 4] = b"TNET";
pub const MODEL_VERSION: u32 = 1;

const FMT: &str = "model";

fn truncated(what: &str) -> Error {
    Error::format(FMT, FormatErrorKind::Truncated, what.to_string())
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(|_| truncated(what))
}

fn read_u8(r: &mut impl Read, what: &str) -> Result<u8> {
    r.read_u8().map_err(|_| truncated(what))
}

fn read_string(r: &mut impl Read, what: &str) -> Result<String> {
    let len = read_u8(r, what)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| truncated(what))?;
    String::from_utf8(buf).map_err(|_| Error::format(FMT, FormatErrorKind::Corrupt, format!("{what}: invalid utf-8")))
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    if s.len() > u8::MAX as usize {
        return Err(Error::invalid("save_model", format!("string '{s}' too long")));
    }
    w.write_u8(s.len() as u8)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::invalid("save_model", "tensor rank too large"));
    }
    w.write_u8(t.rank() as u8)?;
    for &d in t.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in t.data() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read, what: &str) -> Result<Tensor> {
    let rank = read_u8(r, what)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, what)? as usize);
    }
    let n: usize = shape.iter().product();
    if n > (1 << 31) {
        return Err(Error::format(FMT, FormatErrorKind::Corrupt, format!("{what}: implausible tensor size {n}")));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.read_f32::<LittleEndian>().map_err(|_| truncated(what))?);
    }
    Tensor::new(shape, data).map_err(|e| Error::format(FMT, FormatErrorKind::Corrupt, e.to_string()))
}

/// Serialize a net plus optional named extra tensors (for example the
/// similarity-mixer logits stored under `"gamma_logits"`).
pub fn save_model(net: &TapNet, extras: &[(String, Tensor)], w: &mut impl Write) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_u32::<LittleEndian>(MODEL_VERSION)?;
    write_string(w, net.arch_id())?;
    for d in net.input_shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    w.write_u32::<LittleEndian>(net.num_classes() as u32)?;

    w.write_u32::<LittleEndian>(net.layers().len() as u32)?;
    for layer in net.layers() {
        match layer {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, skip } => {
                w.write_u8(0)?;
                for v in [in_ch, out_ch, kernel, stride, padding] {
                    w.write_u32::<LittleEndian>(*v as u32)?;
                }
                w.write_u8(u8::from(*skip))?;
            }
            LayerSpec::Relu => w.write_u8(1)?,
            LayerSpec::AvgPool { size } => {
                w.write_u8(2)?;
                w.write_u32::<LittleEndian>(*size as u32)?;
            }
            LayerSpec::Flatten => w.write_u8(3)?,
            LayerSpec::Linear { in_features, out_features } => {
                w.write_u8(4)?;
                w.write_u32::<LittleEndian>(*in_features as u32)?;
                w.write_u32::<LittleEndian>(*out_features as u32)?;
            }
        }
    }

    w.write_u32::<LittleEndian>(net.taps().len() as u32)?;
    for &t in net.taps() {
        w.write_u32::<LittleEndian>(t as u32)?;
    }

    w.write_u32::<LittleEndian>(net.params().len() as u32)?;
    for p in net.params() {
        write_tensor(w, p)?;
    }

    w.write_u32::<LittleEndian>(extras.len() as u32)?;
    for (name, t) in extras {
        write_string(w, name)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

/// Deserialize a model stream. Returns the net and any extra tensors.
pub fn load_model(r: &mut impl Read) -> Result<(TapNet, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::format(FMT, FormatErrorKind::BadMagic, format!("got {magic:02x?}")));
    }
    let version = read_u32(r, "version")?;
    if version != MODEL_VERSION {
        return Err(Error::format(FMT, FormatErrorKind::UnsupportedVersion, format!("version {version}")));
    }
    let arch_id = read_string(r, "arch id")?;
    let input_shape = [
        read_u32(r, "input shape")? as usize,
        read_u32(r, "input shape")? as usize,
        read_u32(r, "input shape")? as usize,
    ];
    let num_classes = read_u32(r, "num classes")? as usize;

    let layer_count = read_u32(r, "layer count")? as usize;
    if layer_count > 10_000 {
        return Err(Error::format(FMT, FormatErrorKind::Corrupt, format!("implausible layer count {layer_count}")));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let what = format!("layer {i}");
        let tag = read_u8(r, &what)?;
        layers.push(match tag {
            0 => {
                let mut v = [0usize; 5];
                for slot in &mut v {
                    *slot = read_u32(r, &what)? as usize;
                }
                let skip = read_u8(r, &what)? != 0;
                LayerSpec::Conv2d { in_ch: v[0], out_ch: v[1], kernel: v[2], stride: v[3], padding: v[4], skip }
            }
            1 => LayerSpec::Relu,
            2 => LayerSpec::AvgPool { size: read_u32(r, &what)? as usize },
            3 => LayerSpec::Flatten,
            4 => LayerSpec::Linear {
                in_features: read_u32(r, &what)? as usize,
                out_features: read_u32(r, &what)? as usize,
            },
            t => return Err(Error::format(FMT, FormatErrorKind::Corrupt, format!("unknown layer tag {t}"))),
        });
    }

    let tap_count = read_u32(r, "tap count")? as usize;
    let mut taps = Vec::with_capacity(tap_count);
    for _ in 0..tap_count {
        taps.push(read_u32(r, "taps")? as usize);
    }

    let param_count = read_u32(r, "param count")? as usize;
    let mut params = Vec::with_capacity(param_count);
    for i in 0..param_count {
        params.push(read_tensor(r, &format!("param {i}"))?);
    }

    let extra_count = read_u32(r, "extra count")? as usize;
    let mut extras = Vec::with_capacity(extra_count);
    for i in 0..extra_count {
        let name = read_string(r, &format!("extra {i} name"))?;
        let t = read_tensor(r, &format!("extra {i}"))?;
        extras.push((name, t));
    }

    let net = TapNet::from_parts(layers, taps, input_shape, num_classes, params, arch_id)
        .map_err(|e| Error::format(FMT, FormatErrorKind::Corrupt, e.to_string()))?;
    Ok((net, extras))
}

pub fn save_model_file(net: &TapNet, extras: &[(String, Tensor)], path: &std::path::Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_model(net, extras, &mut w)
}

pub fn load_model_file(path: &std::path::Path) -> Result<(TapNet, Vec<(String, Tensor)>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    load_model(&mut r)
}
