//! Similarity targets: ternary (+1 / 0 / -1 times `1 - eps_clamp`) pairwise
//! targets with a contribution mask, plus their binary file format.
//!
//! Target values are stored as sign codes rather than floats so that
//! `arctanh(1 - eps_clamp)` can always be evaluated from the exact `eps`
//! in f64; a rounded f32 copy of `1 - 1e-6` would shift the arctanh by
//! roughly 1e-3 relative, visibly distorting the loss.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, FormatErrorKind, Result};

use super::{unordered_pair_count, SymMatrix};

/// Which pairs a subset target admits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetMode {
    /// Targets in {-1, 0}: pairs with `S < -Th` or `|S| < Th`.
    Minus,
    /// Targets in {0, +1}: pairs with `S > Th` or `|S| < Th`.
    Plus,
    /// Targets in {0}: pairs with `|S| < Th`.
    Low,
    /// Targets in {-1, +1}: pairs with `|S| > Th`.
    High,
    /// All off-diagonal pairs.
    Full,
}

impl SubsetMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "minus" => Ok(SubsetMode::Minus),
            "plus" => Ok(SubsetMode::Plus),
            "low" => Ok(SubsetMode::Low),
            "high" => Ok(SubsetMode::High),
            "full" => Ok(SubsetMode::Full),
            other => Err(Error::invalid("subset mode", format!("unknown mode '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SubsetMode::Minus => "minus",
            SubsetMode::Plus => "plus",
            SubsetMode::Low => "low",
            SubsetMode::High => "high",
            SubsetMode::Full => "full",
        }
    }
}

/// How a target was constructed (recorded in the file header).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetKind {
    Threshold { th: f64 },
    DoubleThreshold { th1: f64, th2: f64 },
    Subset { th: f64, mode: SubsetMode },
    /// Built programmatically (for example a per-batch pair target).
    Manual,
}

/// Bit-packed pair mask.
#[derive(Clone, Debug, PartialEq)]
struct Bitset {
    len: usize,
    blocks: Vec<u64>,
}

impl Bitset {
    fn new(len: usize, value: bool) -> Self {
        let blocks = vec![if value { u64::MAX } else { 0 }; len.div_ceil(64)];
        let mut b = Bitset { len, blocks };
        if value {
            b.clear_tail();
        }
        b
    }

    fn clear_tail(&mut self) {
        let tail = self.len % 64;
        if tail != 0 {
            if let Some(last) = self.blocks.last_mut() {
                *last &= (1u64 << tail) - 1;
            }
        }
    }

    fn get(&self, i: usize) -> bool {
        (self.blocks[i / 64] >> (i % 64)) & 1 == 1
    }

    fn set(&mut self, i: usize, v: bool) {
        if v {
            self.blocks[i / 64] |= 1 << (i % 64);
        } else {
            self.blocks[i / 64] &= !(1 << (i % 64));
        }
    }

    fn count_ones(&self) -> u64 {
        self.blocks.iter().map(|b| u64::from(b.count_ones())).sum()
    }
}

/// Pairwise similarity target over `n` images: ternary value codes and a
/// contribution mask, diagonal excluded by convention.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTarget {
    n: usize,
    eps_clamp: f64,
    kind: TargetKind,
    codes: Vec<i8>,
    mask: Bitset,
}

fn pair_index(i: usize, j: usize) -> usize {
    debug_assert_ne!(i, j, "diagonal pairs are excluded from targets");
    let (hi, lo) = if i > j { (i, j) } else { (j, i) };
    hi * (hi - 1) / 2 + lo
}

impl SimilarityTarget {
    /// Empty manual target: all codes 0, all pairs masked out.
    pub fn empty(n: usize, eps_clamp: f64) -> Result<Self> {
        check_eps(eps_clamp)?;
        if n < 2 {
            return Err(Error::invalid("SimilarityTarget", format!("need n >= 2, got {n}")));
        }
        let pairs = unordered_pair_count(n) as usize;
        Ok(SimilarityTarget {
            n,
            eps_clamp,
            kind: TargetKind::Manual,
            codes: vec![0; pairs],
            mask: Bitset::new(pairs, false),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn eps_clamp(&self) -> f64 {
        self.eps_clamp
    }

    pub fn kind(&self) -> TargetKind {
        self.kind
    }

    pub fn code(&self, i: usize, j: usize) -> i8 {
        self.codes[pair_index(i, j)]
    }

    /// Target value for pair (i,j): `code * (1 - eps_clamp)`.
    pub fn value(&self, i: usize, j: usize) -> f64 {
        f64::from(self.code(i, j)) * (1.0 - self.eps_clamp)
    }

    /// `arctanh` of the target value, evaluated exactly from `eps_clamp`.
    pub fn atanh_value(&self, i: usize, j: usize) -> f64 {
        f64::from(self.code(i, j)) * (1.0 - self.eps_clamp).atanh()
    }

    pub fn masked(&self, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        self.mask.get(pair_index(i, j))
    }

    pub fn set_pair(&mut self, i: usize, j: usize, code: i8, masked: bool) -> Result<()> {
        if i == j || i >= self.n || j >= self.n {
            return Err(Error::invalid("set_pair", format!("pair ({i},{j}) invalid for n={}", self.n)));
        }
        if !(-1..=1).contains(&code) {
            return Err(Error::invalid("set_pair", format!("code {code} not in {{-1,0,1}}")));
        }
        let idx = pair_index(i, j);
        self.codes[idx] = code;
        self.mask.set(idx, masked);
        Ok(())
    }

    /// Number of unordered pairs admitted by the mask.
    pub fn masked_pair_count(&self) -> u64 {
        self.mask.count_ones()
    }

    /// Unordered masked pairs as (i, j) with j < i.
    pub fn iter_masked_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (1..self.n)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .filter(|&(i, j)| self.mask.get(pair_index(i, j)))
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid("eps_clamp", format!("must be in (0,1), got {eps}")));
    }
    Ok(())
}

fn check_th(th: f64, name: &str) -> Result<()> {
    if !(th > 0.0 && th < 1.0) {
        return Err(Error::invalid(name, format!("threshold must be in (0,1), got {th}")));
    }
    Ok(())
}

fn build(s: &SymMatrix, eps: f64, kind: TargetKind, f: impl Fn(f64) -> (i8, bool)) -> SimilarityTarget {
    let n = s.n();
    let pairs = unordered_pair_count(n) as usize;
    let mut codes = vec![0i8; pairs];
    let mut mask = Bitset::new(pairs, false);
    for i in 1..n {
        for j in 0..i {
            let (code, m) = f(f64::from(s.get(i, j)));
            let idx = pair_index(i, j);
            codes[idx] = code;
            mask.set(idx, m);
        }
    }
    SimilarityTarget { n, eps_clamp: eps, kind, codes, mask }
}

/// Thresholded target: +1 where `S > Th`, -1 where `S < -Th`, 0 where
/// `|S| <= Th`; every off-diagonal pair contributes.
pub fn threshold_target(s: &SymMatrix, th: f64, eps_clamp: f64) -> Result<SimilarityTarget> {
    check_th(th, "threshold_target")?;
    check_eps(eps_clamp)?;
    Ok(build(s, eps_clamp, TargetKind::Threshold { th }, |v| (code_for(v, th), true)))
}

fn code_for(v: f64, th: f64) -> i8 {
    if v > th {
        1
    } else if v < -th {
        -1
    } else {
        0
    }
}

/// Double-threshold target: +1 / -1 outside `Th1`, 0 inside `Th2`, and the
/// band `Th2 < |S| <= Th1` excluded via the mask.
pub fn double_threshold_target(s: &SymMatrix, th1: f64, th2: f64, eps_clamp: f64) -> Result<SimilarityTarget> {
    check_th(th1, "double_threshold_target th1")?;
    if !(th2 > 0.0) || th1 <= th2 {
        return Err(Error::invalid("double_threshold_target", format!("need Th1 > Th2 > 0, got Th1={th1}, Th2={th2}")));
    }
    check_eps(eps_clamp)?;
    Ok(build(s, eps_clamp, TargetKind::DoubleThreshold { th1, th2 }, |v| {
        if v > th1 {
            (1, true)
        } else if v < -th1 {
            (-1, true)
        } else if v.abs() <= th2 {
            (0, true)
        } else {
            (0, false)
        }
    }))
}

/// Thresholded target restricted to one of the named pair subsets.
pub fn subset_target(s: &SymMatrix, th: f64, eps_clamp: f64, mode: SubsetMode) -> Result<SimilarityTarget> {
    check_th(th, "subset_target")?;
    check_eps(eps_clamp)?;
    Ok(build(s, eps_clamp, TargetKind::Subset { th, mode }, |v| {
        let admitted = match mode {
            SubsetMode::Minus => v < -th || v.abs() < th,
            SubsetMode::Plus => v > th || v.abs() < th,
            SubsetMode::Low => v.abs() < th,
            SubsetMode::High => v.abs() > th,
            SubsetMode::Full => true,
        };
        (code_for(v, th), admitted)
    }))
}

// ---------------------------------------------------------------------------
// File format: magic "STGT", version, n, kind tag + thresholds + eps,
// sign codes (one byte per unordered pair), bit-packed mask.

pub const TARGET_MAGIC: &[u8; 4] = b"STGT";
pub const TARGET_VERSION: u32 = 1;

const FMT: &str = "similarity target";

fn kind_tag(kind: TargetKind) -> (u8, f64, f64) {
    match kind {
        TargetKind::Threshold { th } => (0, th, 0.0),
        TargetKind::DoubleThreshold { th1, th2 } => (1, th1, th2),
        TargetKind::Subset { th, mode } => {
            let tag = match mode {
                SubsetMode::Minus => 2,
                SubsetMode::Plus => 3,
                SubsetMode::Low => 4,
                SubsetMode::High => 5,
                SubsetMode::Full => 6,
            };
            (tag, th, 0.0)
        }
        TargetKind::Manual => (7, 0.0, 0.0),
    }
}

fn kind_from_tag(tag: u8, th1: f64, th2: f64) -> Result<TargetKind> {
    Ok(match tag {
        0 => TargetKind::Threshold { th: th1 },
        1 => TargetKind::DoubleThreshold { th1, th2 },
        2 => TargetKind::Subset { th: th1, mode: SubsetMode::Minus },
        3 => TargetKind::Subset { th: th1, mode: SubsetMode::Plus },
        4 => TargetKind::Subset { th: th1, mode: SubsetMode::Low },
        5 => TargetKind::Subset { th: th1, mode: SubsetMode::High },
        6 => TargetKind::Subset { th: th1, mode: SubsetMode::Full },
        7 => TargetKind::Manual,
        t => return Err(Error::format(FMT, FormatErrorKind::Corrupt, format!("unknown kind tag {t}"))),
    })
}

pub fn write_target(target: &SimilarityTarget, w: &mut impl Write) -> Result<()> {
    w.write_all(TARGET_MAGIC)?;
    w.write_u32::<LittleEndian>(TARGET_VERSION)?;
    w.write_u32::<LittleEndian>(target.n as u32)?;
    let (tag, th1, th2) = kind_tag(target.kind);
    w.write_u8(tag)?;
    w.write_f64::<LittleEndian>(th1)?;
    w.write_f64::<LittleEndian>(th2)?;
    w.write_f64::<LittleEndian>(target.eps_clamp)?;
    let bytes: Vec<u8> = target.codes.iter().map(|&c| c as u8).collect();
    w.write_all(&bytes)?;
    for block in &target.mask.blocks {
        w.write_u64::<LittleEndian>(*block)?;
    }
    Ok(())
}

pub fn read_target(r: &mut impl Read) -> Result<SimilarityTarget> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::format(FMT, FormatErrorKind::Truncated, "magic"))?;
    if &magic != TARGET_MAGIC {
        return Err(Error::format(FMT, FormatErrorKind::BadMagic, format!("got {magic:02x?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| Error::format(FMT, FormatErrorKind::Truncated, "version"))?;
    if version != TARGET_VERSION {
        return Err(Error::format(FMT, FormatErrorKind::UnsupportedVersion, format!("version {version}")));
    }
    let n = r.read_u32::<LittleEndian>().map_err(|_| Error::format(FMT, FormatErrorKind::Truncated, "n"))? as usize;
    if n < 2 || n > 1_000_000 {
        return Err(Error::format(FMT, FormatErrorKind::Corrupt, format!("implausible n = {n}")));
    }
    let tag = r.read_u8().map_err(|_| Error::format(FMT, FormatErrorKind::Truncated, "kind"))?;
    let th1 = r.read_f64::<LittleEndian>().map_err(|_| Error::format(FMT, FormatErrorKind::Truncated, "th1"))?;
    let th2 = r.read_f64::<LittleEndian>().map_err(|_| Error::format(FMT, FormatErrorKind::Truncated, "th2"))?;
    let eps = r.read_f64::<LittleEndian>().map_err(|_| Error::format(FMT, FormatErrorKind::Truncated, "eps"))?;
    check_eps(eps).map_err(|e| Error::format(FMT, FormatErrorKind::Corrupt, e.to_string()))?;
    let kind = kind_from_tag(tag, th1, th2)?;

    let pairs = unordered_pair_count(n) as usize;
    let mut code_bytes = vec![0u8; pairs];
    r.read_exact(&mut code_bytes).map_err(|_| Error::format(FMT, FormatErrorKind::Truncated, "codes"))?;
    let mut codes = Vec::with_capacity(pairs);
    for (i, b) in code_bytes.into_iter().enumerate() {
        let c = b as i8;
        if !(-1..=1).contains(&c) {
            return Err(Error::format(FMT, FormatErrorKind::Corrupt, format!("code {c} at pair {i}")));
        }
        codes.push(c);
    }

    let mut mask = Bitset::new(pairs, false);
    for block in &mut mask.blocks {
        *block = r.read_u64::<LittleEndian>().map_err(|_| Error::format(FMT, FormatErrorKind::Truncated, "mask"))?;
    }
    let mut check = mask.clone();
    check.clear_tail();
    if check != mask {
        return Err(Error::format(FMT, FormatErrorKind::Corrupt, "mask tail bits set"));
    }

    Ok(SimilarityTarget { n, eps_clamp: eps, kind, codes, mask })
}

pub fn save_target_file(target: &SimilarityTarget, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_target(target, &mut w)
}

pub fn load_target_file(path: &Path) -> Result<SimilarityTarget> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_target(&mut r)
}
