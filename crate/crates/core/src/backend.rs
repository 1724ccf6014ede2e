//! Weight quantization and the logical to physical crossbar mapping.
//!
//! Activations are `i32` fixed point with [`ACT_FRAC_BITS`] fractional bits.
//! Weights of a layer share a power-of-two scale `2^-shift`; a product
//! `x·w` carries `ACT_FRAC_BITS + shift` fractional bits and is brought back
//! with a rounding right shift by `shift` after accumulation.
//!
//! A logical array holds signed weights. Bit splitting spreads each
//! magnitude over `weight_bits / cell_bits` slices of `cell_bits` each; with
//! [`SignMode::PosNeg`] every slice has a positive and a negative image, with
//! [`SignMode::TwosComplement`] the top slice carries the sign.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hw::{HardwareConfig, SignMode};
use crate::ir::{LayerId, WeightStore};
use crate::isa::{requantize, AgInfo};
use crate::partition::Matrix;

pub const ACT_FRAC_BITS: u32 = 8;
/// Upper bound on the per-layer weight shift. Keeps the products of typical
/// activations and weights well inside `i32`.
pub const MAX_WEIGHT_SHIFT: u32 = 12;

fn round_half_away(v: f64) -> i64 {
    if v >= 0.0 {
        (v + 0.5).floor() as i64
    } else {
        -((-v + 0.5).floor() as i64)
    }
}

pub fn quantize_activation(v: f32) -> i32 {
    round_half_away(v as f64 * f64::from(1u32 << ACT_FRAC_BITS)).clamp(i32::MIN as i64, i32::MAX as i64) as i32
}

pub fn dequantize_activation(v: i32) -> f32 {
    v as f32 / (1u32 << ACT_FRAC_BITS) as f32
}

/// Symmetric fixed-point value of `w` at scale `2^-shift`, clamped to
/// `weight_bits - 1` magnitude bits.
pub fn quantize_value(w: f32, shift: u32, weight_bits: u32) -> i32 {
    let lim = (1i64 << (weight_bits - 1)) - 1;
    round_half_away(w as f64 * (1u64 << shift) as f64).clamp(-lim, lim) as i32
}

/// Largest shift (up to [`MAX_WEIGHT_SHIFT`]) at which the largest
/// magnitude still fits `weight_bits - 1` bits.
pub fn fit_shift(weights: &[f32], weight_bits: u32) -> u32 {
    let lim = (1i64 << (weight_bits - 1)) - 1;
    let max = weights.iter().fold(0f64, |m, w| m.max((*w as f64).abs()));
    (0..=MAX_WEIGHT_SHIFT).rev().find(|&s| round_half_away(max * (1u64 << s) as f64) <= lim).unwrap_or(0)
}

/// Per-layer weight scales.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: u32,
    pub shifts: BTreeMap<LayerId, u32>,
}

impl QuantSpec {
    pub fn fit(store: &WeightStore, weight_bits: u32) -> Self {
        let shifts = store.layers.iter().map(|(&id, w)| (id, fit_shift(&w.data, weight_bits))).collect();
        QuantSpec { weight_bits, shifts }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub shift: u32,
    pub dims: Vec<usize>,
    pub weights: Vec<i32>,
    /// Bias at the activation scale.
    pub bias: Option<Vec<i32>>,
}

impl QuantizedLayer {
    /// Accumulator to output activation: rescale, then add the bias.
    pub fn finish(&self, acc: i32, out_channel: usize) -> i32 {
        let v = requantize(acc, self.shift);
        match &self.bias {
            Some(b) => v.wrapping_add(b[out_channel]),
            None => v,
        }
    }
}

pub type QuantizedWeights = BTreeMap<LayerId, QuantizedLayer>;

pub fn quantize(store: &WeightStore, spec: &QuantSpec) -> QuantizedWeights {
    store
        .layers
        .iter()
        .map(|(&id, w)| {
            let shift = spec.shifts.get(&id).copied().unwrap_or_else(|| fit_shift(&w.data, spec.weight_bits));
            let q = QuantizedLayer {
                shift,
                dims: w.dims.clone(),
                weights: w.data.iter().map(|&v| quantize_value(v, shift, spec.weight_bits)).collect(),
                bias: w.bias.as_ref().map(|b| b.iter().map(|&v| quantize_activation(v)).collect()),
            };
            (id, q)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Pos,
    Neg,
    /// Top two's-complement slice: the cell digit is read as a signed
    /// `cell_bits` value.
    SignedTop,
}

impl Polarity {
    fn tag(self) -> &'static str {
        match self {
            Polarity::Pos => "pos",
            Polarity::Neg => "neg",
            Polarity::SignedTop => "msb",
        }
    }
    fn from_tag(s: &str) -> Option<Self> {
        match s {
            "pos" => Some(Polarity::Pos),
            "neg" => Some(Polarity::Neg),
            "msb" => Some(Polarity::SignedTop),
            _ => None,
        }
    }
    fn code(self) -> u8 {
        self as u8
    }
    fn from_code(c: u8) -> Option<Self> {
        [Polarity::Pos, Polarity::Neg, Polarity::SignedTop].get(c as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRole {
    pub slice: u32,
    pub polarity: Polarity,
}

impl ImageRole {
    /// Cell digit with the image's sign applied.
    pub fn signed_digit(self, digit: u8, cell_bits: u32) -> i32 {
        let d = digit as i32;
        match self.polarity {
            Polarity::Pos => d,
            Polarity::Neg => -d,
            Polarity::SignedTop if d >= 1 << (cell_bits - 1) => d - (1 << cell_bits),
            Polarity::SignedTop => d,
        }
    }

    /// Signed contribution of a cell digit to the logical weight.
    pub fn value(self, digit: u8, cell_bits: u32) -> i64 {
        (self.signed_digit(digit, cell_bits) as i64) << (self.slice * cell_bits)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicalImage {
    pub role: ImageRole,
    pub cells: Matrix<u8>,
}

/// Splits a logical matrix into physical images, ordered by slice then
/// polarity.
pub fn bit_split(m: &Matrix<i32>, cfg: &HardwareConfig) -> Result<Vec<PhysicalImage>> {
    let (wb, cb) = (cfg.weight_bits, cfg.cell_bits);
    let slices = wb / cb;
    let mask = (1i64 << cb) - 1;
    let lim = 1i64 << (wb - 1);
    if let Some(&v) = m.data.iter().find(|&&v| (v as i64).abs() >= lim && !(cfg.sign_mode == SignMode::TwosComplement && v as i64 == -lim))
    {
        return Err(Error::Overflow(v as i64));
    }
    let blank = || Matrix { rows: m.rows, cols: m.cols, data: vec![0u8; m.data.len()] };
    let mut out = Vec::new();
    for s in 0..slices {
        let digit = |v: i64| ((v >> (s * cb)) & mask) as u8;
        match cfg.sign_mode {
            SignMode::PosNeg => {
                let (mut pos, mut neg) = (blank(), blank());
                for (k, &v) in m.data.iter().enumerate() {
                    let v = v as i64;
                    if v >= 0 {
                        pos.data[k] = digit(v);
                    } else {
                        neg.data[k] = digit(-v);
                    }
                }
                out.push(PhysicalImage { role: ImageRole { slice: s, polarity: Polarity::Pos }, cells: pos });
                out.push(PhysicalImage { role: ImageRole { slice: s, polarity: Polarity::Neg }, cells: neg });
            }
            SignMode::TwosComplement => {
                let mut img = blank();
                for (k, &v) in m.data.iter().enumerate() {
                    // two's complement bits of a wb-bit value
                    img.data[k] = digit((v as i64) & ((1i64 << wb) - 1));
                }
                let polarity = if s + 1 == slices { Polarity::SignedTop } else { Polarity::Pos };
                out.push(PhysicalImage { role: ImageRole { slice: s, polarity }, cells: img });
            }
        }
    }
    Ok(out)
}

/// Inverse of [`bit_split`].
pub fn reconstruct(images: &[PhysicalImage], cell_bits: u32) -> Matrix<i32> {
    let first = &images[0].cells;
    let mut data = vec![0i64; first.data.len()];
    for img in images {
        for (acc, &d) in data.iter_mut().zip(&img.cells.data) {
            *acc += img.role.value(d, cell_bits);
        }
    }
    Matrix { rows: first.rows, cols: first.cols, data: data.into_iter().map(|v| v as i32).collect() }
}

/// `y = xᵀ·M` evaluated image by image with shift and sign recombination.
pub fn physical_mvm(images: &[PhysicalImage], x: &[i32], cell_bits: u32) -> Vec<i32> {
    let cols = images[0].cells.cols;
    let mut y = vec![0i32; cols];
    for img in images {
        for (c, out) in y.iter_mut().enumerate() {
            let mut partial = 0i32;
            for (r, &xv) in x.iter().enumerate() {
                let d = img.role.signed_digit(img.cells.get(r, c), cell_bits);
                partial = partial.wrapping_add(xv.wrapping_mul(d));
            }
            *out = out.wrapping_add(partial.wrapping_shl(img.role.slice * cell_bits));
        }
    }
    y
}

/// `y = xᵀ·M` on the logical matrix.
pub fn logical_mvm(m: &Matrix<i32>, x: &[i32]) -> Vec<i32> {
    let mut y = vec![0i32; m.cols];
    for (r, &xv) in x.iter().enumerate().take(m.rows) {
        for (c, out) in y.iter_mut().enumerate() {
            *out = out.wrapping_add(xv.wrapping_mul(m.get(r, c)));
        }
    }
    y
}

/// Columns `[j·xbar_cols, (j+1)·xbar_cols)` of an AG matrix, zero padded to
/// a full crossbar.
pub fn logical_arrays(ag: &Matrix<i32>, cfg: &HardwareConfig) -> Vec<Matrix<i32>> {
    let n = ag.cols.div_ceil(cfg.xbar_cols);
    (0..n)
        .map(|j| {
            let mut data = vec![0i32; cfg.xbar_rows * cfg.xbar_cols];
            for r in 0..ag.rows {
                for c in 0..cfg.xbar_cols {
                    let col = j * cfg.xbar_cols + c;
                    if col < ag.cols {
                        data[r * cfg.xbar_cols + c] = ag.get(r, col);
                    }
                }
            }
            Matrix { rows: cfg.xbar_rows, cols: cfg.xbar_cols, data }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSlot {
    pub role: ImageRole,
    pub chip: usize,
    pub core: usize,
    pub crossbar: usize,
    /// Physical array within the crossbar slot.
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalArrayMapping {
    pub logical: usize,
    pub layer: LayerId,
    pub ag: usize,
    pub array_in_ag: usize,
    pub images: Vec<ImageSlot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicalMapping {
    pub arrays: Vec<LogicalArrayMapping>,
}

fn roles(cfg: &HardwareConfig) -> Vec<ImageRole> {
    let slices = cfg.weight_bits / cfg.cell_bits;
    (0..slices)
        .flat_map(|s| match cfg.sign_mode {
            SignMode::PosNeg => vec![ImageRole { slice: s, polarity: Polarity::Pos }, ImageRole { slice: s, polarity: Polarity::Neg }],
            SignMode::TwosComplement => {
                let polarity = if s + 1 == slices { Polarity::SignedTop } else { Polarity::Pos };
                vec![ImageRole { slice: s, polarity }]
            }
        })
        .collect()
}

/// Assigns physical arrays to every logical array, contiguously per core in
/// AG order. `ag_layers[a]` names the layer owning AG `a`.
pub fn place_physical(ags: &[AgInfo], ag_layers: &[LayerId], cfg: &HardwareConfig) -> Result<PhysicalMapping> {
    let roles = roles(cfg);
    let ipl = roles.len();
    let per_core = cfg.xbars_per_core() * cfg.physical_arrays_per_crossbar;
    let mut used = vec![0usize; cfg.total_cores()];
    for a in ags {
        used[a.core] += a.arrays * ipl;
    }
    if let Some((core, &needed)) = used.iter().enumerate().find(|(_, &u)| u > per_core) {
        return Err(Error::PhysicalCapacity { core, needed, available: per_core });
    }
    let mut next = vec![0usize; cfg.total_cores()];
    let mut arrays = Vec::new();
    for (ag, a) in ags.iter().enumerate() {
        let (chip, _, _) = cfg.core_position(a.core);
        for j in 0..a.arrays {
            let images = roles
                .iter()
                .map(|&role| {
                    let phys = next[a.core];
                    next[a.core] += 1;
                    ImageSlot {
                        role,
                        chip,
                        core: a.core,
                        crossbar: phys / cfg.physical_arrays_per_crossbar,
                        slot: phys % cfg.physical_arrays_per_crossbar,
                    }
                })
                .collect();
            arrays.push(LogicalArrayMapping { logical: arrays.len(), layer: ag_layers[ag], ag, array_in_ag: j, images });
        }
    }
    Ok(PhysicalMapping { arrays })
}

impl PhysicalMapping {
    /// One line per logical array: identity, then `chip:core:xbar:slot:slice:sign`
    /// for each image.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# logical layer ag array images\n");
        for a in &self.arrays {
            let _ = write!(s, "{} {} {} {}", a.logical, a.layer, a.ag, a.array_in_ag);
            for i in &a.images {
                let _ = write!(s, " {}:{}:{}:{}:{}:{}", i.chip, i.core, i.crossbar, i.slot, i.role.slice, i.role.polarity.tag());
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Parse(format!("mapping table line {}: {what}", line + 1));
        let mut arrays = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let num = |it: &mut std::str::SplitWhitespace| -> Result<usize> {
                it.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad(n, "expected integer"))
            };
            let (logical, layer, ag, array_in_ag) = (num(&mut it)?, num(&mut it)?, num(&mut it)?, num(&mut it)?);
            let images = it
                .map(|tok| {
                    let f: Vec<&str> = tok.split(':').collect();
                    if f.len() != 6 {
                        return Err(bad(n, "image entry needs 6 fields"));
                    }
                    let u = |i: usize| f[i].parse::<usize>().map_err(|_| bad(n, "bad image field"));
                    Ok(ImageSlot {
                        chip: u(0)?,
                        core: u(1)?,
                        crossbar: u(2)?,
                        slot: u(3)?,
                        role: ImageRole { slice: u(4)? as u32, polarity: Polarity::from_tag(f[5]).ok_or_else(|| bad(n, "bad sign"))? },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            arrays.push(LogicalArrayMapping { logical, layer, ag, array_in_ag, images });
        }
        Ok(PhysicalMapping { arrays })
    }
}

const IMAGE_MAGIC: &[u8; 4] = b"PIMX";

/// Binary crossbar images: magic, u32 version, u32 count, then per image
/// u32 logical id, u32 slice, u8 polarity, u32 rows, u32 cols, one byte per
/// cell row-major.
pub fn encode_images(images: &[(usize, PhysicalImage)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(images.len() as u32).to_le_bytes());
    for (logical, img) in images {
        out.extend_from_slice(&(*logical as u32).to_le_bytes());
        out.extend_from_slice(&img.role.slice.to_le_bytes());
        out.push(img.role.polarity.code());
        out.extend_from_slice(&(img.cells.rows as u32).to_le_bytes());
        out.extend_from_slice(&(img.cells.cols as u32).to_le_bytes());
        out.extend_from_slice(&img.cells.data);
    }
    out
}

pub fn decode_images(b: &[u8]) -> Result<Vec<(usize, PhysicalImage)>> {
    let trunc = || Error::Format("truncated image blob".into());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = b.get(pos..pos + n).ok_or_else(trunc)?;
        pos += n;
        Ok(s)
    };
    if take(4)? != IMAGE_MAGIC {
        return Err(Error::Format("not an image blob (bad magic)".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    if u32_at(take(4)?) != 1 {
        return Err(Error::Format("unsupported image blob version".into()));
    }
    let n = u32_at(take(4)?) as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let logical = u32_at(take(4)?) as usize;
        let slice = u32_at(take(4)?);
        let polarity = Polarity::from_code(take(1)?[0]).ok_or_else(|| Error::Format("bad polarity".into()))?;
        let rows = u32_at(take(4)?) as usize;
        let cols = u32_at(take(4)?) as usize;
        let data = take(rows * cols)?.to_vec();
        out.push((logical, PhysicalImage { role: ImageRole { slice, polarity }, cells: Matrix { rows, cols, data } }));
    }
    Ok(out)
}
