//! Weight unfolding and array-group partitioning.
//!
//! A CONV weight tensor `O×I×K×K` is reshaped into `P` matrices of `H×W`
//! (`H·W·P = I·O·K²`) in one of five layouts. Each matrix is cut vertically
//! into array groups (AGs) of at most `xbar_rows` rows; an AG spans
//! `⌈W / xbar_cols⌉` arrays that share one input slice.
//!
//! Input vectors are built from window pixels, and a pixel stores its
//! channels contiguously, so within a matrix row block the channel index
//! varies fastest: row `r` reads channel `r % I` of the `r / I`-th tap of the
//! current step. FC layers are treated as a convolution whose window covers
//! the whole input feature map, which reproduces pixel-major flattening.
//!
//! Cost formulas evaluate over the zero-padded input extent `F_in = H + 2·pad`
//! since padding pixels are materialized in local memory.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hw::HardwareConfig;
use crate::ir::{LayerId, LayerParams, StructureGraph};
use crate::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnfoldKind {
    /// `(I, O, K²)`: one `I×O` matrix per kernel tap.
    PerTap,
    /// `(I, OK², 1)`: taps laid side by side in the columns.
    TapsInColumns,
    /// `(IK, O, K)`: one matrix per kernel column; rows span kernel rows.
    PerKernelColumn,
    /// `(IK, OK, 1)`: kernel rows in the rows, kernel columns in the columns.
    KernelColumnsInColumns,
    /// `(IK², O, 1)`: the whole window in one column vector.
    Im2col,
}

impl UnfoldKind {
    pub const ALL: [UnfoldKind; 5] = [
        UnfoldKind::PerTap,
        UnfoldKind::TapsInColumns,
        UnfoldKind::PerKernelColumn,
        UnfoldKind::KernelColumnsInColumns,
        UnfoldKind::Im2col,
    ];

    pub fn label(self) -> &'static str {
        match self {
            UnfoldKind::PerTap => "(I,O,K^2)",
            UnfoldKind::TapsInColumns => "(I,OK^2,1)",
            UnfoldKind::PerKernelColumn => "(IK,O,K)",
            UnfoldKind::KernelColumnsInColumns => "(IK,OK,1)",
            UnfoldKind::Im2col => "(IK^2,O,1)",
        }
    }

    pub fn from_label(s: &str) -> Option<UnfoldKind> {
        UnfoldKind::ALL.iter().copied().find(|k| k.label() == s || format!("{k:?}").eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for UnfoldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Sliding-window geometry of a weighted layer. FC layers use a window
/// equal to the input extent and a 1×1 output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub is_fc: bool,
}

impl WindowGeom {
    pub fn of(g: &StructureGraph, id: LayerId) -> Result<Self> {
        let l = g.layer(id);
        match l.params {
            LayerParams::Conv(c) => Ok(WindowGeom {
                c_in: c.in_channels,
                c_out: c.out_channels,
                kh: c.kernel,
                kw: c.kernel,
                stride: c.stride,
                pad: c.padding,
                in_h: c.input.h,
                in_w: c.input.w,
                out_h: c.output.h,
                out_w: c.output.w,
                is_fc: false,
            }),
            LayerParams::Fc(f) => {
                let s = g.input_shapes(id)[0];
                Ok(WindowGeom {
                    c_in: s.c,
                    c_out: f.out_features,
                    kh: s.h,
                    kw: s.w,
                    stride: 1,
                    pad: 0,
                    in_h: s.h,
                    in_w: s.w,
                    out_h: 1,
                    out_w: 1,
                    is_fc: true,
                })
            }
            _ => Err(Error::UnsupportedLayer(id)),
        }
    }

    pub fn tasks(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input pixel read by tap `(kr, kc)` of output pixel `(oy, ox)`, or
    /// `None` for a padding position.
    pub fn tap_pixel(&self, oy: usize, ox: usize, kr: usize, kc: usize) -> Option<usize> {
        let y = (oy * self.stride + kr) as isize - self.pad as isize;
        let x = (ox * self.stride + kc) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            None
        } else {
            Some(y as usize * self.in_w + x as usize)
        }
    }

    /// Flat index into the layer's weight tensor for `(o, i, kr, kc)`.
    pub fn weight_index(&self, o: usize, i: usize, kr: usize, kc: usize) -> usize {
        if self.is_fc {
            o * (self.kh * self.kw * self.c_in) + (kr * self.kw + kc) * self.c_in + i
        } else {
            ((o * self.c_in + i) * self.kh + kr) * self.kw + kc
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnfoldingFormat {
    pub kind: UnfoldKind,
    pub h: usize,
    pub w: usize,
    pub p: usize,
    pub compute_cycles: u64,
    pub load_volume: u64,
    pub extra_memory: u64,
}

fn format_for(kind: UnfoldKind, geom: &WindowGeom) -> UnfoldingFormat {
    let (i, o, k) = (geom.c_in as u64, geom.c_out as u64, geom.kh as u64);
    let (ho, wo) = (geom.out_h as u64, geom.out_w as u64);
    let (hp, wp) = ((geom.in_h + 2 * geom.pad) as u64, (geom.in_w + 2 * geom.pad) as u64);
    if geom.is_fc {
        let n = i * k * geom.kw as u64;
        return UnfoldingFormat { kind, h: n as usize, w: o as usize, p: 1, compute_cycles: 1, load_volume: n, extra_memory: n + o };
    }
    // A 1x1 kernel leaves nothing to rearrange: every kind is the (I,O,1)
    // matrix processed window by window.
    let kind_costs = if k == 1 { UnfoldKind::Im2col } else { kind };
    let (h, w, p) = match kind_costs {
        UnfoldKind::PerTap => (i, o, k * k),
        UnfoldKind::TapsInColumns => (i, o * k * k, 1),
        UnfoldKind::PerKernelColumn => (i * k, o, k),
        UnfoldKind::KernelColumnsInColumns => (i * k, o * k, 1),
        UnfoldKind::Im2col => (i * k * k, o, 1),
    };
    let row_reuse_load = ho * k * wp * i;
    let (compute_cycles, load_volume, extra_memory) = match kind_costs {
        UnfoldKind::PerTap => (ho * wo, row_reuse_load, k * k * i + k * k * o),
        UnfoldKind::TapsInColumns => (hp * wp, hp * wp * i, i + k * k * o),
        UnfoldKind::PerKernelColumn => (ho * wo, row_reuse_load, k * k * i + k * o),
        UnfoldKind::KernelColumnsInColumns => (ho * wp, row_reuse_load, k * i + k * o),
        UnfoldKind::Im2col => (ho * wo, ho * wo * k * k * i, k * k * i + o),
    };
    UnfoldingFormat { kind, h: h as usize, w: w as usize, p: p as usize, compute_cycles, load_volume, extra_memory }
}

/// All formats of a weighted layer: the five kinds for CONV, the single
/// `(I,O,1)` format for FC.
pub fn enumerate_unfoldings(g: &StructureGraph, id: LayerId) -> Result<Vec<UnfoldingFormat>> {
    let geom = WindowGeom::of(g, id)?;
    Ok(enumerate_for_geom(&geom))
}

pub fn enumerate_for_geom(geom: &WindowGeom) -> Vec<UnfoldingFormat> {
    if geom.is_fc {
        vec![format_for(UnfoldKind::Im2col, geom)]
    } else {
        UnfoldKind::ALL.iter().map(|&k| format_for(k, geom)).collect()
    }
}

/// Picks the cycle-minimal format with the smallest load volume (HT) or
/// extra memory (LL); remaining ties go to the earlier kind.
pub fn select_unfolding(formats: &[UnfoldingFormat], mode: Mode) -> UnfoldingFormat {
    *formats
        .iter()
        .min_by_key(|f| {
            let second = match mode {
                Mode::Ht => f.load_volume,
                Mode::Ll => f.extra_memory,
            };
            (f.compute_cycles, second, f.kind)
        })
        .expect("at least one format")
}

/// One MVM step of an output-pixel task: which matrix to drive, the taps
/// whose pixels form its input vector (in row-block order), and which output
/// columns belong to this pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub p: usize,
    pub taps: Vec<(usize, usize)>,
    pub col_off: usize,
    pub col_len: usize,
}

pub fn task_steps(kind: UnfoldKind, geom: &WindowGeom) -> Vec<Step> {
    let (kh, kw, o) = (geom.kh, geom.kw, geom.c_out);
    let all_taps = || (0..kh).flat_map(|r| (0..kw).map(move |c| (r, c))).collect::<Vec<_>>();
    if geom.is_fc || (kh == 1 && kw == 1) {
        return vec![Step { p: 0, taps: all_taps(), col_off: 0, col_len: o }];
    }
    match kind {
        UnfoldKind::PerTap => {
            all_taps().into_iter().enumerate().map(|(t, tap)| Step { p: t, taps: vec![tap], col_off: 0, col_len: o }).collect()
        }
        UnfoldKind::TapsInColumns => {
            all_taps().into_iter().enumerate().map(|(t, tap)| Step { p: 0, taps: vec![tap], col_off: t * o, col_len: o }).collect()
        }
        UnfoldKind::PerKernelColumn => {
            (0..kw).map(|c| Step { p: c, taps: (0..kh).map(|r| (r, c)).collect(), col_off: 0, col_len: o }).collect()
        }
        UnfoldKind::KernelColumnsInColumns => {
            (0..kw).map(|c| Step { p: 0, taps: (0..kh).map(|r| (r, c)).collect(), col_off: c * o, col_len: o }).collect()
        }
        UnfoldKind::Im2col => vec![Step { p: 0, taps: all_taps(), col_off: 0, col_len: o }],
    }
}

/// Weight element at matrix `p`, `row`, `col`, as `(o, i, kr, kc)`.
pub fn matrix_source(kind: UnfoldKind, geom: &WindowGeom, p: usize, row: usize, col: usize) -> (usize, usize, usize, usize) {
    let (i_n, o_n, kw) = (geom.c_in, geom.c_out, geom.kw);
    if geom.is_fc || (geom.kh == 1 && kw == 1) {
        let t = row / i_n;
        return (col, row % i_n, t / kw, t % kw);
    }
    match kind {
        UnfoldKind::PerTap => (col, row, p / kw, p % kw),
        UnfoldKind::TapsInColumns => {
            let t = col / o_n;
            (col % o_n, row, t / kw, t % kw)
        }
        UnfoldKind::PerKernelColumn => (col, row % i_n, row / i_n, p),
        UnfoldKind::KernelColumnsInColumns => (col % o_n, row % i_n, row / i_n, col / o_n),
        UnfoldKind::Im2col => {
            let t = row / i_n;
            (col, row % i_n, t / kw, t % kw)
        }
    }
}

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Matrix<T> {
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Rows `[r0, r1)` as a new matrix.
    pub fn row_block(&self, rows: Range<usize>) -> Matrix<T> {
        Matrix { rows: rows.len(), cols: self.cols, data: self.data[rows.start * self.cols..rows.end * self.cols].to_vec() }
    }
}

/// Reshapes a weight tensor into the format's `P` matrices.
pub fn unfold_weights<T: Copy>(tensor: &[T], geom: &WindowGeom, fmt: &UnfoldingFormat) -> Result<Vec<Matrix<T>>> {
    let expected = geom.c_out * geom.c_in * geom.kh * geom.kw;
    if tensor.len() != expected {
        return Err(Error::Shape(format!("weight tensor has {} elements, format needs {expected}", tensor.len())));
    }
    Ok((0..fmt.p)
        .map(|p| {
            let mut data = Vec::with_capacity(fmt.h * fmt.w);
            for row in 0..fmt.h {
                for col in 0..fmt.w {
                    let (o, i, kr, kc) = matrix_source(fmt.kind, geom, p, row, col);
                    data.push(tensor[geom.weight_index(o, i, kr, kc)]);
                }
            }
            Matrix { rows: fmt.h, cols: fmt.w, data }
        })
        .collect())
}

/// A contiguous run of channels of one tap feeding an AG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSeg {
    /// Index into the step's tap list.
    pub tap: usize,
    pub ch_start: usize,
    pub ch_len: usize,
}

/// Splits matrix rows `[r0, r1)` into per-tap channel runs.
pub fn slice_segments(rows: &Range<usize>, c_in: usize) -> Vec<SliceSeg> {
    let mut out = Vec::new();
    let mut r = rows.start;
    while r < rows.end {
        let tap = r / c_in;
        let ch = r % c_in;
        let n = (c_in - ch).min(rows.end - r);
        out.push(SliceSeg { tap, ch_start: ch, ch_len: n });
        r += n;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayGroupSpec {
    pub layer: LayerId,
    pub replica: usize,
    pub p_idx: usize,
    pub ag_index: usize,
    pub rows: Range<usize>,
    pub arrays_needed: usize,
    pub input_slice: Vec<SliceSeg>,
}

/// Vertical split of every matrix into AGs of at most `xbar_rows` rows.
pub fn build_array_groups(layer: LayerId, fmt: &UnfoldingFormat, c_in: usize, cfg: &HardwareConfig, replica: usize) -> Vec<ArrayGroupSpec> {
    let arrays = fmt.w.div_ceil(cfg.xbar_cols);
    let per_matrix = fmt.h.div_ceil(cfg.xbar_rows);
    let mut out = Vec::with_capacity(fmt.p * per_matrix);
    for p_idx in 0..fmt.p {
        for a in 0..per_matrix {
            let rows = a * cfg.xbar_rows..((a + 1) * cfg.xbar_rows).min(fmt.h);
            out.push(ArrayGroupSpec {
                layer,
                replica,
                p_idx,
                ag_index: a,
                input_slice: slice_segments(&rows, c_in),
                rows,
                arrays_needed: arrays,
            });
        }
    }
    out
}

/// Partitioning decision for one weighted layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPartition {
    pub layer: LayerId,
    pub geom: WindowGeom,
    pub format: UnfoldingFormat,
    pub steps: Vec<Step>,
    /// AGs of one replica, ordered by matrix then row block.
    pub ags: Vec<ArrayGroupSpec>,
    pub arrays_per_ag: usize,
}

impl LayerPartition {
    pub fn ags_per_replica(&self) -> usize {
        self.ags.len()
    }
    pub fn arrays_per_replica(&self) -> usize {
        self.ags.len() * self.arrays_per_ag
    }
    pub fn ags_per_matrix(&self) -> usize {
        self.ags.len() / self.format.p
    }
    /// Number of MVM instructions for one task of one replica.
    pub fn mvms_per_task(&self) -> usize {
        self.steps.len() * self.ags_per_matrix()
    }
}

fn make_partition(layer: LayerId, geom: WindowGeom, format: UnfoldingFormat, cfg: &HardwareConfig) -> LayerPartition {
    let ags = build_array_groups(layer, &format, geom.c_in, cfg, 0);
    LayerPartition { layer, geom, steps: task_steps(format.kind, &geom), arrays_per_ag: format.w.div_ceil(cfg.xbar_cols), ags, format }
}

fn arrays_of(f: &UnfoldingFormat, cfg: &HardwareConfig) -> usize {
    f.p * f.h.div_ceil(cfg.xbar_rows) * f.w.div_ceil(cfg.xbar_cols)
}

/// Selects and partitions every weighted layer. `overrides` forces a kind
/// per layer. When the selected formats do not fit the hardware at
/// replication 1, layers without an override fall back to the cycle-minimal
/// format that needs the fewest arrays.
pub fn partition_graph(
    g: &StructureGraph,
    cfg: &HardwareConfig,
    mode: Mode,
    overrides: &BTreeMap<LayerId, UnfoldKind>,
) -> Result<BTreeMap<LayerId, LayerPartition>> {
    let d = cfg.derive();
    let capacity = d.logical_arrays_per_core * d.total_cores;
    let mut chosen: BTreeMap<LayerId, (WindowGeom, Vec<UnfoldingFormat>, UnfoldingFormat)> = BTreeMap::new();
    for l in g.layers().iter().filter(|l| l.op.is_weighted()) {
        let geom = WindowGeom::of(g, l.id)?;
        let formats = enumerate_for_geom(&geom);
        let pick = match overrides.get(&l.id) {
            Some(k) => *formats.iter().find(|f| f.kind == *k).unwrap_or(&formats[0]),
            None => select_unfolding(&formats, mode),
        };
        chosen.insert(l.id, (geom, formats, pick));
    }
    let total: usize = chosen.values().map(|(_, _, f)| arrays_of(f, cfg)).sum();
    if total > capacity {
        for (id, (_, formats, pick)) in chosen.iter_mut() {
            if overrides.contains_key(id) {
                continue;
            }
            let min_cycles = formats.iter().map(|f| f.compute_cycles).min().unwrap();
            *pick = *formats.iter().filter(|f| f.compute_cycles == min_cycles).min_by_key(|f| (arrays_of(f, cfg), f.kind)).unwrap();
        }
    }
    let mut out = BTreeMap::new();
    for (id, (geom, _, fmt)) in chosen {
        let part = make_partition(id, geom, fmt, cfg);
        if part.arrays_per_ag > d.logical_arrays_per_core {
            return Err(Error::Capacity { needed: part.arrays_per_ag, available: d.logical_arrays_per_core });
        }
        out.insert(id, part);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Activation, ConvParams, Fmap, LayerNode, Shape};

    fn conv_geom(i: usize, o: usize, k: usize, f: usize, pad: usize) -> WindowGeom {
        let c = ConvParams::same_style(i, o, k, 1, pad, Fmap::new(f, f));
        let g = StructureGraph::new(
            "c",
            Shape::new(i, f, f),
            vec![LayerNode {
                id: 0,
                op: crate::ir::OpKind::Conv,
                params: LayerParams::Conv(c),
                fused_activation: Activation::None,
                preds: vec![],
                succs: vec![],
            }],
        )
        .unwrap();
        WindowGeom::of(&g, 0).unwrap()
    }

    #[test]
    fn im2col_costs_for_example_layer() {
        let g = conv_geom(3, 64, 3, 32, 1);
        let f = format_for(UnfoldKind::Im2col, &g);
        assert_eq!((f.h, f.w, f.p), (27, 64, 1));
        assert_eq!(f.compute_cycles, 1024);
        assert_eq!(f.load_volume, 27648);
    }

    #[test]
    fn per_tap_costs_for_example_layer() {
        let g = conv_geom(3, 64, 3, 32, 1);
        let f = format_for(UnfoldKind::PerTap, &g);
        assert_eq!((f.h, f.w, f.p), (3, 64, 9));
        assert_eq!(f.compute_cycles, 1024);
        // 32 output rows, each reading 3 rows of the 34-wide padded input
        assert_eq!(f.load_volume, 32 * 3 * 34 * 3);
        assert_eq!(f.extra_memory, 603);
    }

    #[test]
    fn selection_per_mode() {
        let g = conv_geom(3, 64, 3, 32, 1);
        let fs = enumerate_for_geom(&g);
        assert_eq!(fs.len(), 5);
        assert_eq!(select_unfolding(&fs, Mode::Ht).kind, UnfoldKind::PerTap);
        let ll = select_unfolding(&fs, Mode::Ll);
        assert_eq!(ll.kind, UnfoldKind::Im2col);
        assert_eq!(ll.extra_memory, 91);
    }

    #[test]
    fn pointwise_collapses() {
        let g = conv_geom(8, 16, 1, 4, 0);
        let fs = enumerate_for_geom(&g);
        assert!(fs.iter().all(|f| (f.h, f.w, f.p) == (8, 16, 1)));
        assert!(fs
            .windows(2)
            .all(|w| (w[0].compute_cycles, w[0].load_volume, w[0].extra_memory)
                == (w[1].compute_cycles, w[1].load_volume, w[1].extra_memory)));
    }

    #[test]
    fn conservation_and_ag_split() {
        let g = conv_geom(5, 7, 3, 6, 1);
        for f in enumerate_for_geom(&g) {
            assert_eq!(f.h * f.w * f.p, 5 * 7 * 9, "{:?}", f.kind);
        }
        let mut cfg = HardwareConfig::preset("desk_tiny").unwrap();
        cfg.xbar_rows = 128;
        cfg.xbar_cols = 128;
        let f = UnfoldingFormat { kind: UnfoldKind::Im2col, h: 300, w: 200, p: 1, compute_cycles: 0, load_volume: 0, extra_memory: 0 };
        let ags = build_array_groups(0, &f, 3, &cfg, 0);
        assert_eq!(ags.iter().map(|a| a.rows.clone()).collect::<Vec<_>>(), vec![0..128, 128..256, 256..300]);
        assert!(ags.iter().all(|a| a.arrays_needed == 2));
        let f = UnfoldingFormat { kind: UnfoldKind::PerTap, h: 3, w: 64, p: 9, compute_cycles: 0, load_volume: 0, extra_memory: 0 };
        assert_eq!(build_array_groups(0, &f, 3, &cfg, 0).len(), 9);
    }

    #[test]
    fn im2col_matrix_layout() {
        let g = conv_geom(2, 3, 3, 4, 1);
        let t: Vec<usize> = (0..3 * 2 * 9).collect();
        let f = format_for(UnfoldKind::Im2col, &g);
        let m = &unfold_weights(&t, &g, &f).unwrap()[0];
        for o in 0..3 {
            for i in 0..2 {
                for kr in 0..3 {
                    for kc in 0..3 {
                        assert_eq!(m.get((kr * 3 + kc) * 2 + i, o), ((o * 2 + i) * 3 + kr) * 3 + kc);
                    }
                }
            }
        }
    }

    #[test]
    fn slices_split_at_tap_boundaries() {
        assert_eq!(
            slice_segments(&(3..9), 4),
            vec![
                SliceSeg { tap: 0, ch_start: 3, ch_len: 1 },
                SliceSeg { tap: 1, ch_start: 0, ch_len: 4 },
                SliceSeg { tap: 2, ch_start: 0, ch_len: 1 }
            ]
        );
    }
}
