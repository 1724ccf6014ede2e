//! Brute-force counters for each unfolding kind: the kind's access pattern
//! slid over a padded input one step at a time.

use std::collections::BTreeSet;

use pim_compiler::ir::conv_out;
use pim_compiler::partition::{UnfoldKind, WindowGeom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, PartialEq, Eq)]
pub struct Counters {
    pub cycles: u64,
    pub loads: u64,
    pub extra: u64,
}

/// How a kind walks the input and what it keeps on chip.
#[derive(Clone, Copy)]
pub enum Walk {
    /// One MVM per output window; the input row buffer is refilled for
    /// every output row.
    WindowRowBuffer,
    /// One MVM per padded input pixel; each pixel is loaded once.
    PixelStream,
    /// One MVM per padded column of each output row's band.
    ColumnStream,
    /// One MVM per output window; every window is gathered from scratch.
    WindowGather,
}

pub fn walk_of(kind: UnfoldKind) -> Walk {
    match kind {
        UnfoldKind::PerTap | UnfoldKind::PerKernelColumn => Walk::WindowRowBuffer,
        UnfoldKind::TapsInColumns => Walk::PixelStream,
        UnfoldKind::KernelColumnsInColumns => Walk::ColumnStream,
        UnfoldKind::Im2col => Walk::WindowGather,
    }
}

/// Input and output buffer words a kind keeps per MVM step: the input
/// vectors staged for one step and the partial sums awaiting accumulation.
pub fn buffers(kind: UnfoldKind, i: u64, o: u64, k: u64) -> (u64, u64) {
    match kind {
        UnfoldKind::PerTap => (k * k * i, k * k * o),
        UnfoldKind::TapsInColumns => (i, k * k * o),
        UnfoldKind::PerKernelColumn => (k * k * i, k * o),
        UnfoldKind::KernelColumnsInColumns => (k * i, k * o),
        UnfoldKind::Im2col => (k * k * i, o),
    }
}

pub fn simulate(kind: UnfoldKind, g: &WindowGeom) -> Counters {
    // A 1×1 kernel has a single tap, so every kind degenerates to the
    // window-by-window (I,O,1) matrix.
    let kind = if g.kh == 1 { UnfoldKind::Im2col } else { kind };
    let (i, o, k) = (g.c_in as u64, g.c_out as u64, g.kh);
    let (hp, wp) = (g.in_h + 2 * g.pad, g.in_w + 2 * g.pad);
    let mut c = Counters { cycles: 0, loads: 0, extra: 0 };
    match walk_of(kind) {
        Walk::WindowRowBuffer | Walk::ColumnStream => {
            for oy in 0..g.out_h {
                let mut rows: BTreeSet<usize> = BTreeSet::new();
                for _ox in 0..g.out_w {
                    for kr in 0..k {
                        // Touching any pixel of a padded row pulls in the whole row.
                        if rows.insert(oy * g.stride + kr) {
                            c.loads += wp as u64 * i;
                        }
                    }
                    if let Walk::WindowRowBuffer = walk_of(kind) {
                        c.cycles += 1;
                    }
                }
                if let Walk::ColumnStream = walk_of(kind) {
                    for _x in 0..wp {
                        c.cycles += 1;
                    }
                }
            }
        }
        Walk::PixelStream => {
            let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
            for y in 0..hp {
                for x in 0..wp {
                    if seen.insert((y, x)) {
                        c.loads += i;
                    }
                    c.cycles += 1;
                }
            }
        }
        Walk::WindowGather => {
            for _oy in 0..g.out_h {
                for _ox in 0..g.out_w {
                    for _kr in 0..k {
                        for _kc in 0..k {
                            c.loads += i;
                        }
                    }
                    c.cycles += 1;
                }
            }
        }
    }
    let (inb, outb) = buffers(kind, i, o, k as u64);
    c.extra = inb + outb;
    c
}

pub fn random_geom(rng: &mut ChaCha8Rng) -> WindowGeom {
    let k = [1, 2, 3, 5][rng.gen_range(0..4)];
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=k / 2);
    let in_h = rng.gen_range(k..=14);
    let in_w = rng.gen_range(k..=14);
    WindowGeom {
        c_in: rng.gen_range(1..=9),
        c_out: rng.gen_range(1..=17),
        kh: k,
        kw: k,
        stride,
        pad,
        in_h,
        in_w,
        out_h: conv_out(in_h, k, stride, pad),
        out_w: conv_out(in_w, k, stride, pad),
        is_fc: false,
    }
}
