mod common;

use common::unfold::{random_geom, simulate, Counters};
use pim_compiler::ir::conv_out;
use pim_compiler::partition::{enumerate_for_geom, UnfoldKind, WindowGeom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn cost_model_matches_sliding_window_counters() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let g = random_geom(&mut rng);
        let formats = enumerate_for_geom(&g);
        assert_eq!(formats.len(), 5);
        for f in formats {
            let want = simulate(f.kind, &g);
            let got = Counters { cycles: f.compute_cycles, loads: f.load_volume, extra: f.extra_memory };
            assert_eq!(got, want, "case {case} {:?} {g:?}", f.kind);
            assert_eq!(f.h * f.w * f.p, g.c_in * g.c_out * g.kh * g.kw, "case {case} {:?}", f.kind);
        }
    }
}

#[test]
fn square_unpadded_case_matches_closed_forms() {
    // Without padding the counters reduce to the textbook expressions in
    // the input and output extents.
    let (i, o, k, fin) = (3u64, 64u64, 3usize, 32usize);
    let fout = conv_out(fin, k, 1, 0) as u64;
    let g = WindowGeom {
        c_in: 3,
        c_out: 64,
        kh: k,
        kw: k,
        stride: 1,
        pad: 0,
        in_h: fin,
        in_w: fin,
        out_h: fout as usize,
        out_w: fout as usize,
        is_fc: false,
    };
    let fin = fin as u64;
    let k = k as u64;
    let table = [
        (UnfoldKind::PerTap, fout * fout, fin * fout * k * i, k * k * i + k * k * o),
        (UnfoldKind::TapsInColumns, fin * fin, fin * fin * i, i + k * k * o),
        (UnfoldKind::PerKernelColumn, fout * fout, fin * fout * k * i, k * k * i + k * o),
        (UnfoldKind::KernelColumnsInColumns, fin * fout, fin * fout * k * i, k * i + k * o),
        (UnfoldKind::Im2col, fout * fout, fout * fout * k * k * i, k * k * i + o),
    ];
    for (f, (kind, cyc, load, extra)) in enumerate_for_geom(&g).iter().zip(table) {
        assert_eq!(f.kind, kind);
        assert_eq!((f.compute_cycles, f.load_volume, f.extra_memory), (cyc, load, extra), "{kind:?}");
    }
}
