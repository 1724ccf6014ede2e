mod common;

use pim_compiler::fixtures::{self, FUNCTIONAL_FIXTURES};
use pim_compiler::hw::HardwareConfig;
use pim_compiler::layout::GaParams;
use pim_compiler::pipeline::{compile, CompileOptions, Compiled};
use pim_compiler::Mode;

fn small_opts(mode: Mode) -> CompileOptions {
    CompileOptions { mode, ga: GaParams { pop_size: 8, max_gens: 3, seed: 7 }, ..Default::default() }
}

fn build(name: &str, mode: Mode) -> Compiled {
    let g = fixtures::graph(name).unwrap();
    let w = fixtures::weights(name).unwrap();
    let cfg = HardwareConfig::preset("desk_tiny").unwrap();
    compile(&g, &w, &cfg, &small_opts(mode)).unwrap_or_else(|e| panic!("{name} {mode:?}: {e}"))
}

fn check_against_oracle(c: &Compiled, physical: bool) {
    let g = &c.graph;
    let samples: Vec<Vec<f32>> = (0..3).map(|k| fixtures::input(g, k)).collect();
    let outs = c.run(&samples, physical).unwrap_or_else(|e| panic!("{} run: {e}", g.name()));
    assert_eq!(outs.len(), samples.len());
    for (k, x) in samples.iter().enumerate() {
        let want = common::infer_outputs(g, &c.quant, x);
        for (l, v) in &want {
            let got = outs[k].get(l).unwrap_or_else(|| panic!("{} sample {k}: layer {l} missing", g.name()));
            assert_eq!(got, v, "{} {:?} physical={physical} sample {k} layer {l}", g.name(), c.options.mode);
        }
    }
}

#[test]
fn ht_matches_reference_on_all_functional_fixtures() {
    for name in FUNCTIONAL_FIXTURES {
        let c = build(name, Mode::Ht);
        check_against_oracle(&c, false);
        check_against_oracle(&c, true);
    }
}

#[test]
fn ll_matches_reference_on_all_functional_fixtures() {
    for name in FUNCTIONAL_FIXTURES {
        let c = build(name, Mode::Ll);
        check_against_oracle(&c, false);
        check_against_oracle(&c, true);
    }
}

#[test]
fn ht_without_grouping_matches_reference() {
    for name in ["resnet_block", "vgg8_small"] {
        let g = fixtures::graph(name).unwrap();
        let w = fixtures::weights(name).unwrap();
        let cfg = HardwareConfig::preset("desk_tiny").unwrap();
        let opts = CompileOptions { grouping: false, ..small_opts(Mode::Ht) };
        let c = compile(&g, &w, &cfg, &opts).unwrap();
        check_against_oracle(&c, false);
    }
}

#[test]
fn raw_and_rewritten_programs_agree() {
    for mode in [Mode::Ht, Mode::Ll] {
        let mut c = build("conv_pool_fc", mode);
        let samples = vec![fixtures::input(&c.graph, 9)];
        let rewritten = c.run(&samples, false).unwrap();
        c.schedule = c.raw.clone();
        assert_eq!(c.run(&samples, false).unwrap(), rewritten, "{mode:?}");
    }
}
