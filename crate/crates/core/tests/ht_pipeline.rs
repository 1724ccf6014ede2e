use pim_compiler::fixtures::{self, FIXTURES};
use pim_compiler::hw::HardwareConfig;
use pim_compiler::layout::GaParams;
use pim_compiler::pipeline::{compile, CompileOptions, Compiled};
use pim_compiler::profiler::{check_pipeline, simulate_timing};
use pim_compiler::sched::ht::schedule_ht;
use pim_compiler::Mode;

fn compile_ht(name: &str, grouping: bool) -> Compiled {
    let g = fixtures::graph(name).unwrap();
    let w = fixtures::weights(name).unwrap();
    let cfg = HardwareConfig::preset(if name == "branchy8" { "desk_small" } else { "desk_tiny" }).unwrap();
    let opts = CompileOptions { mode: Mode::Ht, grouping, ga: GaParams { pop_size: 8, max_gens: 3, seed: 5 }, ..Default::default() };
    compile(&g, &w, &cfg, &opts).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn dependent_layers_of_different_groups_never_share_a_compute_phase() {
    for name in FIXTURES {
        for grouping in [true, false] {
            let c = compile_ht(name, grouping);
            for s in [&c.raw, &c.schedule] {
                let v = check_pipeline(s);
                assert!(v.is_empty(), "{name} grouping={grouping}: {v:?}");
            }
        }
    }
}

#[test]
fn compute_phase_ends_before_boundary_phase_starts() {
    for name in FIXTURES {
        let c = compile_ht(name, true);
        let s = &c.schedule;
        let t = simulate_timing(&s.programs, &s.ags.infos, &c.cfg).unwrap();
        let cut = t.barrier_times[0];
        for (core, p) in s.programs.iter().enumerate() {
            let b = p.barriers[0];
            for i in 0..p.len() {
                let span = t.spans[core][i];
                if i < b {
                    assert!(span.end <= cut, "{name} core {core} instr {i} ends at {} after the barrier at {cut}", span.end);
                } else {
                    assert!(span.start >= cut, "{name} core {core} instr {i} starts at {} before the barrier at {cut}", span.start);
                }
            }
        }
    }
}

#[test]
fn relabelled_groups_are_caught() {
    // One group lets every layer feed its successors inside the compute
    // phase; claiming the layers sit in separate groups must then fail.
    let c = compile_ht("conv_pool_fc", true);
    let order = c.graph.topo_order().unwrap();
    let one = schedule_ht(&c.ctx(), std::slice::from_ref(&order), None).unwrap();
    assert!(check_pipeline(&one).is_empty());
    let mut split = one.clone();
    split.groups = order.into_iter().map(|l| vec![l]).collect();
    assert!(!check_pipeline(&split).is_empty());
}
