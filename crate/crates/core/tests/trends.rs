mod common;

use std::collections::BTreeMap;

use common::trend::{branchy_times, ht_timing, layout_with, Run};
use pim_compiler::fixtures;
use pim_compiler::hw::HardwareConfig;
use pim_compiler::layout::GaProblem;
use pim_compiler::partition::{partition_graph, UnfoldKind};
use pim_compiler::sched::ht::group_layers;
use pim_compiler::Mode;

#[test]
fn doubling_replicas_nearly_halves_the_makespan() {
    let cfg = HardwareConfig::preset("desk_tiny").unwrap();
    // The whole window in one array, so each replica fits one core.
    let run = Run { name: "wide_conv", overrides: BTreeMap::from([(0, UnfoldKind::Im2col)]), grouping: true, times: None };
    let one = ht_timing(&run, &cfg, layout_with(run.name, &cfg, &run.overrides, 0, 1));
    let two = ht_timing(&run, &cfg, layout_with(run.name, &cfg, &run.overrides, 0, 2));
    let ratio = two.makespan as f64 / one.makespan as f64;
    println!("wide_conv makespan R=1 {} R=2 {} ratio {ratio:.3}", one.makespan, two.makespan);
    assert!(ratio <= 0.6, "ratio {ratio}");
}

#[test]
fn grouping_halves_first_batch_latency() {
    let g = fixtures::graph("branchy8").unwrap();
    let groups = group_layers(&g, &branchy_times());
    assert_eq!(groups, vec![vec![0], vec![1, 2], vec![3, 4, 5], vec![6, 7]]);

    let cfg = HardwareConfig::preset("desk_small").unwrap();
    let parts = partition_graph(&g, &cfg, Mode::Ht, &BTreeMap::new()).unwrap();
    let ga = GaProblem::new(&g, &parts, &cfg, None).unwrap();
    let layout = ga.decode(&ga.one_layer_per_core().unwrap());
    let grouped = Run { name: "branchy8", overrides: BTreeMap::new(), grouping: true, times: Some(branchy_times()) };
    let flat = Run { name: "branchy8", overrides: BTreeMap::new(), grouping: false, times: Some(branchy_times()) };
    let grouped = ht_timing(&grouped, &cfg, layout.clone());
    let flat = ht_timing(&flat, &cfg, layout);
    let (gc, gl, fc, fl) = (grouped.cycle_time, grouped.first_batch_latency, flat.cycle_time, flat.first_batch_latency);
    let ratio = gl as f64 / fl as f64;
    println!("branchy8 cycle {gc} vs {fc}, first batch {gl} vs {fl}, ratio {ratio:.3}");
    assert!((ratio - 0.5).abs() <= 0.05 * 0.5, "ratio {ratio}");
}
