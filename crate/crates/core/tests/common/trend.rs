use std::collections::BTreeMap;

use pim_compiler::fixtures;
use pim_compiler::hw::HardwareConfig;
use pim_compiler::layout::{GaProblem, Layout};
use pim_compiler::partition::{partition_graph, UnfoldKind};
use pim_compiler::pipeline::{compile, CompileOptions};
use pim_compiler::profiler::{time_schedule, TimingSummary};
use pim_compiler::Mode;

/// Layer `layer_idx` of the search space with `replicas` copies, each on
/// its own core; every other layer once on core 0.
pub fn layout_with(name: &str, cfg: &HardwareConfig, overrides: &BTreeMap<usize, UnfoldKind>, layer_idx: usize, replicas: usize) -> Layout {
    let g = fixtures::graph(name).unwrap();
    let parts = partition_graph(&g, cfg, Mode::Ht, overrides).unwrap();
    let ga = GaProblem::new(&g, &parts, cfg, None).unwrap();
    let mut c = ga.empty();
    for (i, l) in ga.layers.iter().enumerate() {
        let copies = if i == layer_idx { replicas } else { 1 };
        for r in 0..copies {
            c.genes[r * ga.slots_per_core + i] = ga.gene(i, l.ags_per_replica);
        }
    }
    ga.check(&c).unwrap();
    ga.decode(&c)
}

pub struct Run<'a> {
    pub name: &'a str,
    pub overrides: BTreeMap<usize, UnfoldKind>,
    pub grouping: bool,
    pub times: Option<BTreeMap<usize, f64>>,
}

/// Timing of an HT compilation over a batch of 4.
pub fn ht_timing(run: &Run, cfg: &HardwareConfig, layout: Layout) -> TimingSummary {
    let g = fixtures::graph(run.name).unwrap();
    let w = fixtures::weights(run.name).unwrap();
    let opts = CompileOptions {
        mode: Mode::Ht,
        layout: Some(layout),
        grouping: run.grouping,
        layer_times: run.times.clone(),
        overrides: run.overrides.clone(),
        ..Default::default()
    };
    let c = compile(&g, &w, cfg, &opts).unwrap();
    time_schedule(&c.schedule, cfg, 4).unwrap()
}

/// Relative layer times of the eight-layer branchy network.
pub fn branchy_times() -> BTreeMap<usize, f64> {
    BTreeMap::from([(0, 1.0), (1, 0.4), (2, 0.4), (3, 0.8), (4, 0.8), (5, 0.8), (6, 0.5), (7, 0.3)])
}
