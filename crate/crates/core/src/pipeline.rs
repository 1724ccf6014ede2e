//! End-to-end compilation: partition, layout search, task mapping,
//! scheduling, rewrite passes and physical mapping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{self, PhysicalImage, PhysicalMapping, QuantSpec, QuantizedWeights};
use crate::error::{Error, Result};
use crate::hw::HardwareConfig;
use crate::ir::{LayerId, OpKind, StructureGraph, WeightStore};
use crate::isa::{centralize_comm, lower_exec_model, AgInfo, CoreProgram, NO_LAYER};
use crate::layout::{optimize, Chromosome, GaParams, GaProblem, GaResult, Layout};
use crate::mapping::{allocate, TaskAssignment};
use crate::partition::{partition_graph, LayerPartition, Matrix, UnfoldKind};
use crate::profiler::{self, simulate_timing, MvmEngine, Outputs};
use crate::sched::ht::{group_layers, schedule_ht, singleton_groups};
use crate::sched::ll::{schedule_ll, LlOptions, DEFAULT_TRANSMIT_THRESHOLD};
use crate::sched::{AgTable, Ctx, Schedule};
use crate::Mode;

/// Fitness of a layout the schedulers cannot realize.
pub const INFEASIBLE: f64 = 1e18;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileOptions {
    pub mode: Mode,
    pub ga: GaParams,
    pub max_layers_per_core: Option<usize>,
    pub transmit_threshold: usize,
    /// Forced unfolding kind per layer.
    pub overrides: BTreeMap<LayerId, UnfoldKind>,
    /// HT: merge layers into pipeline groups.
    pub grouping: bool,
    /// HT: per-layer times for grouping instead of slice estimates.
    pub layer_times: Option<BTreeMap<LayerId, f64>>,
    /// Use this layout instead of searching.
    pub layout: Option<Layout>,
    /// Try batching transfers and keep the result if it is not slower.
    pub centralize: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            mode: Mode::Ht,
            ga: GaParams::default(),
            max_layers_per_core: None,
            transmit_threshold: DEFAULT_TRANSMIT_THRESHOLD,
            overrides: BTreeMap::new(),
            grouping: true,
            layer_times: None,
            layout: None,
            centralize: true,
        }
    }
}

/// Cost of a layout as estimated from a reduced schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceEstimate {
    /// Lower is better, in cycles.
    pub score: f64,
    /// Estimated cycles each layer needs per sample.
    pub layer_times: BTreeMap<LayerId, f64>,
}

/// Everything the slice estimate needs besides the layout.
pub struct Problem<'a> {
    pub g: &'a StructureGraph,
    pub parts: &'a BTreeMap<LayerId, LayerPartition>,
    pub quant: &'a QuantizedWeights,
    pub cfg: &'a HardwareConfig,
    pub mode: Mode,
    pub transmit_threshold: usize,
}

impl Problem<'_> {
    /// HT: every layer in its own group, with convolutions reduced to their
    /// middle output row; each layer's busy span per core is scaled back to
    /// the full task count and the score is the busiest core. LL: the full
    /// inference makespan.
    pub fn slice_estimate(&self, layout: &Layout) -> Result<SliceEstimate> {
        let g = self.g;
        let assign = allocate(layout, g, self.mode, self.cfg.total_cores());
        let ags = AgTable::build(self.parts, layout);
        let ctx = Ctx { g, parts: self.parts, layout, assign: &assign, ags: &ags, quant: self.quant, cfg: self.cfg };
        let (sched, kept): (Schedule, BTreeMap<LayerId, usize>) = match self.mode {
            Mode::Ht => {
                let middle = |l: LayerId| -> Option<usize> {
                    let s = g.shape(l);
                    (g.layer(l).op == OpKind::Conv && s.h > 1).then_some(s.h / 2)
                };
                let filter = |l: LayerId, t: usize| middle(l).is_none_or(|row| t / g.shape(l).w == row);
                let sched = schedule_ht(&ctx, &singleton_groups(g), Some(&filter))?;
                let kept =
                    g.layers().iter().map(|l| (l.id, if middle(l.id).is_some() { g.shape(l.id).w } else { g.task_count(l.id) })).collect();
                (sched, kept)
            }
            Mode::Ll => {
                let sched = schedule_ll(&ctx, LlOptions { transmit_threshold: self.transmit_threshold, naive: false })?;
                (sched, g.layers().iter().map(|l| (l.id, g.task_count(l.id))).collect())
            }
        };
        let t = simulate_timing(&sched.programs, &ags.infos, self.cfg)?;
        let mut spans: BTreeMap<(LayerId, usize), (u64, u64)> = BTreeMap::new();
        for (c, p) in sched.programs.iter().enumerate() {
            let end = p.barriers.first().copied().unwrap_or(p.len());
            for (i, inst) in p.instrs[..end].iter().enumerate() {
                let l = inst.layer as LayerId;
                if inst.layer != NO_LAYER && g.contains(l) {
                    let s = t.spans[c][i];
                    let e = spans.entry((l, c)).or_insert((s.start, s.end));
                    e.0 = e.0.min(s.start);
                    e.1 = e.1.max(s.end);
                }
            }
        }
        let mut per_core = vec![0.0f64; self.cfg.total_cores()];
        let mut layer_times: BTreeMap<LayerId, f64> = g.layers().iter().map(|l| (l.id, 0.0)).collect();
        for (&(l, c), &(s, e)) in &spans {
            let scale = g.task_count(l) as f64 / kept[&l].max(1) as f64;
            let busy = (e - s) as f64 * scale;
            per_core[c] += busy;
            let lt = layer_times.get_mut(&l).unwrap();
            *lt = lt.max(busy);
        }
        let score = match self.mode {
            Mode::Ht => per_core.iter().copied().fold(0.0, f64::max),
            Mode::Ll => t.makespan as f64,
        };
        Ok(SliceEstimate { score, layer_times })
    }

    /// GA fitness: the slice score, or [`INFEASIBLE`] when scheduling fails.
    pub fn fitness(&self, ga: &GaProblem, c: &Chromosome) -> f64 {
        self.slice_estimate(&ga.decode(c)).map_or(INFEASIBLE, |e| e.score)
    }
}

/// Result of a compilation.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub graph: StructureGraph,
    pub cfg: HardwareConfig,
    pub options: CompileOptions,
    pub parts: BTreeMap<LayerId, LayerPartition>,
    pub layout: Layout,
    pub ga: Option<GaResult>,
    pub assign: TaskAssignment,
    pub quant: QuantizedWeights,
    pub layer_times: BTreeMap<LayerId, f64>,
    /// Scheduler output before the rewrite passes.
    pub raw: Schedule,
    /// Final programs.
    pub schedule: Schedule,
    pub mapping: PhysicalMapping,
}

/// Batches transfers on every core and keeps the result only when the
/// simulated makespan does not grow.
pub fn centralize_if_faster(programs: &[CoreProgram], threshold: usize, ags: &[AgInfo], cfg: &HardwareConfig) -> Result<Vec<CoreProgram>> {
    let batched: Vec<CoreProgram> = programs.iter().map(|p| centralize_comm(p, threshold, ags)).collect();
    let before = simulate_timing(programs, ags, cfg)?.makespan;
    let after = simulate_timing(&batched, ags, cfg)?.makespan;
    Ok(if after <= before { batched } else { programs.to_vec() })
}

fn apply_passes(s: &Schedule, cfg: &HardwareConfig, threshold: usize, centralize: bool) -> Result<Vec<CoreProgram>> {
    let ags = &s.ags.infos;
    let lowered: Vec<CoreProgram> = s.programs.iter().map(|p| lower_exec_model(p, cfg.exec_model, ags)).collect();
    if centralize {
        centralize_if_faster(&lowered, threshold, ags, cfg)
    } else {
        Ok(lowered)
    }
}

pub fn compile(g: &StructureGraph, weights: &WeightStore, cfg: &HardwareConfig, opts: &CompileOptions) -> Result<Compiled> {
    cfg.validate()?;
    weights.validate(g).map_err(|e| e.in_stage("model"))?;
    let parts = partition_graph(g, cfg, opts.mode, &opts.overrides).map_err(|e| e.in_stage("partition"))?;
    let quant = backend::quantize(weights, &QuantSpec::fit(weights, cfg.weight_bits));
    let problem = Problem { g, parts: &parts, quant: &quant, cfg, mode: opts.mode, transmit_threshold: opts.transmit_threshold };

    let (layout, ga) = match &opts.layout {
        Some(l) => (l.clone(), None),
        None => {
            let ga = GaProblem::new(g, &parts, cfg, opts.max_layers_per_core).map_err(|e| e.in_stage("layout"))?;
            let res = optimize(&ga, &opts.ga, &|c: &Chromosome| problem.fitness(&ga, c)).map_err(|e| e.in_stage("layout"))?;
            if res.fitness >= INFEASIBLE {
                return Err(Error::invalid(None, "no layout could be scheduled within local memory").in_stage("layout"));
            }
            (ga.decode(&res.best), Some(res))
        }
    };

    let assign = allocate(&layout, g, opts.mode, cfg.total_cores());
    let ags = AgTable::build(&parts, &layout);
    let ctx = Ctx { g, parts: &parts, layout: &layout, assign: &assign, ags: &ags, quant: &quant, cfg };
    let (raw, layer_times) = match opts.mode {
        Mode::Ht => {
            let times = match &opts.layer_times {
                Some(t) => t.clone(),
                None => problem.slice_estimate(&layout).map_err(|e| e.in_stage("schedule"))?.layer_times,
            };
            let groups = if opts.grouping { group_layers(g, &times) } else { singleton_groups(g) };
            (schedule_ht(&ctx, &groups, None).map_err(|e| e.in_stage("schedule"))?, times)
        }
        Mode::Ll => {
            let s = schedule_ll(&ctx, LlOptions { transmit_threshold: opts.transmit_threshold, naive: false })
                .map_err(|e| e.in_stage("schedule"))?;
            (s, BTreeMap::new())
        }
    };
    let mut schedule = raw.clone();
    schedule.programs = apply_passes(&raw, cfg, opts.transmit_threshold, opts.centralize).map_err(|e| e.in_stage("passes"))?;
    let mapping = backend::place_physical(&ags.infos, &ags.layers(), cfg).map_err(|e| e.in_stage("backend"))?;
    Ok(Compiled {
        graph: g.clone(),
        cfg: cfg.clone(),
        options: opts.clone(),
        parts,
        layout,
        ga,
        assign,
        quant,
        layer_times,
        raw,
        schedule,
        mapping,
    })
}

impl Compiled {
    /// Scheduling context of this compilation, for rescheduling with other
    /// options.
    pub fn ctx(&self) -> Ctx<'_> {
        Ctx {
            g: &self.graph,
            parts: &self.parts,
            layout: &self.layout,
            assign: &self.assign,
            ags: &self.schedule.ags,
            quant: &self.quant,
            cfg: &self.cfg,
        }
    }

    /// Quantized logical matrix per AG id.
    pub fn matrices(&self) -> Result<Vec<Matrix<i32>>> {
        self.schedule.ags.matrices(&self.parts, &self.quant)
    }

    /// Bit-split images per AG id.
    pub fn images(&self) -> Result<Vec<Vec<PhysicalImage>>> {
        self.matrices()?.iter().map(|m| backend::bit_split(m, &self.cfg)).collect()
    }

    /// Functional outputs per sample through logical or physical MVMs.
    pub fn run(&self, samples: &[Vec<f32>], physical: bool) -> Result<Outputs> {
        if physical {
            let imgs = self.images()?;
            profiler::run_functional(&self.schedule, &self.cfg, &MvmEngine::Physical(&imgs), samples)
        } else {
            let mats = self.matrices()?;
            profiler::run_functional(&self.schedule, &self.cfg, &MvmEngine::Logical(&mats), samples)
        }
    }

    pub fn report(&self, batch: usize) -> Result<profiler::ProfileReport> {
        profiler::ProfileReport::build(self.graph.name(), &self.schedule, &self.cfg, batch)
    }
}
