//! Joint replication and placement search.
//!
//! A chromosome has `slots_per_core` genes per core; gene value
//! `layer_index · 10000 + ag_count` puts `ag_count` AGs of the layer on the
//! gene's core (0 marks an empty slot). A layer's total AG count across all
//! genes is a whole number of replicas. Decoding hands out AGs replica-major
//! in core order, so a replica may straddle cores.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hw::HardwareConfig;
use crate::ir::{LayerId, StructureGraph};
use crate::partition::LayerPartition;

pub const GENE_BASE: u32 = 10000;
const MAX_AGS_PER_GENE: usize = 9999;
const RETRIES: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GaLayer {
    pub layer: LayerId,
    /// Code used in gene values: topological position plus one.
    pub code: u32,
    pub ags_per_replica: usize,
    pub arrays_per_ag: usize,
}

/// Static description of the search space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GaProblem {
    pub layers: Vec<GaLayer>,
    pub cores: usize,
    pub slots_per_core: usize,
    /// Logical arrays per core.
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Chromosome {
    pub genes: Vec<u32>,
}

impl GaProblem {
    /// `max_layers_per_core` bounds the genes per core; `None` allows every
    /// weighted layer on every core.
    pub fn new(
        g: &StructureGraph,
        parts: &BTreeMap<LayerId, LayerPartition>,
        cfg: &HardwareConfig,
        max_layers_per_core: Option<usize>,
    ) -> Result<Self> {
        let order = g.topo_order()?;
        let layers: Vec<GaLayer> = order
            .iter()
            .enumerate()
            .filter_map(|(pos, id)| {
                parts.get(id).map(|p| GaLayer {
                    layer: *id,
                    code: pos as u32 + 1,
                    ags_per_replica: p.ags_per_replica(),
                    arrays_per_ag: p.arrays_per_ag,
                })
            })
            .collect();
        let d = cfg.derive();
        let slots_per_core = max_layers_per_core.unwrap_or(layers.len()).clamp(1, layers.len().max(1));
        let p = GaProblem { slots_per_core, layers, cores: d.total_cores, capacity: d.logical_arrays_per_core };
        let needed: usize = p.layers.iter().map(|l| l.ags_per_replica * l.arrays_per_ag).sum();
        if needed > p.cores * p.capacity {
            return Err(Error::Capacity { needed, available: p.cores * p.capacity });
        }
        if let Some(l) = p.layers.iter().find(|l| l.arrays_per_ag > p.capacity) {
            return Err(Error::Capacity { needed: l.arrays_per_ag, available: p.capacity });
        }
        Ok(p)
    }

    fn by_code(&self, code: u32) -> Option<usize> {
        self.layers.iter().position(|l| l.code == code)
    }

    pub fn gene(&self, layer_idx: usize, ags: usize) -> u32 {
        if ags == 0 {
            0
        } else {
            self.layers[layer_idx].code * GENE_BASE + ags as u32
        }
    }

    /// `(layer position in self.layers, ag count)` of a non-empty gene.
    pub fn split_gene(&self, gene: u32) -> Option<(usize, usize)> {
        if gene == 0 {
            return None;
        }
        self.by_code(gene / GENE_BASE).map(|i| (i, (gene % GENE_BASE) as usize))
    }

    pub fn core_of(&self, pos: usize) -> usize {
        pos / self.slots_per_core
    }

    pub fn empty(&self) -> Chromosome {
        Chromosome { genes: vec![0; self.cores * self.slots_per_core] }
    }

    fn core_genes<'a>(&self, c: &'a Chromosome, core: usize) -> &'a [u32] {
        &c.genes[core * self.slots_per_core..(core + 1) * self.slots_per_core]
    }

    pub fn core_usage(&self, c: &Chromosome, core: usize) -> usize {
        self.core_genes(c, core).iter().filter_map(|&g| self.split_gene(g)).map(|(l, n)| n * self.layers[l].arrays_per_ag).sum()
    }

    pub fn layer_total(&self, c: &Chromosome, layer_idx: usize) -> usize {
        c.genes.iter().filter_map(|&g| self.split_gene(g)).filter(|&(l, _)| l == layer_idx).map(|(_, n)| n).sum()
    }

    pub fn replication(&self, c: &Chromosome, layer_idx: usize) -> usize {
        self.layer_total(c, layer_idx) / self.layers[layer_idx].ags_per_replica
    }

    /// Slot holding `layer_idx` on `core`, if any.
    fn find_slot(&self, c: &Chromosome, core: usize, layer_idx: usize) -> Option<usize> {
        let base = core * self.slots_per_core;
        (base..base + self.slots_per_core).find(|&p| self.split_gene(c.genes[p]).is_some_and(|(l, _)| l == layer_idx))
    }

    fn free_slot(&self, c: &Chromosome, core: usize) -> Option<usize> {
        let base = core * self.slots_per_core;
        (base..base + self.slots_per_core).find(|&p| c.genes[p] == 0)
    }

    /// Adds `n` AGs of a layer to a core, merging with an existing gene.
    fn add_ags(&self, c: &mut Chromosome, core: usize, layer_idx: usize, n: usize) -> bool {
        if n == 0 {
            return true;
        }
        let slot = self.find_slot(c, core, layer_idx).or_else(|| self.free_slot(c, core));
        match slot {
            Some(p) => {
                let have = self.split_gene(c.genes[p]).map_or(0, |(_, k)| k);
                if have + n > MAX_AGS_PER_GENE {
                    return false;
                }
                c.genes[p] = self.gene(layer_idx, have + n);
                true
            }
            None => false,
        }
    }

    /// All chromosome invariants; returns the first violation.
    pub fn check(&self, c: &Chromosome) -> std::result::Result<(), String> {
        if c.genes.len() != self.cores * self.slots_per_core {
            return Err(format!("chromosome has {} genes, expected {}", c.genes.len(), self.cores * self.slots_per_core));
        }
        for (pos, &g) in c.genes.iter().enumerate() {
            if g != 0 {
                match self.split_gene(g) {
                    None => return Err(format!("gene {pos} names unknown layer code {}", g / GENE_BASE)),
                    Some((_, 0)) => return Err(format!("gene {pos} has a layer but no AGs")),
                    _ => {}
                }
            }
        }
        for core in 0..self.cores {
            let used = self.core_usage(c, core);
            if used > self.capacity {
                return Err(format!("core {core} uses {used} arrays of {}", self.capacity));
            }
            let mut seen = vec![false; self.layers.len()];
            for (l, _) in self.core_genes(c, core).iter().filter_map(|&g| self.split_gene(g)) {
                if std::mem::replace(&mut seen[l], true) {
                    return Err(format!("core {core} holds two genes of layer {}", self.layers[l].layer));
                }
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            let t = self.layer_total(c, i);
            if t == 0 || !t.is_multiple_of(l.ags_per_replica) {
                return Err(format!("layer {} has {t} AGs, not a positive multiple of {}", l.layer, l.ags_per_replica));
            }
        }
        Ok(())
    }

    pub fn is_legal(&self, c: &Chromosome) -> bool {
        self.check(c).is_ok()
    }

    /// Places one replica of every layer: layers in random order, each
    /// filled first-fit starting from a random core and rotating.
    pub fn random_individual(&self, rng: &mut ChaCha8Rng) -> Result<Chromosome> {
        let mut c = self.empty();
        let mut order: Vec<usize> = (0..self.layers.len()).collect();
        order.shuffle(rng);
        let start = rng.gen_range(0..self.cores);
        for l in order {
            if !self.place_replica(&mut c, l, start) {
                let needed: usize = self.layers.iter().map(|l| l.ags_per_replica * l.arrays_per_ag).sum();
                return Err(Error::Capacity { needed, available: self.cores * self.capacity });
            }
        }
        Ok(c)
    }

    /// First-fit placement of one replica beginning at core `start`.
    fn place_replica(&self, c: &mut Chromosome, l: usize, start: usize) -> bool {
        let info = &self.layers[l];
        let mut left = info.ags_per_replica;
        let mut trial = c.clone();
        for k in 0..self.cores {
            if left == 0 {
                break;
            }
            let core = (start + k) % self.cores;
            let fit = (self.capacity - self.core_usage(&trial, core)) / info.arrays_per_ag;
            let n = fit.min(left);
            if n > 0 && self.add_ags(&mut trial, core, l, n) {
                left -= n;
            }
        }
        if left == 0 {
            *c = trial;
            true
        } else {
            false
        }
    }

    pub fn init_population(&self, size: usize, seed: u64) -> Result<Vec<Chromosome>> {
        (0..size).map(|i| self.random_individual(&mut individual_rng(seed, 0, i as u64))).collect()
    }

    /// Strategy I (resize one gene by whole replicas, or seed an empty slot
    /// with one replica) or strategy II (exchange whole-replica portions of
    /// two genes between their cores), with equal probability. Illegal
    /// proposals are redrawn; after the retry budget the input is returned.
    pub fn mutate(&self, c: &Chromosome, rng: &mut ChaCha8Rng) -> Chromosome {
        for _ in 0..RETRIES {
            let proposal = if rng.gen_bool(0.5) { self.mutate_resize(c, rng) } else { self.mutate_exchange(c, rng) };
            if let Some(p) = proposal {
                if self.is_legal(&p) {
                    return p;
                }
            }
        }
        c.clone()
    }

    fn mutate_resize(&self, c: &Chromosome, rng: &mut ChaCha8Rng) -> Option<Chromosome> {
        let pos = rng.gen_range(0..c.genes.len());
        let core = self.core_of(pos);
        let free = self.capacity - self.core_usage(c, core);
        let mut out = c.clone();
        match self.split_gene(c.genes[pos]) {
            None => {
                let l = rng.gen_range(0..self.layers.len());
                if self.find_slot(c, core, l).is_some() {
                    return None;
                }
                let info = &self.layers[l];
                if info.ags_per_replica * info.arrays_per_ag > free {
                    return None;
                }
                out.genes[pos] = self.gene(l, info.ags_per_replica);
            }
            Some((l, n)) => {
                let info = &self.layers[l];
                let unit = info.ags_per_replica;
                if rng.gen_bool(0.5) {
                    let max = (free / (unit * info.arrays_per_ag)).min((MAX_AGS_PER_GENE - n) / unit);
                    if max == 0 {
                        return None;
                    }
                    out.genes[pos] = self.gene(l, n + unit * rng.gen_range(1..=max));
                } else {
                    let total = self.layer_total(c, l);
                    let max = (n / unit).min(total / unit - 1);
                    if max == 0 {
                        return None;
                    }
                    out.genes[pos] = self.gene(l, n - unit * rng.gen_range(1..=max));
                }
            }
        }
        Some(out)
    }

    fn mutate_exchange(&self, c: &Chromosome, rng: &mut ChaCha8Rng) -> Option<Chromosome> {
        let filled: Vec<usize> = (0..c.genes.len()).filter(|&p| c.genes[p] != 0).collect();
        if filled.len() < 2 {
            return None;
        }
        let a = *filled.choose(rng)?;
        let b = *filled.choose(rng)?;
        let (ca, cb) = (self.core_of(a), self.core_of(b));
        if ca == cb {
            return None;
        }
        let mut out = c.clone();
        for (from, to_core) in [(a, cb), (b, ca)] {
            let (l, n) = self.split_gene(c.genes[from])?;
            let unit = self.layers[l].ags_per_replica;
            if n < unit {
                return None;
            }
            let k = unit * rng.gen_range(1..=n / unit);
            let (_, cur) = self.split_gene(out.genes[from])?;
            out.genes[from] = self.gene(l, cur - k);
            if !self.add_ags(&mut out, to_core, l, k) {
                return None;
            }
        }
        Some(out)
    }

    /// Takes cores `[0, cut)` from `a` and the rest from `b`, then repairs
    /// layer totals to whole replicas. Falls back to `a` if repair fails.
    pub fn crossover(&self, a: &Chromosome, b: &Chromosome, rng: &mut ChaCha8Rng) -> Chromosome {
        if self.cores < 2 {
            return a.clone();
        }
        let cut = rng.gen_range(1..self.cores) * self.slots_per_core;
        let mut child = Chromosome { genes: a.genes[..cut].iter().chain(&b.genes[cut..]).copied().collect() };
        for l in 0..self.layers.len() {
            if !self.repair_layer(&mut child, l) {
                return a.clone();
            }
        }
        if self.is_legal(&child) {
            child
        } else {
            a.clone()
        }
    }

    fn repair_layer(&self, c: &mut Chromosome, l: usize) -> bool {
        let unit = self.layers[l].ags_per_replica;
        let total = self.layer_total(c, l);
        if total >= unit {
            // drop the surplus from the least utilized cores first
            let mut excess = total % unit;
            let mut cores: Vec<usize> = (0..self.cores).collect();
            cores.sort_by_key(|&k| (self.core_usage(c, k), k));
            for core in cores {
                if excess == 0 {
                    break;
                }
                if let Some(pos) = self.find_slot(c, core, l) {
                    let (_, n) = self.split_gene(c.genes[pos]).unwrap();
                    let k = excess.min(n);
                    c.genes[pos] = self.gene(l, n - k);
                    excess -= k;
                }
            }
            return true;
        }
        // below one replica: top up to exactly one
        let mut left = unit - total;
        for core in 0..self.cores {
            let fit = (self.capacity - self.core_usage(c, core)) / self.layers[l].arrays_per_ag;
            let n = fit.min(left);
            if n > 0 && self.add_ags(c, core, l, n) {
                left -= n;
            }
            if left == 0 {
                return true;
            }
        }
        false
    }

    /// Fraction of all logical arrays occupied.
    pub fn utilization(&self, c: &Chromosome) -> f64 {
        let used: usize = (0..self.cores).map(|k| self.core_usage(c, k)).sum();
        used as f64 / (self.cores * self.capacity) as f64
    }

    /// One replica per layer, layer `i` alone on core `i`. `None` when there
    /// are more layers than cores or a layer does not fit one core.
    pub fn one_layer_per_core(&self) -> Option<Chromosome> {
        if self.layers.len() > self.cores {
            return None;
        }
        let mut c = self.empty();
        for (i, l) in self.layers.iter().enumerate() {
            if l.ags_per_replica * l.arrays_per_ag > self.capacity {
                return None;
            }
            c.genes[i * self.slots_per_core] = self.gene(i, l.ags_per_replica);
        }
        Some(c)
    }

    pub fn decode(&self, c: &Chromosome) -> Layout {
        let mut layers = BTreeMap::new();
        for (i, info) in self.layers.iter().enumerate() {
            let mut cores = Vec::new();
            for (pos, &g) in c.genes.iter().enumerate() {
                if let Some((l, n)) = self.split_gene(g) {
                    if l == i {
                        cores.extend(std::iter::repeat_n(self.core_of(pos), n));
                    }
                }
            }
            let replicas = cores.len() / info.ags_per_replica;
            let ag_cores: Vec<Vec<usize>> = cores.chunks(info.ags_per_replica).map(|c| c.to_vec()).collect();
            let homes = ag_cores.iter().map(|cs| majority(cs)).collect();
            layers.insert(info.layer, LayerPlacement { replicas, ag_cores, homes, arrays_per_ag: info.arrays_per_ag });
        }
        Layout { layers }
    }
}

fn majority(cores: &[usize]) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in cores {
        *counts.entry(c).or_default() += 1;
    }
    counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&c, _)| c).unwrap_or(0)
}

/// Placement of one layer's replicas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlacement {
    pub replicas: usize,
    /// `ag_cores[r][a]`: core of AG `a` of replica `r`.
    pub ag_cores: Vec<Vec<usize>>,
    /// Core holding most of each replica's AGs (lowest on ties).
    pub homes: Vec<usize>,
    pub arrays_per_ag: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub layers: BTreeMap<LayerId, LayerPlacement>,
}

impl Layout {
    pub fn replication(&self) -> BTreeMap<LayerId, usize> {
        self.layers.iter().map(|(&l, p)| (l, p.replicas)).collect()
    }
}

pub fn individual_rng(seed: u64, generation: u64, index: u64) -> ChaCha8Rng {
    let mut s = seed ^ 0x5851_f42d_4c95_7f2d;
    for v in [generation, index] {
        s = (s ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(29);
    }
    ChaCha8Rng::seed_from_u64(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GaParams {
    pub pop_size: usize,
    pub max_gens: usize,
    pub seed: u64,
}

impl Default for GaParams {
    fn default() -> Self {
        GaParams { pop_size: 20, max_gens: 50, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaResult {
    pub best: Chromosome,
    pub fitness: f64,
    /// Best-so-far fitness after initialization and after every generation.
    pub trace: Vec<f64>,
    /// Every individual of every generation was legal.
    pub all_legal: bool,
}

const ELITES: usize = 2;
const CROSSOVER_RATE: f64 = 0.9;

fn tournament<'a>(pop: &'a [(Chromosome, f64)], rng: &mut ChaCha8Rng) -> &'a Chromosome {
    let a = rng.gen_range(0..pop.len());
    let b = rng.gen_range(0..pop.len());
    let pick = if pop[b].1 < pop[a].1 || (pop[b].1 == pop[a].1 && b < a) { b } else { a };
    &pop[pick].0
}

fn evaluate<F>(pop: Vec<Chromosome>, cache: &mut HashMap<Chromosome, f64>, fitness: &F) -> Vec<(Chromosome, f64)>
where
    F: Fn(&Chromosome) -> f64 + Sync + Send,
{
    let mut fresh: Vec<Chromosome> = pop.iter().filter(|c| !cache.contains_key(*c)).cloned().collect();
    fresh.sort();
    fresh.dedup();
    let scores = crate::par::map(&fresh, fitness);
    cache.extend(fresh.into_iter().zip(scores));
    pop.into_iter()
        .map(|c| {
            let f = cache[&c];
            (c, f)
        })
        .collect()
}

/// Elitist generational search minimizing `fitness`.
pub fn optimize<F>(problem: &GaProblem, params: &GaParams, fitness: &F) -> Result<GaResult>
where
    F: Fn(&Chromosome) -> f64 + Sync + Send,
{
    let size = params.pop_size.max(ELITES + 1);
    let mut cache = HashMap::new();
    let init = problem.init_population(size, params.seed)?;
    let mut all_legal = init.iter().all(|c| problem.is_legal(c));
    let mut pop = evaluate(init, &mut cache, fitness);
    let rank = |pop: &mut Vec<(Chromosome, f64)>| pop.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    rank(&mut pop);
    let mut trace = vec![pop[0].1];
    for gen in 1..=params.max_gens as u64 {
        let mut next: Vec<Chromosome> = pop.iter().take(ELITES).map(|(c, _)| c.clone()).collect();
        for i in next.len()..size {
            let mut rng = individual_rng(params.seed, gen, i as u64);
            let a = tournament(&pop, &mut rng);
            let child = if rng.gen_bool(CROSSOVER_RATE) {
                let b = tournament(&pop, &mut rng);
                problem.crossover(a, b, &mut rng)
            } else {
                a.clone()
            };
            next.push(problem.mutate(&child, &mut rng));
        }
        all_legal &= next.iter().all(|c| problem.is_legal(c));
        pop = evaluate(next, &mut cache, fitness);
        rank(&mut pop);
        trace.push(pop[0].1);
    }
    let (best, fit) = pop.swap_remove(0);
    Ok(GaResult { best, fitness: fit, trace, all_legal })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_layer() -> GaProblem {
        GaProblem {
            layers: vec![
                GaLayer { layer: 0, code: 1, ags_per_replica: 1, arrays_per_ag: 1 },
                GaLayer { layer: 1, code: 2, ags_per_replica: 1, arrays_per_ag: 2 },
            ],
            cores: 2,
            slots_per_core: 2,
            capacity: 4,
        }
    }

    #[test]
    fn gene_encoding() {
        let p = two_layer();
        assert_eq!(p.gene(0, 1), 10001);
        assert_eq!(p.gene(0, 4), 10004);
        assert_eq!(p.split_gene(20003), Some((1, 3)));
        assert_eq!(p.split_gene(0), None);
    }

    #[test]
    fn init_places_one_replica_each() {
        let p = two_layer();
        for c in p.init_population(30, 3).unwrap() {
            p.check(&c).unwrap();
            assert_eq!((p.replication(&c, 0), p.replication(&c, 1)), (1, 1));
        }
    }

    #[test]
    fn capacity_error_when_model_too_big() {
        let mut p = two_layer();
        p.layers[1].ags_per_replica = 4; // 8 arrays + 1 > 8
        assert!(matches!(p.random_individual(&mut individual_rng(0, 0, 0)), Err(Error::Capacity { .. })));
    }

    #[test]
    fn mutations_stay_legal() {
        let p = two_layer();
        let mut rng = individual_rng(9, 1, 1);
        let mut c = p.random_individual(&mut rng).unwrap();
        for _ in 0..2000 {
            c = p.mutate(&c, &mut rng);
            p.check(&c).unwrap();
        }
    }

    #[test]
    fn saturated_growth_is_identity() {
        let p = GaProblem {
            layers: vec![GaLayer { layer: 0, code: 1, ags_per_replica: 1, arrays_per_ag: 4 }],
            cores: 1,
            slots_per_core: 1,
            capacity: 4,
        };
        let c = Chromosome { genes: vec![10001] };
        let mut rng = individual_rng(1, 1, 1);
        for _ in 0..50 {
            assert_eq!(p.mutate(&c, &mut rng), c);
        }
    }

    #[test]
    fn decode_is_replica_major() {
        let p = GaProblem {
            layers: vec![GaLayer { layer: 5, code: 1, ags_per_replica: 3, arrays_per_ag: 1 }],
            cores: 2,
            slots_per_core: 1,
            capacity: 8,
        };
        let c = Chromosome { genes: vec![10004, 10002] };
        let l = &p.decode(&c).layers[&5];
        assert_eq!(l.replicas, 2);
        assert_eq!(l.ag_cores, vec![vec![0, 0, 0], vec![0, 1, 1]]);
        assert_eq!(l.homes, vec![0, 1]);
    }

    #[test]
    fn optimize_prefers_lower_score_and_is_monotone() {
        let p = two_layer();
        // reward replication of both layers
        let f = |c: &Chromosome| 1.0 / p.replication(c, 0) as f64 + 1.0 / p.replication(c, 1) as f64;
        let r = optimize(&p, &GaParams { pop_size: 12, max_gens: 30, seed: 7 }, &f).unwrap();
        assert!(r.all_legal);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(r.fitness, 1.0 / 4.0 + 1.0 / 2.0);
        assert_eq!(p.utilization(&r.best), 1.0);
        let again = optimize(&p, &GaParams { pop_size: 12, max_gens: 30, seed: 7 }, &f).unwrap();
        assert_eq!(again, r);
    }
}
