//! Assignment of output-pixel tasks to replicas and cores.
//!
//! Every layer produces its output one pixel (all channels) per task, in
//! row-major order over the output map. A weighted layer's task runs on the
//! home core of its replica; other layers run on the vector units of the
//! core that already holds most of their inputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ir::{LayerId, LayerParams, OpKind, StructureGraph};
use crate::layout::Layout;
use crate::Mode;

/// Pseudo layer id of the network input.
pub const NET_INPUT: LayerId = usize::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTasks {
    pub layer: LayerId,
    /// `(replica, core)` per task; aux layers use replica 0.
    pub owner: Vec<(usize, usize)>,
    /// Tasks of each core in execution order.
    pub per_core: BTreeMap<usize, Vec<usize>>,
}

impl LayerTasks {
    fn from_owner(layer: LayerId, owner: Vec<(usize, usize)>) -> Self {
        let mut per_core: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (t, &(_, c)) in owner.iter().enumerate() {
            per_core.entry(c).or_default().push(t);
        }
        LayerTasks { layer, owner, per_core }
    }

    pub fn tasks(&self) -> usize {
        self.owner.len()
    }

    pub fn core(&self, task: usize) -> usize {
        self.owner[task].1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub layers: BTreeMap<LayerId, LayerTasks>,
}

impl TaskAssignment {
    /// Core producing pixel `pixel` of `layer`.
    pub fn pixel_core(&self, layer: LayerId, pixel: usize) -> usize {
        self.layers[&layer].core(pixel)
    }
}

/// Input pixels read by task `t` of layer `id`, as `(producer, pixel)`.
/// Padding positions are omitted; window order is row-major.
pub fn task_inputs(g: &StructureGraph, id: LayerId, t: usize) -> Vec<(LayerId, usize)> {
    let l = g.layer(id);
    let src = |k: usize| l.preds.get(k).copied().unwrap_or(NET_INPUT);
    let out = g.shape(id);
    let (oy, ox) = (t / out.w, t % out.w);
    let window = |k: usize, s: usize, p: usize, in_w: usize, in_h: usize| {
        let mut v = Vec::new();
        for kr in 0..k {
            for kc in 0..k {
                let y = (oy * s + kr) as isize - p as isize;
                let x = (ox * s + kc) as isize - p as isize;
                if y >= 0 && x >= 0 && (y as usize) < in_h && (x as usize) < in_w {
                    v.push((src(0), y as usize * in_w + x as usize));
                }
            }
        }
        v
    };
    match (l.op, &l.params) {
        (OpKind::Conv, LayerParams::Conv(c)) => window(c.kernel, c.stride, c.padding, c.input.w, c.input.h),
        (OpKind::Pool, LayerParams::Pool(p)) => window(p.kernel, p.stride, p.padding, p.input.w, p.input.h),
        (OpKind::Fc, _) | (OpKind::Flatten, _) => {
            let n = g.input_shapes(id)[0].pixels();
            (0..n).map(|p| (src(0), p)).collect()
        }
        _ => {
            let n = l.preds.len().max(1);
            (0..n).map(|k| (src(k), t)).collect()
        }
    }
}

/// Largest-remainder split of `n` items by `weights` (ties to the lower
/// index).
pub fn proportional_split(n: usize, weights: &[usize]) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    if total == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| n * w / total).collect();
    let mut rem: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, &w)| (n * w % total, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - out.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        out[i] += 1;
    }
    out
}

fn weighted_ht(layout: &Layout, g: &StructureGraph, id: LayerId) -> LayerTasks {
    let p = &layout.layers[&id];
    let n = g.task_count(id);
    let mut by_core: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, &h) in p.homes.iter().enumerate() {
        by_core.entry(h).or_default().push(r);
    }
    let cores: Vec<usize> = by_core.keys().copied().collect();
    let counts = proportional_split(n, &cores.iter().map(|c| by_core[c].len()).collect::<Vec<_>>());
    let mut owner = Vec::with_capacity(n);
    for (c, cnt) in cores.iter().zip(counts) {
        let reps = &by_core[c];
        for k in 0..cnt {
            owner.push((reps[k % reps.len()], *c));
        }
    }
    LayerTasks::from_owner(id, owner)
}

fn weighted_ll(layout: &Layout, g: &StructureGraph, id: LayerId) -> LayerTasks {
    let p = &layout.layers[&id];
    let owner = (0..g.task_count(id)).map(|t| (t % p.replicas, p.homes[t % p.replicas])).collect();
    LayerTasks::from_owner(id, owner)
}

fn aux(g: &StructureGraph, id: LayerId, done: &BTreeMap<LayerId, LayerTasks>, cores: usize) -> LayerTasks {
    let n = g.task_count(id);
    let l = g.layer(id);
    if l.preds.is_empty() {
        let counts = proportional_split(n, &vec![1; cores]);
        let owner = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n((0, c), k)).collect();
        return LayerTasks::from_owner(id, owner);
    }
    let owner = (0..n)
        .map(|t| {
            let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
            for (src, px) in task_inputs(g, id, t) {
                *votes.entry(done[&src].core(px)).or_default() += 1;
            }
            let core = votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map_or(0, |(&c, _)| c);
            (0, core)
        })
        .collect();
    LayerTasks::from_owner(id, owner)
}

/// Assigns every task of every layer, in topological order.
pub fn allocate(layout: &Layout, g: &StructureGraph, mode: Mode, cores: usize) -> TaskAssignment {
    let mut layers = BTreeMap::new();
    for id in g.topo_order().expect("validated graph is acyclic") {
        let t = if g.layer(id).op.is_weighted() {
            match mode {
                Mode::Ht => weighted_ht(layout, g, id),
                Mode::Ll => weighted_ll(layout, g, id),
            }
        } else {
            aux(g, id, &layers, cores)
        };
        layers.insert(id, t);
    }
    TaskAssignment { layers }
}
