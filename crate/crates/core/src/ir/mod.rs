//! Structure IR: network topology plus per-layer parameters, with weights
//! kept in a separate [`WeightStore`].
//!
//! Feature maps are laid out pixel-major (HWC): a pixel is the contiguous
//! vector of all channels at one spatial position. Flattening for FC layers
//! follows the same order.

mod io;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    decode_weights, encode_weights, load_model, load_structure_ir, load_weights, parse_structure_ir, save_model, save_structure_ir,
    save_weights, structure_ir_to_string,
};

pub type LayerId = usize;

pub const IR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OpKind {
    Conv,
    Fc,
    Pool,
    EltwiseAdd,
    Concat,
    Activation,
    Flatten,
    Split,
}

impl OpKind {
    /// Layers whose weights live in crossbar arrays.
    pub fn is_weighted(self) -> bool {
        matches!(self, OpKind::Conv | OpKind::Fc)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fmap {
    pub h: usize,
    pub w: usize,
}

impl Fmap {
    pub fn new(h: usize, w: usize) -> Self {
        Fmap { h, w }
    }
}

/// Channel count and spatial extent of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }
    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub input: Fmap,
    pub output: Fmap,
}

impl ConvParams {
    /// Builds params with the output extent derived from the input.
    pub fn same_style(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, input: Fmap) -> Self {
        let output = Fmap::new(conv_out(input.h, kernel, stride, padding), conv_out(input.w, kernel, stride, padding));
        ConvParams { in_channels, out_channels, kernel, stride, padding, input, output }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcParams {
    pub in_features: usize,
    pub out_features: usize,
}

/// Max pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub input: Fmap,
    pub output: Fmap,
}

/// Channel slice `[start, end)` of the single input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitParams {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerParams {
    Conv(ConvParams),
    Fc(FcParams),
    Pool(PoolParams),
    Split(SplitParams),
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNode {
    pub id: LayerId,
    pub op: OpKind,
    pub params: LayerParams,
    pub fused_activation: Activation,
    pub preds: Vec<LayerId>,
    pub succs: Vec<LayerId>,
}

impl LayerNode {
    pub fn conv(&self) -> Option<&ConvParams> {
        match &self.params {
            LayerParams::Conv(c) => Some(c),
            _ => None,
        }
    }
    pub fn fc(&self) -> Option<&FcParams> {
        match &self.params {
            LayerParams::Fc(f) => Some(f),
            _ => None,
        }
    }
    pub fn pool(&self) -> Option<&PoolParams> {
        match &self.params {
            LayerParams::Pool(p) => Some(p),
            _ => None,
        }
    }
}

pub fn conv_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    if extent + 2 * padding < kernel || stride == 0 {
        return 0;
    }
    (extent + 2 * padding - kernel) / stride + 1
}

/// A validated DAG of layers. Immutable once built; shapes are inferred at
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureGraph {
    name: String,
    input_shape: Shape,
    layers: Vec<LayerNode>,
    shapes: Vec<Shape>,
    inputs: Vec<LayerId>,
    outputs: Vec<LayerId>,
    weights_file: Option<String>,
}

impl StructureGraph {
    /// Validates `layers` and builds the graph. `succs` may be left empty on
    /// every node, in which case they are derived from `preds`; when any node
    /// carries successors they must agree with the predecessor lists.
    pub fn new(name: impl Into<String>, input_shape: Shape, layers: Vec<LayerNode>) -> Result<Self> {
        let declared = layers.iter().any(|l| !l.succs.is_empty());
        Self::build(name.into(), input_shape, layers, declared)
    }

    /// Like [`StructureGraph::new`], but every node's successor list is
    /// treated as declared and must match the predecessor edges exactly.
    pub fn with_declared_successors(name: impl Into<String>, input_shape: Shape, layers: Vec<LayerNode>) -> Result<Self> {
        Self::build(name.into(), input_shape, layers, true)
    }

    fn build(name: String, input_shape: Shape, mut layers: Vec<LayerNode>, any_succs: bool) -> Result<Self> {
        layers.sort_by_key(|l| l.id);
        for pair in layers.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::invalid(pair[0].id, "duplicate layer id"));
            }
        }
        let index: BTreeMap<LayerId, usize> = layers.iter().enumerate().map(|(i, l)| (l.id, i)).collect();
        for l in &layers {
            for p in &l.preds {
                if !index.contains_key(p) {
                    return Err(Error::invalid(l.id, format!("dangling predecessor {p}")));
                }
                if *p == l.id {
                    return Err(Error::Cycle(l.id));
                }
            }
            for s in &l.succs {
                if !index.contains_key(s) {
                    return Err(Error::invalid(l.id, format!("dangling successor {s}")));
                }
            }
        }
        let mut derived: BTreeMap<LayerId, Vec<LayerId>> = layers.iter().map(|l| (l.id, Vec::new())).collect();
        for l in &layers {
            for p in &l.preds {
                derived.get_mut(p).unwrap().push(l.id);
            }
        }
        for l in layers.iter_mut() {
            let d = &derived[&l.id];
            if any_succs {
                let a: BTreeSet<_> = l.succs.iter().collect();
                let b: BTreeSet<_> = d.iter().collect();
                if a != b {
                    return Err(Error::invalid(l.id, format!("successor list {:?} disagrees with predecessor edges {:?}", l.succs, d)));
                }
            }
            l.succs = d.clone();
        }
        let inputs = layers.iter().filter(|l| l.preds.is_empty()).map(|l| l.id).collect();
        let outputs = layers.iter().filter(|l| l.succs.is_empty()).map(|l| l.id).collect();
        let mut g = StructureGraph { name, input_shape, shapes: Vec::new(), layers, inputs, outputs, weights_file: None };
        if g.layers.is_empty() {
            return Err(Error::invalid(None, "graph has no layers"));
        }
        g.topo_order()?;
        g.infer_shapes()?;
        Ok(g)
    }

    pub fn with_weights_file(mut self, file: impl Into<String>) -> Self {
        self.weights_file = Some(file.into());
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }
    pub fn layers(&self) -> &[LayerNode] {
        &self.layers
    }
    pub fn inputs(&self) -> &[LayerId] {
        &self.inputs
    }
    pub fn outputs(&self) -> &[LayerId] {
        &self.outputs
    }
    pub fn weights_file(&self) -> Option<&str> {
        self.weights_file.as_deref()
    }
    pub fn len(&self) -> usize {
        self.layers.len()
    }
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    fn pos(&self, id: LayerId) -> usize {
        self.layers.binary_search_by_key(&id, |l| l.id).unwrap_or_else(|_| panic!("unknown layer id {id}"))
    }

    pub fn contains(&self, id: LayerId) -> bool {
        self.layers.binary_search_by_key(&id, |l| l.id).is_ok()
    }

    pub fn layer(&self, id: LayerId) -> &LayerNode {
        &self.layers[self.pos(id)]
    }

    /// Output shape of a layer.
    pub fn shape(&self, id: LayerId) -> Shape {
        self.shapes[self.pos(id)]
    }

    /// Shapes of the tensors feeding `id`, in predecessor order (the network
    /// input when the layer has no predecessors).
    pub fn input_shapes(&self, id: LayerId) -> Vec<Shape> {
        let l = self.layer(id);
        if l.preds.is_empty() {
            vec![self.input_shape]
        } else {
            l.preds.iter().map(|&p| self.shape(p)).collect()
        }
    }

    /// Number of sliding-window tasks the layer executes: one per output
    /// pixel (a single task for FC and FLATTEN).
    pub fn task_count(&self, id: LayerId) -> usize {
        self.shape(id).pixels()
    }

    /// Topological order with ascending-id tie-break.
    pub fn topo_order(&self) -> Result<Vec<LayerId>> {
        topo_sort(self.layers.iter().map(|l| (l.id, l.preds.as_slice())))
    }

    /// True when a directed path leads from `from` to `to`.
    pub fn reaches(&self, from: LayerId, to: LayerId) -> bool {
        let mut stack = vec![from];
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if seen.insert(n) {
                stack.extend(self.layer(n).succs.iter().copied());
            }
        }
        false
    }

    fn infer_shapes(&mut self) -> Result<()> {
        let order = self.topo_order()?;
        let mut shapes: BTreeMap<LayerId, Shape> = BTreeMap::new();
        for id in order {
            let l = self.layer(id).clone();
            let ins: Vec<Shape> = if l.preds.is_empty() { vec![self.input_shape] } else { l.preds.iter().map(|p| shapes[p]).collect() };
            let s = infer_layer_shape(&l, &ins)?;
            shapes.insert(id, s);
        }
        self.shapes = self.layers.iter().map(|l| shapes[&l.id]).collect();
        Ok(())
    }

    /// Rebuilds the graph after edits, keeping name and input shape.
    fn rebuilt(&self, mut layers: Vec<LayerNode>) -> Result<Self> {
        for l in layers.iter_mut() {
            l.succs.clear();
        }
        let mut g = StructureGraph::new(self.name.clone(), self.input_shape, layers)?;
        g.weights_file = self.weights_file.clone();
        Ok(g)
    }
}

fn single_input(l: &LayerNode, ins: &[Shape]) -> Result<Shape> {
    if ins.len() != 1 {
        return Err(Error::invalid(l.id, format!("{:?} expects one input, got {}", l.op, ins.len())));
    }
    Ok(ins[0])
}

fn infer_layer_shape(l: &LayerNode, ins: &[Shape]) -> Result<Shape> {
    let bad = |msg: String| Error::invalid(l.id, msg);
    match (l.op, &l.params) {
        (OpKind::Conv, LayerParams::Conv(c)) => {
            let s = single_input(l, ins)?;
            if c.kernel == 0 || c.stride == 0 || c.in_channels == 0 || c.out_channels == 0 {
                return Err(bad("conv parameters must be positive".into()));
            }
            if s != Shape::new(c.in_channels, c.input.h, c.input.w) {
                return Err(bad(format!("conv input {:?} does not match producer shape {:?}", (c.in_channels, c.input), s)));
            }
            let oh = conv_out(c.input.h, c.kernel, c.stride, c.padding);
            let ow = conv_out(c.input.w, c.kernel, c.stride, c.padding);
            if (oh, ow) != (c.output.h, c.output.w) || oh == 0 {
                return Err(bad(format!(
                    "conv output {}x{} inconsistent with input/kernel/stride/padding (expected {}x{})",
                    c.output.h, c.output.w, oh, ow
                )));
            }
            Ok(Shape::new(c.out_channels, oh, ow))
        }
        (OpKind::Fc, LayerParams::Fc(f)) => {
            let s = single_input(l, ins)?;
            if s.numel() != f.in_features || f.out_features == 0 {
                return Err(bad(format!("fc expects {} inputs, producer gives {}", f.in_features, s.numel())));
            }
            Ok(Shape::new(f.out_features, 1, 1))
        }
        (OpKind::Pool, LayerParams::Pool(p)) => {
            let s = single_input(l, ins)?;
            if p.kernel == 0 || p.stride == 0 || p.padding >= p.kernel {
                return Err(bad("pool kernel/stride must be positive and padding < kernel".into()));
            }
            if (s.h, s.w) != (p.input.h, p.input.w) {
                return Err(bad(format!("pool input {:?} does not match producer shape {:?}", p.input, s)));
            }
            let oh = conv_out(p.input.h, p.kernel, p.stride, p.padding);
            let ow = conv_out(p.input.w, p.kernel, p.stride, p.padding);
            if (oh, ow) != (p.output.h, p.output.w) || oh == 0 {
                return Err(bad(format!("pool output inconsistent (expected {oh}x{ow})")));
            }
            Ok(Shape::new(s.c, oh, ow))
        }
        (OpKind::EltwiseAdd, LayerParams::None) => {
            if l.preds.len() < 2 {
                return Err(bad("ELTWISE_ADD needs at least two producers".into()));
            }
            if ins.iter().any(|s| *s != ins[0]) {
                return Err(bad(format!("ELTWISE_ADD input shapes differ: {ins:?}")));
            }
            Ok(ins[0])
        }
        (OpKind::Concat, LayerParams::None) => {
            if l.preds.is_empty() {
                return Err(bad("CONCAT needs producers".into()));
            }
            if ins.iter().any(|s| (s.h, s.w) != (ins[0].h, ins[0].w)) {
                return Err(bad(format!("CONCAT spatial extents differ: {ins:?}")));
            }
            Ok(Shape::new(ins.iter().map(|s| s.c).sum(), ins[0].h, ins[0].w))
        }
        (OpKind::Activation, LayerParams::None) => single_input(l, ins),
        (OpKind::Flatten, LayerParams::None) => Ok(Shape::new(single_input(l, ins)?.numel(), 1, 1)),
        (OpKind::Split, LayerParams::Split(sp)) => {
            let s = single_input(l, ins)?;
            if sp.start >= sp.end || sp.end > s.c {
                return Err(bad(format!("split range {}..{} outside {} channels", sp.start, sp.end, s.c)));
            }
            Ok(Shape::new(sp.end - sp.start, s.h, s.w))
        }
        (op, p) => Err(bad(format!("parameters {p:?} do not match op {op:?}"))),
    }
}

/// Kahn's algorithm with a min-heap so ties resolve to the smallest id.
pub fn topo_sort<'a>(nodes: impl Iterator<Item = (LayerId, &'a [LayerId])>) -> Result<Vec<LayerId>> {
    let mut indeg: BTreeMap<LayerId, usize> = BTreeMap::new();
    let mut succ: BTreeMap<LayerId, Vec<LayerId>> = BTreeMap::new();
    for (id, preds) in nodes {
        *indeg.entry(id).or_default() += preds.len();
        for &p in preds {
            succ.entry(p).or_default().push(id);
        }
    }
    let mut heap: BinaryHeap<Reverse<LayerId>> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&i, _)| Reverse(i)).collect();
    let mut order = Vec::with_capacity(indeg.len());
    while let Some(Reverse(n)) = heap.pop() {
        order.push(n);
        for &s in succ.get(&n).map(|v| v.as_slice()).unwrap_or(&[]) {
            let d = indeg.get_mut(&s).unwrap();
            *d -= 1;
            if *d == 0 {
                heap.push(Reverse(s));
            }
        }
    }
    if order.len() != indeg.len() {
        let stuck = indeg.iter().find(|(i, _)| !order.contains(i)).map(|(&i, _)| i).unwrap_or(0);
        return Err(Error::Cycle(stuck));
    }
    Ok(order)
}

/// Absorbs RELU activations into their producer and removes FLATTEN layers
/// that only feed FC layers.
///
/// An activation is fused when its only producer is CONV/FC/ELTWISE_ADD, the
/// producer has no other consumer and carries no activation yet. The FC
/// weights need no rewrite: flattening is pixel-major on both sides.
pub fn fuse_and_eliminate(g: &StructureGraph) -> StructureGraph {
    let mut layers: BTreeMap<LayerId, LayerNode> = g.layers.iter().map(|l| (l.id, l.clone())).collect();
    let order = g.topo_order().expect("validated graph is acyclic");
    let mut removed: BTreeMap<LayerId, LayerId> = BTreeMap::new();

    for id in order {
        let l = layers[&id].clone();
        let victim_of = match l.op {
            OpKind::Activation if l.preds.len() == 1 => {
                let p = &layers[&l.preds[0]];
                let fusable = matches!(p.op, OpKind::Conv | OpKind::Fc | OpKind::EltwiseAdd)
                    && p.fused_activation == Activation::None
                    && p.succs.len() == 1;
                fusable.then_some(p.id)
            }
            OpKind::Flatten if l.preds.len() == 1 && !l.succs.is_empty() => {
                let all_fc = l.succs.iter().all(|s| layers[s].op == OpKind::Fc);
                all_fc.then_some(l.preds[0])
            }
            _ => None,
        };
        let Some(pred) = victim_of else { continue };
        if l.op == OpKind::Activation {
            layers.get_mut(&pred).unwrap().fused_activation = Activation::Relu;
        }
        // rewire: consumers of `id` now read from `pred`
        let succs = l.succs.clone();
        {
            let p = layers.get_mut(&pred).unwrap();
            p.succs.retain(|&s| s != id);
            p.succs.extend(succs.iter().copied());
        }
        for s in &succs {
            let sn = layers.get_mut(s).unwrap();
            for pp in sn.preds.iter_mut() {
                if *pp == id {
                    *pp = pred;
                }
            }
        }
        layers.remove(&id);
        removed.insert(id, pred);
    }
    if removed.is_empty() {
        return g.clone();
    }
    g.rebuilt(layers.into_values().collect()).expect("fusion preserves validity")
}

/// Real-valued weights of one CONV (`O×I×K×K`) or FC (`O×I`) layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl LayerWeights {
    pub fn conv(o: usize, i: usize, k: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), o * i * k * k);
        LayerWeights { dims: vec![o, i, k, k], data, bias: None }
    }
    pub fn fc(o: usize, i: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), o * i);
        LayerWeights { dims: vec![o, i], data, bias: None }
    }
    pub fn with_bias(mut self, bias: Vec<f32>) -> Self {
        self.bias = Some(bias);
        self
    }
}

/// Weight tensors keyed by layer id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    pub layers: BTreeMap<LayerId, LayerWeights>,
}

impl WeightStore {
    pub fn get(&self, id: LayerId) -> Option<&LayerWeights> {
        self.layers.get(&id)
    }
    pub fn insert(&mut self, id: LayerId, w: LayerWeights) {
        self.layers.insert(id, w);
    }

    /// Checks every weighted layer has a tensor of the right shape.
    pub fn validate(&self, g: &StructureGraph) -> Result<()> {
        for l in g.layers() {
            let expected = match l.params {
                LayerParams::Conv(c) => vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
                LayerParams::Fc(f) => vec![f.out_features, f.in_features],
                _ => continue,
            };
            let w = self.get(l.id).ok_or_else(|| Error::invalid(l.id, "missing weights"))?;
            if w.dims != expected || w.data.len() != expected.iter().product::<usize>() {
                return Err(Error::Shape(format!("layer {}: weights {:?}, expected {:?}", l.id, w.dims, expected)));
            }
            if let Some(b) = &w.bias {
                if b.len() != expected[0] {
                    return Err(Error::Shape(format!("layer {}: bias length {} != {}", l.id, b.len(), expected[0])));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_node(id: LayerId, preds: Vec<LayerId>, c: ConvParams) -> LayerNode {
        LayerNode { id, op: OpKind::Conv, params: LayerParams::Conv(c), fused_activation: Activation::None, preds, succs: vec![] }
    }
    fn simple(id: LayerId, op: OpKind, preds: Vec<LayerId>) -> LayerNode {
        LayerNode { id, op, params: LayerParams::None, fused_activation: Activation::None, preds, succs: vec![] }
    }

    #[test]
    fn single_conv_output_extent() {
        let c = ConvParams::same_style(3, 8, 3, 1, 1, Fmap::new(8, 8));
        let g = StructureGraph::new("one", Shape::new(3, 8, 8), vec![conv_node(0, vec![], c)]).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.shape(0), Shape::new(8, 8, 8));
    }

    #[test]
    fn inconsistent_successor_list_rejected() {
        let c = ConvParams::same_style(1, 1, 1, 1, 0, Fmap::new(4, 4));
        let mut a = conv_node(0, vec![], c);
        a.succs = vec![];
        let b = simple(1, OpKind::Activation, vec![0]);
        let mut extra = simple(2, OpKind::Activation, vec![1]);
        extra.succs = vec![];
        // node 1 declares no successor although 2 consumes it
        let mut b2 = b.clone();
        b2.succs = vec![];
        let mut a2 = a.clone();
        a2.succs = vec![1];
        let err = StructureGraph::new("x", Shape::new(1, 4, 4), vec![a2, b2, extra]).unwrap_err();
        assert!(matches!(err, Error::Validation { layer: Some(1), .. }), "{err}");
    }

    #[test]
    fn bad_conv_output_rejected() {
        let mut c = ConvParams::same_style(1, 2, 3, 1, 1, Fmap::new(5, 5));
        c.output = Fmap::new(4, 4);
        let err = StructureGraph::new("x", Shape::new(1, 5, 5), vec![conv_node(0, vec![], c)]).unwrap_err();
        assert!(matches!(err, Error::Validation { layer: Some(0), .. }));
    }

    #[test]
    fn cycle_detected() {
        let a = simple(0, OpKind::Activation, vec![1]);
        let b = simple(1, OpKind::Activation, vec![0]);
        let err = StructureGraph::new("cyc", Shape::new(1, 2, 2), vec![a, b]).unwrap_err();
        assert!(matches!(err, Error::Cycle(_)));
    }

    #[test]
    fn topo_chain_and_diamond() {
        let chain =
            vec![simple(0, OpKind::Activation, vec![]), simple(1, OpKind::Activation, vec![0]), simple(2, OpKind::Activation, vec![1])];
        let g = StructureGraph::new("c", Shape::new(1, 2, 2), chain).unwrap();
        assert_eq!(g.topo_order().unwrap(), vec![0, 1, 2]);

        let diamond = vec![
            simple(0, OpKind::Activation, vec![]),
            simple(2, OpKind::Activation, vec![0]),
            simple(1, OpKind::Activation, vec![0]),
            simple(3, OpKind::EltwiseAdd, vec![1, 2]),
        ];
        let g = StructureGraph::new("d", Shape::new(1, 2, 2), diamond).unwrap();
        assert_eq!(g.topo_order().unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn relu_fused_into_conv() {
        let c = ConvParams::same_style(1, 2, 3, 1, 1, Fmap::new(4, 4));
        let pool = LayerNode {
            id: 2,
            op: OpKind::Pool,
            params: LayerParams::Pool(PoolParams { kernel: 2, stride: 2, padding: 0, input: Fmap::new(4, 4), output: Fmap::new(2, 2) }),
            fused_activation: Activation::None,
            preds: vec![1],
            succs: vec![],
        };
        let g =
            StructureGraph::new("crp", Shape::new(1, 4, 4), vec![conv_node(0, vec![], c), simple(1, OpKind::Activation, vec![0]), pool])
                .unwrap();
        let f = fuse_and_eliminate(&g);
        assert_eq!(f.len(), 2);
        assert_eq!(f.layer(0).fused_activation, Activation::Relu);
        assert_eq!(f.layer(2).preds, vec![0]);
        assert_eq!(f.layer(0).succs, vec![2]);
    }

    #[test]
    fn no_activation_is_identity() {
        let c = ConvParams::same_style(1, 2, 3, 1, 1, Fmap::new(4, 4));
        let g = StructureGraph::new("c", Shape::new(1, 4, 4), vec![conv_node(0, vec![], c)]).unwrap();
        assert_eq!(fuse_and_eliminate(&g), g);
    }

    #[test]
    fn relu_not_fused_when_producer_has_other_consumers() {
        let c = ConvParams::same_style(1, 1, 1, 1, 0, Fmap::new(2, 2));
        let layers = vec![conv_node(0, vec![], c), simple(1, OpKind::Activation, vec![0]), simple(2, OpKind::EltwiseAdd, vec![0, 1])];
        let g = StructureGraph::new("x", Shape::new(1, 2, 2), layers).unwrap();
        let f = fuse_and_eliminate(&g);
        assert_eq!(f.len(), 3);
        assert_eq!(f.layer(0).fused_activation, Activation::None);
    }

    #[test]
    fn flatten_before_fc_eliminated() {
        let c = ConvParams::same_style(1, 2, 1, 1, 0, Fmap::new(2, 2));
        let fc = LayerNode {
            id: 2,
            op: OpKind::Fc,
            params: LayerParams::Fc(FcParams { in_features: 8, out_features: 3 }),
            fused_activation: Activation::None,
            preds: vec![1],
            succs: vec![],
        };
        let g =
            StructureGraph::new("f", Shape::new(1, 2, 2), vec![conv_node(0, vec![], c), simple(1, OpKind::Flatten, vec![0]), fc]).unwrap();
        let f = fuse_and_eliminate(&g);
        assert_eq!(f.len(), 2);
        assert_eq!(f.layer(2).preds, vec![0]);
        assert_eq!(f.input_shapes(2), vec![Shape::new(2, 2, 2)]);
    }
}
