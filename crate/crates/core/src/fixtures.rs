//! Small built-in networks used by tests, benches and `pimc export-fixture`.
//!
//! Weights are drawn from a seeded ChaCha stream so every fixture is
//! reproducible. Tensors are pixel-major: element `(y, x, c)` of a `C×H×W`
//! map lives at `(y·W + x)·C + c`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hw::HardwareConfig;
use crate::ir::{
    Activation, ConvParams, FcParams, Fmap, LayerId, LayerNode, LayerParams, LayerWeights, OpKind, PoolParams, Shape, StructureGraph,
    WeightStore,
};

pub const FIXTURES: [&str; 7] = ["one_conv", "wide_conv", "conv_pool_fc", "vgg8_small", "resnet_block", "branchy8", "two_pointwise"];

/// Fixtures that the functional checks run end to end on `desk_tiny`.
pub const FUNCTIONAL_FIXTURES: [&str; 4] = ["one_conv", "conv_pool_fc", "vgg8_small", "resnet_block"];

struct Builder {
    layers: Vec<LayerNode>,
    shapes: Vec<Shape>,
    input: Shape,
}

impl Builder {
    fn new(input: Shape) -> Self {
        Builder { layers: Vec::new(), shapes: Vec::new(), input }
    }

    fn shape_of(&self, preds: &[LayerId]) -> Shape {
        preds.first().map_or(self.input, |&p| self.shapes[p])
    }

    fn push(&mut self, op: OpKind, params: LayerParams, act: Activation, preds: &[LayerId], out: Shape) -> LayerId {
        let id = self.layers.len();
        self.layers.push(LayerNode { id, op, params, fused_activation: act, preds: preds.to_vec(), succs: vec![] });
        self.shapes.push(out);
        id
    }

    fn conv(&mut self, preds: &[LayerId], o: usize, k: usize, s: usize, p: usize, act: Activation) -> LayerId {
        let i = self.shape_of(preds);
        let c = ConvParams::same_style(i.c, o, k, s, p, Fmap::new(i.h, i.w));
        self.push(OpKind::Conv, LayerParams::Conv(c), act, preds, Shape::new(o, c.output.h, c.output.w))
    }

    fn fc(&mut self, preds: &[LayerId], o: usize, act: Activation) -> LayerId {
        let i = self.shape_of(preds);
        let f = FcParams { in_features: i.numel(), out_features: o };
        self.push(OpKind::Fc, LayerParams::Fc(f), act, preds, Shape::new(o, 1, 1))
    }

    fn pool(&mut self, preds: &[LayerId], k: usize, s: usize) -> LayerId {
        let i = self.shape_of(preds);
        let out = Fmap::new(crate::ir::conv_out(i.h, k, s, 0), crate::ir::conv_out(i.w, k, s, 0));
        let p = PoolParams { kernel: k, stride: s, padding: 0, input: Fmap::new(i.h, i.w), output: out };
        self.push(OpKind::Pool, LayerParams::Pool(p), Activation::None, preds, Shape::new(i.c, out.h, out.w))
    }

    fn add(&mut self, preds: &[LayerId], act: Activation) -> LayerId {
        let i = self.shape_of(preds);
        self.push(OpKind::EltwiseAdd, LayerParams::None, act, preds, i)
    }

    fn concat(&mut self, preds: &[LayerId]) -> LayerId {
        let i = self.shape_of(preds);
        let c = preds.iter().map(|&p| self.shapes[p].c).sum();
        self.push(OpKind::Concat, LayerParams::None, Activation::None, preds, Shape::new(c, i.h, i.w))
    }

    fn finish(self, name: &str) -> StructureGraph {
        StructureGraph::new(name, self.input, self.layers).expect("fixture graphs are valid")
    }
}

const RELU: Activation = Activation::Relu;
const NONE: Activation = Activation::None;

pub fn graph(name: &str) -> Result<StructureGraph> {
    let g = match name {
        "one_conv" => {
            let mut b = Builder::new(Shape::new(2, 5, 5));
            b.conv(&[], 4, 3, 1, 1, NONE);
            b.finish(name)
        }
        "wide_conv" => {
            // Many sliding windows per weight: compute bound under HT.
            let mut b = Builder::new(Shape::new(2, 8, 8));
            b.conv(&[], 4, 3, 1, 1, NONE);
            b.finish(name)
        }
        "conv_pool_fc" => {
            let mut b = Builder::new(Shape::new(1, 6, 6));
            let c = b.conv(&[], 4, 3, 1, 1, RELU);
            let p = b.pool(&[c], 2, 2);
            b.fc(&[p], 5, NONE);
            b.finish(name)
        }
        "vgg8_small" => {
            let mut b = Builder::new(Shape::new(1, 12, 12));
            let mut x = b.conv(&[], 2, 3, 1, 1, RELU);
            for s in [2, 1, 2, 1, 2] {
                x = b.conv(&[x], 2, 3, s, 1, RELU);
            }
            let f = b.fc(&[x], 8, RELU);
            b.fc(&[f], 4, NONE);
            b.finish(name)
        }
        "resnet_block" => {
            let mut b = Builder::new(Shape::new(2, 6, 6));
            let stem = b.conv(&[], 2, 1, 1, 0, NONE);
            let a = b.conv(&[stem], 2, 3, 1, 1, RELU);
            let c = b.conv(&[a], 2, 3, 1, 1, NONE);
            b.add(&[stem, c], RELU);
            b.finish(name)
        }
        "branchy8" => {
            // A long head layer, two cheap pools, three parallel branches
            // and a short tail, so that grouping halves the stage count.
            let mut b = Builder::new(Shape::new(4, 8, 8));
            let c0 = b.conv(&[], 4, 3, 1, 1, RELU);
            let p0 = b.pool(&[c0], 1, 1);
            let p1 = b.pool(&[p0], 1, 1);
            let c1 = b.conv(&[p1], 4, 3, 1, 1, RELU);
            let c2 = b.conv(&[p1], 4, 3, 1, 1, RELU);
            let c3 = b.conv(&[p1], 4, 3, 1, 1, RELU);
            let c4 = b.conv(&[c1], 4, 1, 1, 0, RELU);
            b.concat(&[c4, c2, c3]);
            b.finish(name)
        }
        "two_pointwise" => {
            let mut b = Builder::new(Shape::new(8, 4, 4));
            let a = b.conv(&[], 16, 1, 1, 0, RELU);
            b.conv(&[a], 32, 1, 1, 0, NONE);
            b.finish(name)
        }
        _ => return Err(Error::Parse(format!("unknown fixture '{name}' (known: {})", FIXTURES.join(", ")))),
    };
    Ok(g)
}

fn seed_of(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Uniform weights in `[-0.5, 0.5)` and biases in `[-0.25, 0.25)`.
pub fn random_weights(g: &StructureGraph, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::default();
    for l in g.layers() {
        let (w, o) = match l.params {
            LayerParams::Conv(c) => {
                let n = c.out_channels * c.in_channels * c.kernel * c.kernel;
                let data = (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
                (LayerWeights::conv(c.out_channels, c.in_channels, c.kernel, data), c.out_channels)
            }
            LayerParams::Fc(f) => {
                let data = (0..f.in_features * f.out_features).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
                (LayerWeights::fc(f.out_features, f.in_features, data), f.out_features)
            }
            _ => continue,
        };
        let bias = (0..o).map(|_| rng.gen_range(-0.25f32..0.25)).collect();
        store.insert(l.id, w.with_bias(bias));
    }
    store
}

pub fn weights(name: &str) -> Result<WeightStore> {
    Ok(random_weights(&graph(name)?, seed_of(name)))
}

/// Input sample `index` of a fixture, values in `[0, 1)`.
pub fn input(g: &StructureGraph, index: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_of(g.name()) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..g.input_shape().numel()).map(|_| rng.gen_range(0f32..1.0)).collect()
}

/// Two cores of four 16×16 crossbars: room for exactly eight logical arrays.
pub fn pair_hardware() -> HardwareConfig {
    let mut cfg = HardwareConfig::preset("desk_tiny").expect("preset exists");
    cfg.name = "pair".into();
    cfg.crossbars_x = 2;
    cfg.crossbars_y = 2;
    cfg
}
