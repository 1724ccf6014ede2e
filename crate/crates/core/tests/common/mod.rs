//! Reference models shared by the integration tests. Nothing here calls the
//! compiler's own arithmetic, so the tests compare two independent
//! implementations of the same fixed-point definitions:
//!
//! * activations carry 8 fractional bits, rounded half away from zero;
//! * a layer's products accumulate in wrapping 32-bit integers;
//! * the accumulator is shifted right by the layer's weight shift with
//!   round-half-away, then the bias is added, then ReLU if fused;
//! * feature maps are pixel-major (all channels of a pixel contiguous) and
//!   FC inputs flatten in that order.

#![allow(dead_code)]

use std::collections::BTreeMap;

use pim_compiler::backend::QuantizedWeights;
use pim_compiler::ir::{Activation, LayerId, LayerParams, OpKind, StructureGraph};

pub fn round_half_away(v: f64) -> i64 {
    let r = v.abs().floor() + if v.abs().fract() >= 0.5 { 1.0 } else { 0.0 };
    (r as i64) * if v < 0.0 { -1 } else { 1 }
}

pub fn quantize_input(x: &[f32]) -> Vec<i32> {
    x.iter().map(|&v| round_half_away(v as f64 * 256.0) as i32).collect()
}

pub fn shift_round(v: i32, shift: u32) -> i32 {
    if shift == 0 {
        return v;
    }
    let d = (1i64 << shift) as f64;
    round_half_away(v as f64 / d) as i32
}

fn relu_if(act: Activation, v: i32) -> i32 {
    if act == Activation::Relu {
        v.max(0)
    } else {
        v
    }
}

/// Fixed-point inference; returns every layer's output map.
pub fn infer(g: &StructureGraph, q: &QuantizedWeights, input: &[f32]) -> BTreeMap<LayerId, Vec<i32>> {
    let x0 = quantize_input(input);
    let mut maps: BTreeMap<LayerId, Vec<i32>> = BTreeMap::new();
    for id in g.topo_order().unwrap() {
        let l = g.layer(id);
        let ins: Vec<&Vec<i32>> = if l.preds.is_empty() { vec![&x0] } else { l.preds.iter().map(|p| &maps[p]).collect() };
        let in_shapes = g.input_shapes(id);
        let out = g.shape(id);
        let act = l.fused_activation;
        let mut y = vec![0i32; out.numel()];
        match (l.op, &l.params) {
            (OpKind::Conv, LayerParams::Conv(c)) => {
                let w = &q[&id];
                let (ci, s) = (c.in_channels, in_shapes[0]);
                for oy in 0..out.h {
                    for ox in 0..out.w {
                        for o in 0..c.out_channels {
                            let mut acc = 0i32;
                            for kr in 0..c.kernel {
                                for kc in 0..c.kernel {
                                    let iy = (oy * c.stride + kr) as isize - c.padding as isize;
                                    let ix = (ox * c.stride + kc) as isize - c.padding as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= s.h || ix as usize >= s.w {
                                        continue;
                                    }
                                    let px = iy as usize * s.w + ix as usize;
                                    for i in 0..ci {
                                        let wv = w.weights[((o * ci + i) * c.kernel + kr) * c.kernel + kc];
                                        acc = acc.wrapping_add(wv.wrapping_mul(ins[0][px * ci + i]));
                                    }
                                }
                            }
                            let mut v = shift_round(acc, w.shift);
                            if let Some(b) = &w.bias {
                                v = v.wrapping_add(b[o]);
                            }
                            y[(oy * out.w + ox) * out.c + o] = relu_if(act, v);
                        }
                    }
                }
            }
            (OpKind::Fc, LayerParams::Fc(f)) => {
                let w = &q[&id];
                for o in 0..f.out_features {
                    let mut acc = 0i32;
                    for k in 0..f.in_features {
                        acc = acc.wrapping_add(w.weights[o * f.in_features + k].wrapping_mul(ins[0][k]));
                    }
                    let mut v = shift_round(acc, w.shift);
                    if let Some(b) = &w.bias {
                        v = v.wrapping_add(b[o]);
                    }
                    y[o] = relu_if(act, v);
                }
            }
            (OpKind::Pool, LayerParams::Pool(p)) => {
                let s = in_shapes[0];
                for oy in 0..out.h {
                    for ox in 0..out.w {
                        for ch in 0..out.c {
                            let mut m: Option<i32> = None;
                            for kr in 0..p.kernel {
                                for kc in 0..p.kernel {
                                    let iy = (oy * p.stride + kr) as isize - p.padding as isize;
                                    let ix = (ox * p.stride + kc) as isize - p.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                                        let v = ins[0][(iy as usize * s.w + ix as usize) * s.c + ch];
                                        m = Some(m.map_or(v, |a| a.max(v)));
                                    }
                                }
                            }
                            y[(oy * out.w + ox) * out.c + ch] = relu_if(act, m.unwrap_or(0));
                        }
                    }
                }
            }
            (OpKind::EltwiseAdd, _) => {
                for (k, v) in y.iter_mut().enumerate() {
                    *v = relu_if(act, ins.iter().fold(0i32, |a, m| a.wrapping_add(m[k])));
                }
            }
            (OpKind::Concat, _) => {
                let mut k = 0;
                for px in 0..out.pixels() {
                    for (m, s) in ins.iter().zip(&in_shapes) {
                        for ch in 0..s.c {
                            y[k] = relu_if(act, m[px * s.c + ch]);
                            k += 1;
                        }
                    }
                }
            }
            (OpKind::Activation, _) => {
                for (k, v) in y.iter_mut().enumerate() {
                    *v = ins[0][k].max(0);
                }
            }
            (OpKind::Flatten, _) => {
                for (k, v) in y.iter_mut().enumerate() {
                    *v = relu_if(act, ins[0][k]);
                }
            }
            (OpKind::Split, LayerParams::Split(sp)) => {
                let c_in = in_shapes[0].c;
                for px in 0..out.pixels() {
                    for ch in sp.start..sp.end {
                        y[px * out.c + ch - sp.start] = relu_if(act, ins[0][px * c_in + ch]);
                    }
                }
            }
            other => panic!("oracle has no rule for {other:?}"),
        }
        maps.insert(id, y);
    }
    maps
}

/// Output layers only.
pub fn infer_outputs(g: &StructureGraph, q: &QuantizedWeights, input: &[f32]) -> BTreeMap<LayerId, Vec<i32>> {
    let all = infer(g, q, input);
    g.outputs().iter().map(|&l| (l, all[&l].clone())).collect()
}

pub mod bits;
pub mod central;
pub mod heap;
pub mod trend;
pub mod unfold;
