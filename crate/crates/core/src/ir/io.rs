//! On-disk structure-IR (JSON) and weight blob formats.
//!
//! Weight blob layout, all little-endian:
//!
//! ```text
//! magic  "PIMW"
//! u32    version (1)
//! u32    entry count
//! entry* { u32 layer_id, u64 weight_offset, u64 weight_len, u64 bias_offset, u64 bias_len }
//! f32*   data
//! ```
//!
//! Offsets and lengths count f32 elements from the start of the data
//! section. Entries appear in ascending layer id; `bias_len == 0` means no
//! bias.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::*;

const BLOB_MAGIC: &[u8; 4] = b"PIMW";
const BLOB_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IrFile {
    ir_version: u32,
    name: String,
    input_shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights_file: Option<String>,
    layers: Vec<LayerFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inputs: Option<Vec<LayerId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    outputs: Option<Vec<LayerId>>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    id: LayerId,
    op: OpKind,
    #[serde(default)]
    params: Value,
    #[serde(default)]
    preds: Vec<LayerId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    succs: Option<Vec<LayerId>>,
    #[serde(default, skip_serializing_if = "is_none_act")]
    activation: Activation,
}

fn is_none_act(a: &Activation) -> bool {
    *a == Activation::None
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvFile {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    #[serde(default = "one")]
    stride: usize,
    #[serde(default)]
    padding: usize,
    #[serde(default = "one", skip_serializing)]
    groups: usize,
    input_fmap: [usize; 2],
    output_fmap: [usize; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolFile {
    kernel: usize,
    #[serde(default = "one")]
    stride: usize,
    #[serde(default)]
    padding: usize,
    input_fmap: [usize; 2],
    output_fmap: [usize; 2],
}

fn one() -> usize {
    1
}

fn params_from_file(id: LayerId, op: OpKind, v: Value) -> Result<LayerParams> {
    let bad = |e: serde_json::Error| Error::Parse(format!("layer {id}: {e}"));
    let empty = v.is_null() || v.as_object().is_some_and(|m| m.is_empty());
    Ok(match op {
        OpKind::Conv => {
            let c: ConvFile = serde_json::from_value(v).map_err(bad)?;
            if c.groups != 1 {
                return Err(Error::invalid(id, format!("grouped convolution (groups = {}) is not supported", c.groups)));
            }
            LayerParams::Conv(ConvParams {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
                input: Fmap::new(c.input_fmap[0], c.input_fmap[1]),
                output: Fmap::new(c.output_fmap[0], c.output_fmap[1]),
            })
        }
        OpKind::Fc => LayerParams::Fc(serde_json::from_value(v).map_err(bad)?),
        OpKind::Pool => {
            let p: PoolFile = serde_json::from_value(v).map_err(bad)?;
            LayerParams::Pool(PoolParams {
                kernel: p.kernel,
                stride: p.stride,
                padding: p.padding,
                input: Fmap::new(p.input_fmap[0], p.input_fmap[1]),
                output: Fmap::new(p.output_fmap[0], p.output_fmap[1]),
            })
        }
        OpKind::Split => LayerParams::Split(serde_json::from_value(v).map_err(bad)?),
        _ if empty => LayerParams::None,
        _ => return Err(Error::Parse(format!("layer {id}: {op:?} takes no parameters"))),
    })
}

fn params_to_file(p: &LayerParams) -> Value {
    match p {
        LayerParams::Conv(c) => serde_json::to_value(ConvFile {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
            groups: 1,
            input_fmap: [c.input.h, c.input.w],
            output_fmap: [c.output.h, c.output.w],
        }),
        LayerParams::Fc(f) => serde_json::to_value(f),
        LayerParams::Pool(p) => serde_json::to_value(PoolFile {
            kernel: p.kernel,
            stride: p.stride,
            padding: p.padding,
            input_fmap: [p.input.h, p.input.w],
            output_fmap: [p.output.h, p.output.w],
        }),
        LayerParams::Split(s) => serde_json::to_value(s),
        LayerParams::None => Ok(Value::Object(Default::default())),
    }
    .expect("parameter structs serialize")
}

/// Parses a structure-IR document from a string.
pub fn parse_structure_ir(text: &str) -> Result<StructureGraph> {
    let f: IrFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if f.ir_version != IR_VERSION {
        return Err(Error::Parse(format!("unsupported ir_version {} (expected {IR_VERSION})", f.ir_version)));
    }
    let mut layers = Vec::with_capacity(f.layers.len());
    let declared = f.layers.iter().any(|l| l.succs.is_some());
    for l in f.layers {
        let params = params_from_file(l.id, l.op, l.params)?;
        layers.push(LayerNode {
            id: l.id,
            op: l.op,
            params,
            fused_activation: l.activation,
            preds: l.preds,
            succs: l.succs.unwrap_or_default(),
        });
    }
    let [c, h, w] = f.input_shape;
    let mut g = if declared {
        StructureGraph::with_declared_successors(f.name, Shape::new(c, h, w), layers)?
    } else {
        StructureGraph::new(f.name, Shape::new(c, h, w), layers)?
    };
    if let Some(ins) = f.inputs {
        if ins != g.inputs {
            return Err(Error::invalid(None, format!("declared inputs {ins:?} differ from graph sources {:?}", g.inputs)));
        }
    }
    if let Some(outs) = f.outputs {
        if outs != g.outputs {
            return Err(Error::invalid(None, format!("declared outputs {outs:?} differ from graph sinks {:?}", g.outputs)));
        }
    }
    g.weights_file = f.weights_file;
    Ok(g)
}

/// Serializes a graph to the structure-IR document text.
pub fn structure_ir_to_string(g: &StructureGraph) -> String {
    let f = IrFile {
        ir_version: IR_VERSION,
        name: g.name.clone(),
        input_shape: [g.input_shape.c, g.input_shape.h, g.input_shape.w],
        weights_file: g.weights_file.clone(),
        layers: g
            .layers
            .iter()
            .map(|l| LayerFile {
                id: l.id,
                op: l.op,
                params: params_to_file(&l.params),
                preds: l.preds.clone(),
                succs: Some(l.succs.clone()),
                activation: l.fused_activation,
            })
            .collect(),
        inputs: Some(g.inputs.clone()),
        outputs: Some(g.outputs.clone()),
    };
    let mut s = serde_json::to_string_pretty(&f).expect("IR serializes");
    s.push('\n');
    s
}

pub fn load_structure_ir(path: impl AsRef<Path>) -> Result<StructureGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_structure_ir(&text)
}

pub fn save_structure_ir(g: &StructureGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, structure_ir_to_string(g)).map_err(|e| Error::io(path, e))
}

pub fn encode_weights(w: &WeightStore) -> Vec<u8> {
    let mut data: Vec<f32> = Vec::new();
    let mut entries = Vec::new();
    for (&id, lw) in &w.layers {
        let w_off = data.len() as u64;
        data.extend_from_slice(&lw.data);
        let b_off = data.len() as u64;
        let b_len = lw.bias.as_ref().map_or(0, |b| b.len()) as u64;
        if let Some(b) = &lw.bias {
            data.extend_from_slice(b);
        }
        entries.push((id as u32, w_off, lw.data.len() as u64, b_off, b_len));
    }
    let mut out = Vec::with_capacity(12 + entries.len() * 36 + data.len() * 4);
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (id, wo, wl, bo, bl) in entries {
        out.extend_from_slice(&id.to_le_bytes());
        for v in [wo, wl, bo, bl] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a weight blob; tensor dims are taken from the graph.
pub fn decode_weights(bytes: &[u8], g: &StructureGraph) -> Result<WeightStore> {
    let fmt = |m: &str| Error::Format(format!("weight blob: {m}"));
    if bytes.len() < 12 || &bytes[..4] != BLOB_MAGIC {
        return Err(fmt("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != BLOB_VERSION {
        return Err(fmt("unsupported version"));
    }
    let count = u32_at(8) as usize;
    let data_start = 12 + count * 36;
    if bytes.len() < data_start || !(bytes.len() - data_start).is_multiple_of(4) {
        return Err(fmt("truncated manifest"));
    }
    let floats: Vec<f32> = bytes[data_start..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let slice = |off: u64, len: u64| -> Result<Vec<f32>> {
        let (o, l) = (off as usize, len as usize);
        floats.get(o..o + l).map(|s| s.to_vec()).ok_or_else(|| fmt("entry out of range"))
    };
    let mut store = WeightStore::default();
    for e in 0..count {
        let base = 12 + e * 36;
        let id = u32_at(base) as LayerId;
        if !g.contains(id) {
            return Err(fmt(&format!("entry for unknown layer {id}")));
        }
        let dims = match g.layer(id).params {
            LayerParams::Conv(c) => vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
            LayerParams::Fc(f) => vec![f.out_features, f.in_features],
            _ => return Err(Error::UnsupportedLayer(id)),
        };
        let data = slice(u64_at(base + 4), u64_at(base + 12))?;
        let b_len = u64_at(base + 28);
        let bias = if b_len == 0 { None } else { Some(slice(u64_at(base + 20), b_len)?) };
        store.insert(id, LayerWeights { dims, data, bias });
    }
    store.validate(g)?;
    Ok(store)
}

pub fn load_weights(path: impl AsRef<Path>, g: &StructureGraph) -> Result<WeightStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, g)
}

pub fn save_weights(w: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(w)).map_err(|e| Error::io(path, e))
}

fn weights_path(ir_path: &Path, g: &StructureGraph) -> Option<PathBuf> {
    let f = g.weights_file()?;
    let dir = ir_path.parent().unwrap_or(Path::new("."));
    Some(dir.join(f))
}

/// Loads the IR and, when it names a weights file, the weights (resolved
/// relative to the IR file).
pub fn load_model(ir_path: impl AsRef<Path>) -> Result<(StructureGraph, Option<WeightStore>)> {
    let ir_path = ir_path.as_ref();
    let g = load_structure_ir(ir_path)?;
    let w = match weights_path(ir_path, &g) {
        Some(p) => Some(load_weights(p, &g)?),
        None => None,
    };
    Ok((g, w))
}

/// Writes the IR plus a weight blob named `<stem>.weights.bin` next to it.
pub fn save_model(g: &StructureGraph, w: &WeightStore, ir_path: impl AsRef<Path>) -> Result<()> {
    let ir_path = ir_path.as_ref();
    let stem = ir_path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let blob = format!("{stem}.weights.bin");
    let g = g.clone().with_weights_file(blob.clone());
    save_structure_ir(&g, ir_path)?;
    save_weights(w, ir_path.parent().unwrap_or(Path::new(".")).join(blob))
}
