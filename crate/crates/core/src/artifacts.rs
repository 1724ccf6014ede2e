//! Compilation outputs as plain files, and loading them back for profiling.
//!
//! Rendering is pure: the same compilation always yields the same list of
//! `(relative path, bytes)` pairs, which are then written to a directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{self, decode_images, encode_images, PhysicalImage};
use crate::error::{Error, Result};
use crate::hw::HardwareConfig;
use crate::ir::{encode_weights, structure_ir_to_string, LayerId, WeightStore};
use crate::isa::{decode_programs, encode_programs, render_asm, AgInfo};
use crate::pipeline::Compiled;
use crate::profiler::simulate_timing;
use crate::sched::{AgTable, MemoryMap, Schedule};
use crate::Mode;

pub const BUNDLE_VERSION: u32 = 1;

/// Optional outputs of a compile job.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Emit {
    pub asm: bool,
    pub assignment: bool,
    /// Profiler report over this many samples.
    pub report: Option<usize>,
    pub trace: bool,
}

/// Everything besides programs and images that `profile` needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub version: u32,
    pub model: String,
    pub mode: Mode,
    pub input_numel: usize,
    pub ags: Vec<AgInfo>,
    pub ag_keys: Vec<(LayerId, usize, usize)>,
    pub memory: MemoryMap,
    pub groups: Vec<Vec<LayerId>>,
    pub high_water: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: LayerId,
    pub op: String,
    pub unfolding: String,
    pub matrix: [usize; 3],
    pub ags_per_replica: usize,
    pub arrays_per_ag: usize,
    pub replicas: usize,
    pub ag_cores: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaSummary {
    pub seed: u64,
    pub pop_size: usize,
    pub max_gens: usize,
    pub best_fitness: f64,
    pub trace: Vec<f64>,
    pub all_legal: bool,
}

/// Compilation summary: chosen unfoldings, replication and utilization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: String,
    pub hardware: String,
    pub mode: Mode,
    pub layers: Vec<LayerSummary>,
    pub crossbar_utilization: f64,
    pub groups: Vec<Vec<LayerId>>,
    pub layer_times: BTreeMap<LayerId, f64>,
    pub instructions_per_core: Vec<usize>,
    pub local_high_water: Vec<u64>,
    pub ga: Option<GaSummary>,
}

pub fn summary(c: &Compiled) -> Summary {
    let layers = c
        .parts
        .iter()
        .map(|(&l, p)| {
            let place = &c.layout.layers[&l];
            LayerSummary {
                layer: l,
                op: format!("{:?}", c.graph.layer(l).op).to_uppercase(),
                unfolding: p.format.kind.label().to_string(),
                matrix: [p.format.h, p.format.w, p.format.p],
                ags_per_replica: p.ags_per_replica(),
                arrays_per_ag: p.arrays_per_ag,
                replicas: place.replicas,
                ag_cores: place.ag_cores.clone(),
            }
        })
        .collect();
    let placed: usize = c.schedule.ags.infos.iter().map(|a| a.arrays).sum();
    let total = c.cfg.total_cores() * c.cfg.derive().logical_arrays_per_core;
    Summary {
        model: c.graph.name().to_string(),
        hardware: c.cfg.name.clone(),
        mode: c.options.mode,
        layers,
        crossbar_utilization: placed as f64 / total.max(1) as f64,
        groups: c.schedule.groups.clone(),
        layer_times: c.layer_times.clone(),
        instructions_per_core: c.schedule.programs.iter().map(|p| p.len()).collect(),
        local_high_water: c.schedule.high_water.clone(),
        ga: c.ga.as_ref().map(|r| GaSummary {
            seed: c.options.ga.seed,
            pop_size: c.options.ga.pop_size,
            max_gens: c.options.ga.max_gens,
            best_fitness: r.fitness,
            trace: r.trace.clone(),
            all_legal: r.all_legal,
        }),
    }
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("artifact types serialize");
    s.push('\n');
    s.into_bytes()
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Renders every artifact of a compilation. `weights` are the inputs the
/// job was given; they are hashed into the manifest.
pub fn render(c: &Compiled, weights: &WeightStore, emit: &Emit) -> Result<Vec<(String, Vec<u8>)>> {
    let s = &c.schedule;
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    files.push(("programs.bin".into(), encode_programs(&s.programs)));
    files.push(("setup.bin".into(), encode_programs(&s.setup)));
    let images: Vec<(usize, PhysicalImage)> =
        c.images()?.into_iter().enumerate().flat_map(|(ag, imgs)| imgs.into_iter().map(move |i| (ag, i))).collect();
    files.push(("images.bin".into(), encode_images(&images)));
    files.push(("mapping.txt".into(), c.mapping.to_text().into_bytes()));
    files.push(("hardware.toml".into(), c.cfg.to_toml().into_bytes()));
    let bundle = Bundle {
        version: BUNDLE_VERSION,
        model: c.graph.name().to_string(),
        mode: s.mode,
        input_numel: c.graph.input_shape().numel(),
        ags: s.ags.infos.clone(),
        ag_keys: s.ags.keys.clone(),
        memory: s.memory.clone(),
        groups: s.groups.clone(),
        high_water: s.high_water.clone(),
    };
    files.push(("bundle.json".into(), json(&bundle)));
    files.push(("summary.json".into(), json(&summary(c))));
    if emit.asm {
        for p in &s.programs {
            files.push((format!("asm/core{}.s", p.core), render_asm(p).into_bytes()));
        }
        for p in &s.setup {
            files.push((format!("asm/setup{}.s", p.core), render_asm(p).into_bytes()));
        }
    }
    if emit.assignment {
        files.push(("assignment.json".into(), json(&c.assign)));
    }
    if let Some(batch) = emit.report {
        files.push(("report.csv".into(), c.report(batch)?.to_csv().into_bytes()));
    }
    if emit.trace {
        files.push(("trace.csv".into(), timing_trace(s, &c.cfg)?.into_bytes()));
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));

    let mut inputs = BTreeMap::new();
    inputs.insert("model", sha256(structure_ir_to_string(&c.graph).as_bytes()));
    inputs.insert("weights", sha256(&encode_weights(weights)));
    inputs.insert("hardware", sha256(c.cfg.to_toml().as_bytes()));
    inputs.insert("options", sha256(&serde_json::to_vec(&c.options).expect("options serialize")));
    let outputs: BTreeMap<&str, String> = files.iter().map(|(n, b)| (n.as_str(), sha256(b))).collect();
    let manifest = serde_json::json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "inputs": inputs,
        "outputs": outputs,
    });
    files.push(("manifest.json".into(), json(&manifest)));
    Ok(files)
}

/// Per-instruction start and end cycles of one run of the programs.
pub fn timing_trace(s: &Schedule, cfg: &HardwareConfig) -> Result<String> {
    let t = simulate_timing(&s.programs, &s.ags.infos, cfg)?;
    let mut out = String::from("core,index,opcode,layer,start,end\n");
    for (c, p) in s.programs.iter().enumerate() {
        for (i, inst) in p.instrs.iter().enumerate() {
            let layer = if inst.layer == crate::isa::NO_LAYER { String::new() } else { inst.layer.to_string() };
            let sp = t.spans[c][i];
            let _ = writeln!(out, "{c},{i},{},{layer},{},{}", inst.op.opcode().mnemonic(), sp.start, sp.end);
        }
    }
    Ok(out)
}

pub fn write_all(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<()> {
    for (name, bytes) in files {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// A compiled program set read back from an output directory.
pub struct Loaded {
    pub bundle: Bundle,
    pub cfg: HardwareConfig,
    pub schedule: Schedule,
    /// Bit-split images per AG id.
    pub images: Vec<Vec<PhysicalImage>>,
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<Loaded> {
    let text =
        |name: &str| -> Result<String> { String::from_utf8(read(dir, name)?).map_err(|_| Error::Format(format!("{name} is not UTF-8"))) };
    let bundle: Bundle = serde_json::from_str(&text("bundle.json")?).map_err(|e| Error::Format(format!("bundle.json: {e}")))?;
    if bundle.version != BUNDLE_VERSION {
        return Err(Error::Format(format!("bundle.json version {} (expected {BUNDLE_VERSION})", bundle.version)));
    }
    let cfg = HardwareConfig::parse(&text("hardware.toml")?)?;
    let programs = decode_programs(&read(dir, "programs.bin")?)?;
    let setup = decode_programs(&read(dir, "setup.bin")?)?;
    if programs.len() != cfg.total_cores() || setup.len() != cfg.total_cores() {
        return Err(Error::Format(format!("programs cover {} cores, hardware has {}", programs.len(), cfg.total_cores())));
    }
    let mut images: Vec<Vec<PhysicalImage>> = vec![Vec::new(); bundle.ags.len()];
    for (ag, img) in decode_images(&read(dir, "images.bin")?)? {
        images.get_mut(ag).ok_or_else(|| Error::Format(format!("image for unknown AG {ag}")))?.push(img);
    }
    if let Some(ag) = images.iter().position(|i| i.len() != cfg.images_per_logical()) {
        return Err(Error::Format(format!("AG {ag} has {} images, expected {}", images[ag].len(), cfg.images_per_logical())));
    }
    let schedule = Schedule {
        mode: bundle.mode,
        setup,
        programs,
        ags: AgTable::from_entries(bundle.ags.clone(), bundle.ag_keys.clone()),
        memory: bundle.memory.clone(),
        groups: bundle.groups.clone(),
        high_water: bundle.high_water.clone(),
        ll: None,
    };
    Ok(Loaded { bundle, cfg, schedule, images })
}

/// Reads raw little-endian `f32` samples of `numel` values each.
pub fn parse_samples(bytes: &[u8], numel: usize) -> Result<Vec<Vec<f32>>> {
    let per = numel * 4;
    if numel == 0 || bytes.is_empty() || !bytes.len().is_multiple_of(per) {
        return Err(Error::Format(format!("input holds {} bytes, not a positive multiple of {per}", bytes.len())));
    }
    Ok(bytes.chunks(per).map(|c| c.chunks(4).map(|w| f32::from_le_bytes([w[0], w[1], w[2], w[3]])).collect()).collect())
}

/// Dequantized outputs of one sample, for printing.
pub fn dequantize_outputs(out: &BTreeMap<LayerId, Vec<i32>>) -> BTreeMap<LayerId, Vec<f32>> {
    out.iter().map(|(&l, v)| (l, v.iter().map(|&x| backend::dequantize_activation(x)).collect())).collect()
}
