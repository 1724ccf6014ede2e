//! Hardware configuration of the accelerator template and derived counts.
//!
//! The config file is TOML with one snake_case key per template parameter,
//! an optional `[timing]` table of simulator constants and an optional
//! `[power.<component>]` table per component.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::isa::VecOp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionType {
    Bus,
    Noc,
    SharedMem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommMechanism {
    Sync,
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecModel {
    InOrder,
    OutOfOrder,
}

/// Basic control unit of the crossbar collection in a core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MgmtGranularity {
    SingleArray,
    ArraySet(usize),
    All,
}

impl fmt::Display for MgmtGranularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MgmtGranularity::SingleArray => write!(f, "single_array"),
            MgmtGranularity::ArraySet(n) => write!(f, "array_set:{n}"),
            MgmtGranularity::All => write!(f, "all"),
        }
    }
}

impl FromStr for MgmtGranularity {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single_array" => Ok(MgmtGranularity::SingleArray),
            "all" => Ok(MgmtGranularity::All),
            _ => s
                .strip_prefix("array_set:")
                .and_then(|n| n.parse().ok())
                .map(MgmtGranularity::ArraySet)
                .ok_or_else(|| format!("expected single_array, all or array_set:<n>, got `{s}`")),
        }
    }
}

impl Serialize for MgmtGranularity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MgmtGranularity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// How signed logical weights are split into non-negative cell images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// Separate arrays for the positive and negative parts.
    PosNeg,
    /// Two's-complement slices; the top slice carries negative weight.
    TwosComplement,
}

/// Simulator constants, in cycles unless noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingParams {
    /// Crossbar read-out latency of one MVM.
    pub mvm_latency: u64,
    /// Fixed synchronization cost of a SEND/RECV rendezvous.
    pub handshake: u64,
    /// Per-hop latency on the on-chip network.
    pub hop_latency: u64,
    /// Per-hop latency between chips.
    pub offchip_hop_latency: u64,
    /// Elements a VFU processes per cycle.
    pub vec_elems_per_cycle: u64,
    /// Fixed access latency of global memory.
    pub global_latency: u64,
    /// Out-of-order issue window.
    pub lookahead: usize,
    /// Nanoseconds per cycle.
    pub cycle_ns: f64,
}

impl Default for TimingParams {
    fn default() -> Self {
        TimingParams {
            mvm_latency: 100,
            handshake: 10,
            hop_latency: 2,
            offchip_hop_latency: 20,
            vec_elems_per_cycle: 16,
            global_latency: 20,
            lookahead: 16,
            cycle_ns: 1.0,
        }
    }
}

/// Energy per operation unit (pJ) and static power (mW) of one component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerEntry {
    pub dynamic_pj: f64,
    pub leakage_mw: f64,
}

/// Components with power data. Dynamic energy units: `pimfu` per physical
/// array activation, `vfu` per element, `local_mem`/`global_mem`/`noc` per
/// byte moved.
pub const POWER_COMPONENTS: [&str; 5] = ["pimfu", "vfu", "local_mem", "global_mem", "noc"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareConfig {
    #[serde(default)]
    pub name: String,
    pub chips_x: usize,
    pub chips_y: usize,
    /// Bytes per second.
    pub offchip_bandwidth: f64,
    pub cores_x: usize,
    pub cores_y: usize,
    pub connection_type: ConnectionType,
    pub connection_bandwidth: f64,
    pub comm_mechanism: CommMechanism,
    pub global_mem_bandwidth: f64,
    pub global_mem_size: u64,
    #[serde(default = "all_vec_ops")]
    pub vfu_ops: BTreeSet<VecOp>,
    pub vfu_count: usize,
    pub local_mem_bandwidth: f64,
    pub local_mem_size: u64,
    pub exec_model: ExecModel,
    pub crossbars_x: usize,
    pub crossbars_y: usize,
    pub pim_mgmt_granularity: MgmtGranularity,
    pub xbar_rows: usize,
    pub xbar_cols: usize,
    pub cell_bits: u32,
    #[serde(default = "default_weight_bits")]
    pub weight_bits: u32,
    #[serde(default = "default_sign_mode")]
    pub sign_mode: SignMode,
    /// Physical arrays behind each crossbar slot; bounds how many bit-split
    /// images a core can hold.
    #[serde(default = "one")]
    pub physical_arrays_per_crossbar: usize,
    #[serde(default)]
    pub timing: TimingParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power: Option<BTreeMap<String, PowerEntry>>,
}

fn all_vec_ops() -> BTreeSet<VecOp> {
    VecOp::ALL.iter().copied().collect()
}
fn default_weight_bits() -> u32 {
    16
}
fn default_sign_mode() -> SignMode {
    SignMode::PosNeg
}
fn one() -> usize {
    1
}

/// Counts derived from a validated config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DerivedParams {
    pub total_cores: usize,
    pub cores_per_chip: usize,
    pub xbars_per_core: usize,
    pub logical_weights_per_xbar: usize,
    pub physical_arrays_per_logical: usize,
    /// Logical arrays a core can hold once bit splitting is accounted for.
    pub logical_arrays_per_core: usize,
    pub max_ags_per_core: usize,
}

const PRESETS: [(&str, &str); 5] = [
    ("arch_a", include_str!("../presets/arch_a.toml")),
    ("arch_b", include_str!("../presets/arch_b.toml")),
    ("arch_c", include_str!("../presets/arch_c.toml")),
    ("desk_tiny", include_str!("../presets/desk_tiny.toml")),
    ("desk_small", include_str!("../presets/desk_small.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

fn range(field: &'static str, msg: impl Into<String>) -> Error {
    Error::Range { field, msg: msg.into() }
}

impl HardwareConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: HardwareConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::Parse(format!("unknown hardware preset `{name}`")))?;
        Self::parse(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let counts: [(&'static str, usize); 9] = [
            ("chips_x", self.chips_x),
            ("chips_y", self.chips_y),
            ("cores_x", self.cores_x),
            ("cores_y", self.cores_y),
            ("vfu_count", self.vfu_count),
            ("crossbars_x", self.crossbars_x),
            ("crossbars_y", self.crossbars_y),
            ("xbar_rows", self.xbar_rows),
            ("xbar_cols", self.xbar_cols),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(range(field, "must be at least 1"));
            }
        }
        let rates: [(&'static str, f64); 4] = [
            ("offchip_bandwidth", self.offchip_bandwidth),
            ("connection_bandwidth", self.connection_bandwidth),
            ("global_mem_bandwidth", self.global_mem_bandwidth),
            ("local_mem_bandwidth", self.local_mem_bandwidth),
        ];
        for (field, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(range(field, format!("must be positive, got {v}")));
            }
        }
        if self.global_mem_size == 0 {
            return Err(range("global_mem_size", "must be positive"));
        }
        if self.local_mem_size == 0 || !self.local_mem_size.is_multiple_of(4) {
            return Err(range("local_mem_size", "must be a positive multiple of 4 bytes"));
        }
        if ![1, 2, 4].contains(&self.cell_bits) {
            return Err(range("cell_bits", format!("must be 1, 2 or 4, got {}", self.cell_bits)));
        }
        if self.weight_bits < 2 || self.weight_bits > 16 || !self.weight_bits.is_multiple_of(self.cell_bits) {
            return Err(range("weight_bits", format!("must be in 2..=16 and a multiple of cell_bits, got {}", self.weight_bits)));
        }
        if let MgmtGranularity::ArraySet(n) = self.pim_mgmt_granularity {
            if n == 0 || !self.xbars_per_core().is_multiple_of(n) {
                return Err(range("pim_mgmt_granularity", format!("array set size {n} must divide {} crossbars", self.xbars_per_core())));
            }
        }
        if self.physical_arrays_per_crossbar == 0 {
            return Err(range("physical_arrays_per_crossbar", "must be at least 1"));
        }
        let t = &self.timing;
        if t.vec_elems_per_cycle == 0 || t.lookahead == 0 || !(t.cycle_ns > 0.0) {
            return Err(range("timing", "vec_elems_per_cycle, lookahead and cycle_ns must be positive"));
        }
        if let Some(p) = &self.power {
            for k in p.keys() {
                if !POWER_COMPONENTS.contains(&k.as_str()) {
                    return Err(range("power", format!("unknown component `{k}`")));
                }
            }
        }
        Ok(())
    }

    pub fn chips(&self) -> usize {
        self.chips_x * self.chips_y
    }
    pub fn cores_per_chip(&self) -> usize {
        self.cores_x * self.cores_y
    }
    pub fn total_cores(&self) -> usize {
        self.chips() * self.cores_per_chip()
    }
    pub fn xbars_per_core(&self) -> usize {
        self.crossbars_x * self.crossbars_y
    }
    pub fn total_xbars(&self) -> usize {
        self.total_cores() * self.xbars_per_core()
    }

    /// Cell-level capacity in bytes: every crossbar cell stores `cell_bits`.
    pub fn pim_capacity_bytes(&self) -> u64 {
        self.total_xbars() as u64 * self.xbar_rows as u64 * self.xbar_cols as u64 * self.cell_bits as u64 / 8
    }

    /// Physical cell images per logical array.
    pub fn images_per_logical(&self) -> usize {
        let slices = (self.weight_bits / self.cell_bits) as usize;
        match self.sign_mode {
            SignMode::PosNeg => slices * 2,
            SignMode::TwosComplement => slices,
        }
    }

    pub fn derive(&self) -> DerivedParams {
        let ipl = self.images_per_logical();
        DerivedParams {
            total_cores: self.total_cores(),
            cores_per_chip: self.cores_per_chip(),
            xbars_per_core: self.xbars_per_core(),
            logical_weights_per_xbar: self.xbar_rows * self.xbar_cols,
            physical_arrays_per_logical: ipl,
            logical_arrays_per_core: self.xbars_per_core() * self.physical_arrays_per_crossbar / ipl,
            max_ags_per_core: self.xbars_per_core(),
        }
    }

    /// Chip index and (x, y) position of a core; cores are numbered
    /// chip-major, then row-major within a chip.
    pub fn core_position(&self, core: usize) -> (usize, usize, usize) {
        let per = self.cores_per_chip();
        let chip = core / per;
        let local = core % per;
        (chip, local % self.cores_x, local / self.cores_x)
    }

    /// Network latency between two cores in cycles (excluding bandwidth).
    pub fn hop_cycles(&self, a: usize, b: usize) -> u64 {
        if a == b {
            return 0;
        }
        let (ca, xa, ya) = self.core_position(a);
        let (cb, xb, yb) = self.core_position(b);
        let onchip = match self.connection_type {
            ConnectionType::Noc => (xa.abs_diff(xb) + ya.abs_diff(yb)) as u64,
            ConnectionType::Bus | ConnectionType::SharedMem => 1,
        };
        let chip_dist = if ca == cb {
            0
        } else {
            let (cax, cay) = (ca % self.chips_x, ca / self.chips_x);
            let (cbx, cby) = (cb % self.chips_x, cb / self.chips_x);
            (cax.abs_diff(cbx) + cay.abs_diff(cby)) as u64
        };
        onchip * self.timing.hop_latency + chip_dist * self.timing.offchip_hop_latency
    }

    fn bytes_per_cycle(&self, bandwidth: f64) -> f64 {
        bandwidth * self.timing.cycle_ns * 1e-9
    }

    /// Cycles to move `bytes` at `bandwidth` bytes/s, at least one.
    pub fn transfer_cycles(&self, bytes: u64, bandwidth: f64) -> u64 {
        ((bytes as f64 / self.bytes_per_cycle(bandwidth)).ceil() as u64).max(1)
    }

    /// Bandwidth of the link between two cores (off-chip when chips differ).
    pub fn link_bandwidth(&self, a: usize, b: usize) -> f64 {
        let per = self.cores_per_chip();
        if a / per == b / per {
            self.connection_bandwidth
        } else {
            self.connection_bandwidth.min(self.offchip_bandwidth)
        }
    }
}

/// Loads a config from a file path.
pub fn load_config(path: impl AsRef<Path>) -> Result<HardwareConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = HardwareConfig::parse(&text)?;
    if cfg.name.is_empty() {
        cfg.name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("hw").to_string();
    }
    Ok(cfg)
}

/// Resolves a `--hw` argument: an existing file, else a preset name. An
/// argument that looks like a path but does not exist is an I/O error
/// naming that path.
pub fn resolve_config(arg: &str) -> Result<HardwareConfig> {
    let p = Path::new(arg);
    if p.exists() {
        return load_config(p);
    }
    let looks_like_path = arg.contains('/') || arg.contains('\\') || arg.ends_with(".toml");
    if !looks_like_path {
        if let Ok(cfg) = HardwareConfig::preset(arg) {
            return Ok(cfg);
        }
    }
    Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "hardware config not found")))
}
