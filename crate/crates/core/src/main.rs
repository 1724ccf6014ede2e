use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pim_compiler::artifacts::{self, Emit};
use pim_compiler::backend::PhysicalMapping;
use pim_compiler::error::{Error, Result};
use pim_compiler::fixtures;
use pim_compiler::hw::HardwareConfig;
use pim_compiler::ir::{load_model, save_model};
use pim_compiler::layout::GaParams;
use pim_compiler::pipeline::{compile, CompileOptions};
use pim_compiler::profiler::{parse_report_csv, run_functional, simulate_timing, MvmEngine, ProfileReport};
use pim_compiler::sched::ll::DEFAULT_TRANSMIT_THRESHOLD;
use pim_compiler::Mode;

#[derive(Parser)]
#[command(name = "pimc", version, about = "Compiler and profiler for crossbar processing-in-memory accelerators")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a model into per-core programs and crossbar images.
    Compile(CompileArgs),
    /// Run compiled programs on input samples and report performance.
    Profile(ProfileArgs),
    /// Pretty-print an artifact (assembly, mapping table, report, JSON).
    Inspect { path: PathBuf },
    /// Write a built-in network as structure IR plus weights.
    ExportFixture {
        name: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CompileArgs {
    /// Structure IR file; its weights file is resolved next to it.
    #[arg(long)]
    model: PathBuf,
    /// Hardware TOML file or preset name.
    #[arg(long)]
    hw: String,
    #[arg(long, value_enum, default_value = "ht")]
    mode: Mode,
    /// Samples for the profiler report.
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    pop_size: usize,
    #[arg(long, default_value_t = 1000)]
    max_gens: usize,
    #[arg(long)]
    max_layers_per_core: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TRANSMIT_THRESHOLD)]
    transmit_threshold: usize,
    /// Write per-core assembly listings.
    #[arg(long)]
    emit_asm: bool,
    /// Write the task-to-core assignment.
    #[arg(long)]
    emit_assignment: bool,
    /// Write the profiler report.
    #[arg(long)]
    report: bool,
    /// Write per-instruction timing of one iteration.
    #[arg(long)]
    trace: bool,
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    /// Output directory of `compile`.
    #[arg(long)]
    programs: PathBuf,
    /// Raw little-endian f32 samples, pixel-major, concatenated.
    #[arg(long)]
    input: PathBuf,
    /// Samples to time; defaults to the number of input samples.
    #[arg(long)]
    batch: Option<usize>,
    /// Where to write the outputs; defaults to `outputs.json` in the program directory.
    #[arg(long)]
    outputs: Option<PathBuf>,
    /// Also write the report CSV here.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn load_hardware(arg: &str) -> Result<HardwareConfig> {
    let path = Path::new(arg);
    let looks_like_path = arg.ends_with(".toml") || arg.contains(std::path::MAIN_SEPARATOR) || path.exists();
    if !looks_like_path {
        if let Ok(cfg) = HardwareConfig::preset(arg) {
            return Ok(cfg);
        }
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    HardwareConfig::parse(&text)
}

fn run_compile(a: &CompileArgs) -> Result<()> {
    let cfg = load_hardware(&a.hw)?;
    let (g, w) = load_model(&a.model)?;
    let w = w.ok_or_else(|| Error::invalid(None, format!("{} names no weights file", a.model.display())))?;
    let opts = CompileOptions {
        mode: a.mode,
        ga: GaParams { pop_size: a.pop_size, max_gens: a.max_gens, seed: a.seed },
        max_layers_per_core: a.max_layers_per_core,
        transmit_threshold: a.transmit_threshold,
        ..Default::default()
    };
    let c = compile(&g, &w, &cfg, &opts)?;
    let emit = Emit { asm: a.emit_asm, assignment: a.emit_assignment, report: a.report.then_some(a.batch), trace: a.trace };
    let files = artifacts::render(&c, &w, &emit)?;
    artifacts::write_all(&a.out, &files)?;

    let s = artifacts::summary(&c);
    println!("{} on {} ({:?}), crossbar utilization {:.1}%", s.model, s.hardware, s.mode, 100.0 * s.crossbar_utilization);
    for l in &s.layers {
        println!("  layer {:>3} {:<5} {:<11} replicas {} x {} AGs", l.layer, l.op, l.unfolding, l.replicas, l.ags_per_replica);
    }
    if !s.groups.is_empty() {
        println!("  pipeline groups {:?}", s.groups);
    }
    println!("wrote {} files to {}", files.len(), a.out.display());
    Ok(())
}

fn run_profile(a: &ProfileArgs) -> Result<()> {
    let loaded = artifacts::load(&a.programs)?;
    let bytes = fs::read(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let samples = artifacts::parse_samples(&bytes, loaded.bundle.input_numel)?;
    let outs = run_functional(&loaded.schedule, &loaded.cfg, &MvmEngine::Physical(&loaded.images), &samples)?;
    let doc: Vec<BTreeMap<String, serde_json::Value>> = outs
        .iter()
        .map(|o| {
            artifacts::dequantize_outputs(o)
                .into_iter()
                .map(|(l, v)| (format!("layer{l}"), serde_json::json!({ "raw": o[&l], "value": v })))
                .collect()
        })
        .collect();
    let out_path = a.outputs.clone().unwrap_or_else(|| a.programs.join("outputs.json"));
    let text = serde_json::to_string_pretty(&doc).expect("outputs serialize") + "\n";
    fs::write(&out_path, text).map_err(|e| Error::io(&out_path, e))?;

    let batch = a.batch.unwrap_or(samples.len());
    let report = ProfileReport::build(&loaded.bundle.model, &loaded.schedule, &loaded.cfg, batch)?;
    let csv = report.to_csv();
    if let Some(p) = &a.report {
        fs::write(p, &csv).map_err(|e| Error::io(p, e))?;
    }
    println!("{} samples, outputs in {}", samples.len(), out_path.display());
    print!("{}", aligned_report(&csv)?);
    Ok(())
}

fn aligned_report(csv: &str) -> Result<String> {
    let rows = parse_report_csv(csv)?;
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    Ok(rows.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect())
}

/// Assembly with each instruction's simulated cycles, when the listing
/// sits in a compile output directory.
fn annotated_asm(path: &Path, text: &str) -> String {
    let core = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.strip_prefix("core")).and_then(|n| n.parse::<usize>().ok());
    let spans = core.and_then(|c| {
        let dir = path.parent()?.parent()?;
        let loaded = artifacts::load(dir).ok()?;
        let t = simulate_timing(&loaded.schedule.programs, &loaded.schedule.ags.infos, &loaded.cfg).ok()?;
        t.spans.get(c).cloned()
    });
    let mut out = String::new();
    let mut idx = 0;
    for line in text.lines() {
        if line.starts_with(';') {
            out.push_str(line);
        } else {
            match spans.as_ref().and_then(|s| s.get(idx)) {
                Some(sp) => out.push_str(&format!("{idx:>6} [{:>8}, {:>8})  {line}", sp.start, sp.end)),
                None => out.push_str(&format!("{idx:>6}  {line}")),
            }
            idx += 1;
        }
        out.push('\n');
    }
    out
}

/// One row per crossbar: a cell per physical slot naming the layer whose
/// image occupies it, `.` when empty.
fn occupancy_grid(m: &PhysicalMapping) -> String {
    let mut cells: BTreeMap<usize, BTreeMap<usize, BTreeMap<usize, usize>>> = BTreeMap::new();
    let mut slots = 0;
    for a in &m.arrays {
        for i in &a.images {
            cells.entry(i.core).or_default().entry(i.crossbar).or_default().insert(i.slot, a.layer);
            slots = slots.max(i.slot + 1);
        }
    }
    let mut out = String::new();
    for (core, xbars) in &cells {
        out.push_str(&format!("core {core}\n"));
        for (x, used) in xbars {
            let row: Vec<String> = (0..slots).map(|s| used.get(&s).map_or(".".to_string(), |l| l.to_string())).collect();
            out.push_str(&format!("  xbar {x:>3} | {}\n", row.join(" ")));
        }
    }
    out
}

fn run_inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
    let text = || String::from_utf8(bytes.clone()).map_err(|_| Error::Format(format!("{} is not text", path.display())));
    let out = match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "s" | "asm" => annotated_asm(path, &text()?),
        "csv" if text()?.starts_with("field,value") => aligned_report(&text()?)?,
        "csv" => text()?,
        "txt" if name.starts_with("mapping") => occupancy_grid(&PhysicalMapping::parse_text(&text()?)?),
        "json" => {
            let v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
        }
        "bin" if name.starts_with("programs") || name.starts_with("setup") => {
            let programs = pim_compiler::isa::decode_programs(&bytes)?;
            programs.iter().map(pim_compiler::isa::render_asm).collect()
        }
        _ => return Err(Error::Format(format!("{}: unrecognized artifact", path.display()))),
    };
    print!("{out}");
    Ok(())
}

fn run_export(name: &str, out: &Path) -> Result<()> {
    let g = fixtures::graph(name)?;
    let w = fixtures::weights(name)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ir = out.join(format!("{name}.ir.json"));
    save_model(&g, &w, &ir)?;
    let sample = fixtures::input(&g, 0);
    let input = out.join(format!("{name}.input.bin"));
    let raw: Vec<u8> = sample.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&input, raw).map_err(|e| Error::io(&input, e))?;
    println!("wrote {} and {}", ir.display(), input.display());
    Ok(())
}

fn stage_of(e: &Error) -> Option<&'static str> {
    match e {
        Error::Stage { stage, .. } => Some(stage),
        _ => None,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Compile(a) => run_compile(a),
        Cmd::Profile(a) => run_profile(a),
        Cmd::Inspect { path } => run_inspect(path),
        Cmd::ExportFixture { name, out } => run_export(name, out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": { "kind": e.kind(), "stage": stage_of(&e), "message": e.to_string() } });
            eprintln!("{line}");
            ExitCode::from(2)
        }
    }
}
