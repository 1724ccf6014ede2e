use pim_compiler::artifacts::{self, Emit};
use pim_compiler::fixtures::{self, FIXTURES};
use pim_compiler::hw::HardwareConfig;
use pim_compiler::layout::GaParams;
use pim_compiler::pipeline::{compile, CompileOptions};
use pim_compiler::profiler::{run_functional, MvmEngine};
use pim_compiler::Mode;

const EMIT: Emit = Emit { asm: true, assignment: true, report: Some(2), trace: true };

fn hardware(name: &str) -> HardwareConfig {
    HardwareConfig::preset(if name == "branchy8" { "desk_small" } else { "desk_tiny" }).unwrap()
}

fn render(name: &str, mode: Mode, seed: u64) -> Vec<(String, Vec<u8>)> {
    let g = fixtures::graph(name).unwrap();
    let w = fixtures::weights(name).unwrap();
    let opts = CompileOptions { mode, ga: GaParams { pop_size: 10, max_gens: 5, seed }, ..Default::default() };
    let c = compile(&g, &w, &hardware(name), &opts).unwrap_or_else(|e| panic!("{name} {mode:?}: {e}"));
    artifacts::render(&c, &w, &EMIT).unwrap()
}

#[test]
fn identical_inputs_give_byte_identical_artifacts() {
    for name in FIXTURES {
        for mode in [Mode::Ht, Mode::Ll] {
            let a = render(name, mode, 7);
            let b = render(name, mode, 7);
            assert_eq!(a.len(), b.len());
            for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
                assert_eq!(na, nb);
                assert!(ba == bb, "{name} {mode:?}: {na} differs between runs");
            }
        }
    }
}

#[test]
fn manifest_lists_every_other_artifact() {
    let files = render("conv_pool_fc", Mode::Ht, 1);
    let (_, manifest) = files.iter().find(|(n, _)| n == "manifest.json").unwrap();
    let m: serde_json::Value = serde_json::from_slice(manifest).unwrap();
    let outputs = m["outputs"].as_object().unwrap();
    assert_eq!(outputs.len(), files.len() - 1);
    for key in ["model", "weights", "hardware", "options"] {
        assert_eq!(m["inputs"][key].as_str().unwrap().len(), 64);
    }
}

#[test]
fn written_artifacts_load_and_run() {
    for mode in [Mode::Ht, Mode::Ll] {
        let g = fixtures::graph("resnet_block").unwrap();
        let w = fixtures::weights("resnet_block").unwrap();
        let opts = CompileOptions { mode, ga: GaParams { pop_size: 6, max_gens: 2, seed: 3 }, ..Default::default() };
        let c = compile(&g, &w, &hardware("resnet_block"), &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        artifacts::write_all(dir.path(), &artifacts::render(&c, &w, &EMIT).unwrap()).unwrap();
        let loaded = artifacts::load(dir.path()).unwrap();
        let mut expected = c.schedule.clone();
        expected.ll = None;
        assert_eq!(loaded.schedule, expected);
        let samples = vec![fixtures::input(&g, 4), fixtures::input(&g, 5)];
        let got = run_functional(&loaded.schedule, &loaded.cfg, &MvmEngine::Physical(&loaded.images), &samples).unwrap();
        assert_eq!(got, c.run(&samples, true).unwrap(), "{mode:?}");
    }
}
