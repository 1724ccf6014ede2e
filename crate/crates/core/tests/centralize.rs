mod common;

use common::central::{ags, execute, fill, makespan, matrices, mvm, random_case, recv, send, sync_cfg};
use pim_compiler::hw::{ExecModel, HardwareConfig};
use pim_compiler::isa::{centralize_comm, CoreProgram};
use pim_compiler::pipeline::centralize_if_faster;

#[test]
fn batching_sends_shortens_a_producer_consumer_pair() {
    // Core 0 sends each result as soon as it is computed; core 1 computes
    // its own batch first and only then receives. On in-order cores under
    // rendezvous every early SEND stalls core 0 until core 1 reaches its
    // RECV.
    let cfg = HardwareConfig { exec_model: ExecModel::InOrder, ..sync_cfg() };
    let mut p0 = CoreProgram { core: 0, instrs: vec![fill(1)], barriers: vec![] };
    let mut p1 = CoreProgram { core: 1, instrs: vec![fill(2)], barriers: vec![] };
    for k in 0..8u64 {
        p0.instrs.push(mvm((k % 4) as u32, 256 + k * 32, 0));
        p0.instrs.push(send(1, 256 + k * 32));
        p1.instrs.push(mvm(4 + (k % 4) as u32, 256 + k * 32, 0));
    }
    for k in 0..8u64 {
        p1.instrs.push(recv(0, 512 + k * 32));
    }
    let before = vec![p0, p1];
    let after: Vec<CoreProgram> = before.iter().map(|p| centralize_comm(p, 16, &ags())).collect();
    assert_ne!(after, before);
    let (tb, ta) = (makespan(&before, &cfg), makespan(&after, &cfg));
    println!("makespan before {tb} after {ta}");
    assert!(ta < tb, "{ta} !< {tb}");
    let mats = matrices(1);
    assert_eq!(execute(&before, &cfg, &mats), execute(&after, &cfg, &mats));
}

#[test]
fn hundred_random_programs_never_slow_down_and_keep_results() {
    let mut rewritten = 0;
    for seed in 0..100 {
        let exec_model = if seed % 2 == 0 { ExecModel::OutOfOrder } else { ExecModel::InOrder };
        let cfg = HardwareConfig { exec_model, ..sync_cfg() };
        let before = random_case(seed);
        let threshold = 1 + (seed as usize % 5);
        let after = centralize_if_faster(&before, threshold, &ags(), &cfg).unwrap();
        rewritten += usize::from(after != before);
        assert!(makespan(&after, &cfg) <= makespan(&before, &cfg), "seed {seed}");
        let mats = matrices(seed);
        assert_eq!(execute(&before, &cfg, &mats), execute(&after, &cfg, &mats), "seed {seed}");
        // The unguarded rewrite must also preserve results.
        let raw: Vec<CoreProgram> = before.iter().map(|p| centralize_comm(p, threshold, &ags())).collect();
        assert_eq!(execute(&before, &cfg, &mats), execute(&raw, &cfg, &mats), "seed {seed}");
    }
    println!("{rewritten} of 100 programs rewritten");
    assert!(rewritten > 0);
}
