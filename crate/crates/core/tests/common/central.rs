//! Two-core programs for the communication batching pass.

use pim_compiler::hw::{CommMechanism, HardwareConfig};
use pim_compiler::isa::{AgInfo, CoreProgram, Inst, Op, VecOp};
use pim_compiler::partition::Matrix;
use pim_compiler::profiler::{simulate_timing, Machine, MvmEngine};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bytes of local memory the generated programs touch.
pub const REGION: u64 = 1024;
/// Words per MVM input and output.
pub const VEC: u64 = 8;

pub fn sync_cfg() -> HardwareConfig {
    let mut cfg = HardwareConfig::preset("desk_tiny").unwrap();
    cfg.comm_mechanism = CommMechanism::Sync;
    cfg
}

pub fn ags() -> Vec<AgInfo> {
    (0..8).map(|i| AgInfo { core: i / 4, in_len: VEC * 4, out_len: VEC * 4, arrays: 1, first_array: i % 4 }).collect()
}

pub fn matrices(seed: u64) -> Vec<Matrix<i32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..8)
        .map(|_| Matrix { rows: VEC as usize, cols: VEC as usize, data: (0..VEC * VEC).map(|_| rng.gen_range(-8..8)).collect() })
        .collect()
}

pub fn mvm(ag: u32, dst: u64, src: u64) -> Inst {
    Inst::new(Op::Mvm { ag, dst, src, len: VEC * 4 }, 0)
}
pub fn send(peer: u32, src: u64) -> Inst {
    Inst::new(Op::Send { peer, src, len: VEC * 4 }, 0)
}
pub fn recv(peer: u32, dst: u64) -> Inst {
    Inst::new(Op::Recv { peer, dst, len: VEC * 4 }, 0)
}
pub fn fill(imm: i32) -> Inst {
    Inst::new(Op::Write { dst: 0, len: REGION, imm }, 0)
}

/// Final local memories after a functional run in timing commit order.
pub fn execute(programs: &[CoreProgram], cfg: &HardwareConfig, mats: &[Matrix<i32>]) -> Vec<Vec<i32>> {
    let order = simulate_timing(programs, &ags(), cfg).unwrap().commit_order(programs);
    let mut m = Machine::new(cfg, 64, false);
    m.run(programs, &order, &MvmEngine::Logical(mats)).unwrap();
    m.local.iter().map(|mem| mem.read(0, REGION, None, 0).unwrap().to_vec()).collect()
}

pub fn makespan(programs: &[CoreProgram], cfg: &HardwareConfig) -> u64 {
    simulate_timing(programs, &ags(), cfg).unwrap().makespan
}

pub fn random_local_op(rng: &mut ChaCha8Rng, core: usize) -> Inst {
    let slot = |rng: &mut ChaCha8Rng| rng.gen_range(0..REGION / (VEC * 4)) * VEC * 4;
    match rng.gen_range(0..3) {
        0 => mvm((core * 4 + rng.gen_range(0..4)) as u32, slot(rng), slot(rng)),
        1 => Inst::new(Op::Copy { dst: slot(rng), src: slot(rng), len: VEC * 4 }, 0),
        _ => Inst::new(Op::Vec { op: VecOp::Add, dst: slot(rng), src1: slot(rng), src2: slot(rng), len: VEC * 4 }, 0),
    }
}

/// Two cores exchanging transfers in a globally consistent order: core 0
/// sends a batch to core 1, then core 1 answers with a batch. Local work,
/// barriers and transfer slots are scattered at random.
pub fn random_case(seed: u64) -> Vec<CoreProgram> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slot = |rng: &mut ChaCha8Rng| rng.gen_range(0..REGION / (VEC * 4)) * VEC * 4;
    let mut progs: Vec<CoreProgram> = (0..2).map(|c| CoreProgram { core: c, instrs: vec![fill(c as i32 + 1)], barriers: vec![] }).collect();
    let barrier = rng.gen_bool(0.5);
    for (from, to) in [(0usize, 1usize), (1, 0)] {
        let n = rng.gen_range(1..10);
        for _ in 0..n {
            for c in 0..2 {
                for _ in 0..rng.gen_range(0..4) {
                    let op = random_local_op(&mut rng, c);
                    progs[c].instrs.push(op);
                }
            }
            let (s, d) = (slot(&mut rng), slot(&mut rng));
            progs[from].instrs.push(send(to as u32, s));
            progs[to].instrs.push(recv(from as u32, d));
        }
        if barrier && from == 0 {
            progs.iter_mut().for_each(|p| p.barrier());
        }
    }
    for c in 0..2 {
        for _ in 0..rng.gen_range(0..4) {
            let op = random_local_op(&mut rng, c);
            progs[c].instrs.push(op);
        }
    }
    progs
}
