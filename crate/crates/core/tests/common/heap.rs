use std::collections::BTreeMap;

use pim_compiler::sched::ll::AllocKind;
use pim_compiler::sched::Schedule;

/// Replays the heap log on its own: no double allocation of a live range,
/// no free of a block that is not live, and no overlap between live blocks.
pub fn replay_heap(s: &Schedule) -> Vec<String> {
    let trace = s.ll.as_ref().unwrap();
    let mut problems = Vec::new();
    let mut live: Vec<BTreeMap<u64, u64>> = vec![BTreeMap::new(); s.programs.len()];
    for e in &trace.allocs {
        let heap = &mut live[e.core];
        match e.kind {
            AllocKind::Alloc => {
                if heap.iter().any(|(&a, &l)| a < e.addr + e.len && e.addr < a + l) {
                    problems.push(format!("core {} alloc [{}, {}) overlaps a live block", e.core, e.addr, e.addr + e.len));
                }
                heap.insert(e.addr, e.len);
            }
            AllocKind::Free => {
                if heap.remove(&e.addr) != Some(e.len) {
                    problems.push(format!("core {} frees [{}, {}) which is not live", e.core, e.addr, e.addr + e.len));
                }
            }
        }
    }
    problems
}
