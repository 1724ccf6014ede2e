//! Rewrite passes adapting a program to the execution model and the
//! communication mechanism. Neither pass moves an instruction across a
//! barrier, so barrier positions are preserved.

use super::*;
use crate::hw::ExecModel;

fn conflicts(a: &Op, b: &Op, ags: &[AgInfo]) -> bool {
    let (ra, wa) = (a.reads(), a.writes(ags));
    let (rb, wb) = (b.reads(), b.writes(ags));
    wa.iter().any(|w| rb.iter().chain(&wb).any(|x| w.overlaps(x))) || ra.iter().any(|r| wb.iter().any(|x| r.overlaps(x)))
}

/// IN_ORDER: hoists each LOAD above the directly preceding MVMs it does not
/// depend on, so loads of a computation wave run back to back before the
/// wave's MVMs. OUT_OF_ORDER: identity.
pub fn lower_exec_model(p: &CoreProgram, model: ExecModel, ags: &[AgInfo]) -> CoreProgram {
    if model == ExecModel::OutOfOrder {
        return p.clone();
    }
    let mut instrs: Vec<Inst> = Vec::with_capacity(p.instrs.len());
    for seg in p.segments() {
        let seg_start = instrs.len();
        for inst in &p.instrs[seg] {
            instrs.push(*inst);
            if !matches!(inst.op, Op::Load { .. }) {
                continue;
            }
            let mut at = instrs.len() - 1;
            while at > seg_start {
                let prev = instrs[at - 1];
                if !matches!(prev.op, Op::Mvm { .. }) || conflicts(&prev.op, &inst.op, ags) {
                    break;
                }
                instrs.swap(at - 1, at);
                at -= 1;
            }
        }
    }
    CoreProgram { core: p.core, instrs, barriers: p.barriers.clone() }
}

/// Sinks SEND/RECV instructions past later independent non-communication
/// instructions and emits them in batches. A batch is flushed when it
/// reaches `threshold` entries, when a later instruction touches a pending
/// SEND source or RECV destination, at every barrier and at the end. The
/// relative order of communication instructions is unchanged.
pub fn centralize_comm(p: &CoreProgram, threshold: usize, ags: &[AgInfo]) -> CoreProgram {
    let threshold = threshold.max(1);
    let mut instrs: Vec<Inst> = Vec::with_capacity(p.instrs.len());
    let mut barriers = Vec::with_capacity(p.barriers.len());
    let segs = p.segments();
    let nsegs = segs.len();
    for (k, seg) in segs.into_iter().enumerate() {
        let mut pending: Vec<Inst> = Vec::new();
        let mut pending_ranges: Vec<Access> = Vec::new();
        for inst in &p.instrs[seg] {
            if inst.op.is_comm() {
                pending_ranges.extend(inst.op.reads());
                pending_ranges.extend(inst.op.writes(ags));
                pending.push(*inst);
                if pending.len() >= threshold {
                    instrs.append(&mut pending);
                    pending_ranges.clear();
                }
                continue;
            }
            let touches = inst.op.reads().iter().chain(&inst.op.writes(ags)).any(|a| pending_ranges.iter().any(|r| r.overlaps(a)));
            if touches {
                instrs.append(&mut pending);
                pending_ranges.clear();
            }
            instrs.push(*inst);
        }
        instrs.append(&mut pending);
        if k + 1 < nsegs {
            barriers.push(instrs.len());
        }
    }
    CoreProgram { core: p.core, instrs, barriers }
}
