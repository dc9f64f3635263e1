//! Backward may-liveness of registers, per record, within one function.
//!
//! A register is *live* before a record if some path from it reaches a read
//! of the register not preceded by a write. Anything the analysis cannot see
//! — returns, indirect transfers, system calls — reads every register, and
//! any successor outside the function's member view contributes a fully
//! live set, so "dead" is a proof, never a guess. The stack pointer is
//! always considered live.
//!
//! The complement, [`dead_before_map`], names registers that can be clobbered
//! immediately before a record without changing behavior.

use std::collections::BTreeMap;

use crate::irdb::{FuncId, InstrId, ProgramIR};
use crate::isa::{Reg, RegSet};

/// Record-level successors as liveness sees them: fallthrough always, taken
/// targets for non-calls. `None` members mean control leaves the analyzed
/// region (or the graph is incomplete) and the edge must be treated as
/// fully live.
fn flow_succs(ir: &ProgramIR, func: FuncId, id: InstrId) -> Vec<Option<InstrId>> {
    let members = &ir.functions[&func].members;
    let rec = ir.record(id);
    let mut out = Vec::new();
    let keep = |t: Option<InstrId>| match t {
        Some(t) if members.contains(&t) => Some(t),
        _ => None,
    };
    if rec.instr.has_fallthrough() {
        out.push(keep(rec.fallthrough));
    }
    if !rec.instr.is_call() && (rec.target.is_some() || rec.instr.static_target(0).is_some()) {
        out.push(keep(rec.target));
    }
    out
}

/// Registers live immediately before each member record.
pub fn live_in_map(ir: &ProgramIR, func: FuncId) -> BTreeMap<InstrId, RegSet> {
    let members = &ir.functions[&func].members;
    let mut live_in: BTreeMap<InstrId, RegSet> =
        members.iter().map(|&m| (m, RegSet::EMPTY)).collect();

    let mut changed = true;
    while changed {
        changed = false;
        // Backward problem: sweeping in descending id order converges fast
        // because fallthrough chains ascend in id.
        for &m in members.iter().rev() {
            let rec = ir.record(m);
            let mut out = RegSet::EMPTY;
            let succs = flow_succs(ir, func, m);
            if succs.is_empty() {
                out = RegSet::ALL;
            }
            for s in succs {
                match s {
                    Some(s) => out = out.union(live_in[&s]),
                    None => out = RegSet::ALL,
                }
            }
            let mut new_in = rec.instr.reads().union(out.minus(rec.instr.writes()));
            new_in.insert(Reg::SP);
            if new_in != live_in[&m] {
                live_in.insert(m, new_in);
                changed = true;
            }
        }
    }
    live_in
}

/// Registers provably dead immediately before each member record — safe to
/// overwrite there. Never contains the stack pointer.
pub fn dead_before_map(ir: &ProgramIR, func: FuncId) -> BTreeMap<InstrId, RegSet> {
    live_in_map(ir, func).into_iter().map(|(id, live)| (id, RegSet::ALL.minus(live))).collect()
}
