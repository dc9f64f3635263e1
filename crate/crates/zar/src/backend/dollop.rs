//! Grouping instruction records into placement units.
//!
//! A dollop is a maximal straight-line run of records connected by
//! fallthrough links. Chains break where the next record is pinned (it must
//! start at its own fixed address) or has more than one fallthrough
//! predecessor (it cannot be physically adjacent to both). A chain whose last
//! record still falls through somewhere gets a synthesized `JMP rel32`
//! terminator forwarding to that record; chains ending in an unconditional
//! transfer need none.
//!
//! Every record of the program lands in exactly one dollop, including
//! records from conflicting decodings of the same original bytes — the
//! output carries all of them, and only the dynamically reached one runs.

use std::collections::{BTreeMap, BTreeSet};

use crate::irdb::{InstrId, ProgramIR};

/// One placement unit: a nonempty run of records laid out back to back.
#[derive(Clone, Debug)]
pub struct Dollop {
    pub records: Vec<InstrId>,
    /// When set, a `JMP rel32` is appended after the last record, targeting
    /// this record's final address.
    pub terminator: Option<InstrId>,
}

/// All dollops of a program plus the index from head record to dollop.
pub struct DollopSet {
    /// Ordered by first-record id ascending.
    pub dollops: Vec<Dollop>,
    /// Head record -> index into `dollops`.
    pub head_index: BTreeMap<InstrId, usize>,
}

impl DollopSet {
    /// Total encoded bytes of the records, rel8 branches widened to rel32.
    pub fn body_len(&self, ir: &ProgramIR, index: usize) -> u32 {
        self.dollops[index]
            .records
            .iter()
            .map(|&id| ir.record(id).instr.widened().length() as u32)
            .sum()
    }

    /// Body plus the 5-byte terminator when one is needed.
    pub fn full_len(&self, ir: &ProgramIR, index: usize) -> u32 {
        let d = &self.dollops[index];
        self.body_len(ir, index) + if d.terminator.is_some() { 5 } else { 0 }
    }
}

/// Splits the program's records into dollops.
///
/// Chain heads are records that are pinned or whose fallthrough-predecessor
/// count differs from one; every chain extends greedily until the next
/// record is itself a head. Records reachable only through a fallthrough
/// cycle (possible in synthetic graphs) are swept up afterwards, breaking
/// the cycle at the lowest record id.
pub fn build_dollops(ir: &ProgramIR) -> DollopSet {
    let ids = ir.record_ids();
    let mut ft_preds: BTreeMap<InstrId, u32> = BTreeMap::new();
    for &id in &ids {
        if let Some(f) = ir.record(id).fallthrough {
            *ft_preds.entry(f).or_insert(0) += 1;
        }
    }
    let is_head = |id: InstrId| {
        ir.record(id).pinned_at.is_some() || ft_preds.get(&id).copied().unwrap_or(0) != 1
    };

    let mut dollops = Vec::new();
    let mut head_index = BTreeMap::new();
    let mut placed: BTreeSet<InstrId> = BTreeSet::new();

    let chain_from = |start: InstrId, dollops: &mut Vec<Dollop>,
                          head_index: &mut BTreeMap<InstrId, usize>,
                          placed: &mut BTreeSet<InstrId>| {
        let mut records = vec![start];
        placed.insert(start);
        let mut cur = start;
        loop {
            match ir.record(cur).fallthrough {
                Some(next) if !is_head(next) && !placed.contains(&next) => {
                    records.push(next);
                    placed.insert(next);
                    cur = next;
                }
                other => {
                    head_index.insert(start, dollops.len());
                    dollops.push(Dollop { records, terminator: other });
                    break;
                }
            }
        }
    };

    for &id in &ids {
        if is_head(id) && !placed.contains(&id) {
            chain_from(id, &mut dollops, &mut head_index, &mut placed);
        }
    }
    // Fallthrough cycles have no head under the rule above; start them at
    // their lowest id so coverage stays total.
    for &id in &ids {
        if !placed.contains(&id) {
            chain_from(id, &mut dollops, &mut head_index, &mut placed);
        }
    }
    DollopSet { dollops, head_index }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::Asm;
    use crate::frontend;
    use crate::isa::{AluImmOp, Instr, Reg};

    fn lift(build: impl FnOnce(&mut Asm)) -> ProgramIR {
        let mut a = Asm::new(0x1000);
        a.label("entry");
        build(&mut a);
        let exe = a.finish().unwrap().into_exe("entry", vec![]).unwrap();
        frontend::lift(&exe, "dollop-test").unwrap()
    }

    #[test]
    fn straight_line_program_is_one_dollop_without_terminator() {
        let ir = lift(|a| {
            a.i(Instr::Movi { dst: Reg::R0, imm: 7 })
                .i(Instr::AluImm { op: AluImmOp::Addi, dst: Reg::R0, imm: 1 })
                .i(Instr::Halt);
        });
        let set = build_dollops(&ir);
        assert_eq!(set.dollops.len(), 1);
        assert_eq!(set.dollops[0].records.len(), 3);
        assert!(set.dollops[0].terminator.is_none());
        assert_eq!(set.full_len(&ir, 0), 6 + 6 + 1);
    }

    #[test]
    fn chain_splits_at_a_pinned_record_and_gets_a_terminator() {
        // CALL pins its fallthrough (the pushed return address), so the
        // entry chain must end at the CALL with a jump to the return point.
        let ir = lift(|a| {
            a.i(Instr::Movi { dst: Reg::R0, imm: 1 })
                .call("f")
                .i(Instr::Halt)
                .label("f")
                .i(Instr::Ret);
        });
        let set = build_dollops(&ir);
        let entry_dollop = &set.dollops[set.head_index[&ir.entry_record]];
        let last = *entry_dollop.records.last().unwrap();
        assert!(matches!(ir.record(last).instr, Instr::Call { .. }));
        let ret_point = ir.record(last).fallthrough.unwrap();
        assert_eq!(entry_dollop.terminator, Some(ret_point));
        assert!(ir.record(ret_point).pinned_at.is_some());
        assert!(set.head_index.contains_key(&ret_point));
    }

    #[test]
    fn conditional_branch_keeps_its_fallthrough_in_the_same_dollop() {
        let ir = lift(|a| {
            a.i(Instr::Cmpi { a: Reg::R0, imm: 0 })
                .br(crate::isa::Cond::Z, "done")
                .i(Instr::AluImm { op: AluImmOp::Addi, dst: Reg::R0, imm: 1 })
                .label("done")
                .i(Instr::Halt);
        });
        let set = build_dollops(&ir);
        // "done" is the branch target but has exactly one fallthrough
        // predecessor (the ADDI), so the whole program chains into one
        // dollop; the taken edge will aim mid-dollop.
        assert_eq!(set.dollops.len(), 1);
        assert!(set.dollops[0].terminator.is_none());
    }

    #[test]
    fn fallthrough_join_starts_its_own_dollop() {
        // Two CALL return points cannot both precede the shared RET, and a
        // record with two fallthrough predecessors can be adjacent to at
        // most one; the join must start a fresh dollop.
        let mut ir = lift(|a| {
            a.i(Instr::Movi { dst: Reg::R0, imm: 0 }).i(Instr::Halt);
        });
        let join = ir.alloc_record(Instr::Halt);
        let p1 = ir.alloc_record(Instr::Nop);
        let p2 = ir.alloc_record(Instr::Nop);
        ir.record_mut(p1).fallthrough = Some(join);
        ir.record_mut(p2).fallthrough = Some(join);
        let set = build_dollops(&ir);
        assert!(set.head_index.contains_key(&join), "join must head a dollop");
        assert_eq!(set.dollops[set.head_index[&p1]].terminator, Some(join));
        assert_eq!(set.dollops[set.head_index[&p2]].terminator, Some(join));
    }

    #[test]
    fn fallthrough_cycle_is_still_covered() {
        let mut ir = lift(|a| {
            a.i(Instr::Halt);
        });
        let x = ir.alloc_record(Instr::Nop);
        let y = ir.alloc_record(Instr::Nop);
        ir.record_mut(x).fallthrough = Some(y);
        ir.record_mut(y).fallthrough = Some(x);
        let set = build_dollops(&ir);
        let all: BTreeSet<InstrId> =
            set.dollops.iter().flat_map(|d| d.records.iter().copied()).collect();
        assert!(all.contains(&x) && all.contains(&y));
        let cyc = &set.dollops[set.head_index[&x]];
        assert_eq!(cyc.records, vec![x, y]);
        assert_eq!(cyc.terminator, Some(x), "cycle closes with a jump back");
    }
}
