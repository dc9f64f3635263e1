//! `p1_pad`: move each function's frame down by a random multiple of four.
//!
//! A per-function pad `P = 4·uniform[1, max_pad/4]` is drawn from the
//! transform's random stream. `ADDI sp, -P` runs at entry (after any stamp
//! prologue, which must see the return-address slot at its original place),
//! and `ADDI sp, +P` runs before each `RET` — inserted *ahead* of any
//! un-stamp code already there, so that code also sees the slot back in
//! place. Negative-offset frame accesses move uniformly with `sp`, so
//! behavior is preserved; the frame's address diversity is the point.
//!
//! Skipped and reported: functions whose lifted code reads `[sp+d]` with
//! `d >= 0` (those slots do not move with the frame — `[sp+0]` is the return
//! address itself), branch-target heads, functions sharing records, and
//! functions that exit through `JMPR` (the landing code would inherit a
//! shifted `sp` it cannot restore).

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::irdb::ProgramIR;
use crate::isa::{AluImmOp, Instr, Reg};

use super::{
    before_inserted_epilogue, has_nonnegative_sp_access, head_is_branch_target,
    member_ownership, opt_u32, past_inserted_prologue, ret_members, shares_members,
    TransformError,
};

pub(super) fn run(
    ir: &mut ProgramIR,
    opts: &BTreeMap<String, String>,
    rng: &mut ChaCha8Rng,
    notes: &mut Vec<String>,
) -> Result<(), TransformError> {
    let max_pad = opt_u32(opts, "p1_pad", "max_pad", 64)?;
    if max_pad < 4 {
        return Err(TransformError::BadValue {
            transform: "p1_pad".into(),
            key: "max_pad".into(),
            value: max_pad.to_string(),
            why: "pads are multiples of 4 bytes, so the maximum must be at least 4".into(),
        });
    }

    let own = member_ownership(ir);
    let funcs: Vec<_> = ir.functions.keys().copied().collect();
    for f in funcs {
        let skip = if head_is_branch_target(ir, f) {
            Some("a branch targets its head (pad would re-apply)")
        } else if shares_members(&own, ir, f) {
            Some("it shares records with another function")
        } else if has_nonnegative_sp_access(ir, f) {
            Some("it addresses the stack at or above the incoming pointer")
        } else if ir.functions[&f]
            .members
            .iter()
            .any(|&m| matches!(ir.record(m).instr, Instr::JmpR { .. }))
        {
            Some("it exits through an indirect jump (pad cannot be undone)")
        } else {
            None
        };
        if let Some(why) = skip {
            let name = ir.functions[&f].name.clone().unwrap_or_else(|| f.to_string());
            notes.push(format!("p1_pad: skipped {name}: {why}"));
            continue;
        }

        let pad = 4 * rng.random_range(1..=max_pad / 4);
        let down = Instr::AluImm { op: AluImmOp::Addi, dst: Reg::SP, imm: pad.wrapping_neg() };
        let up = Instr::AluImm { op: AluImmOp::Addi, dst: Reg::SP, imm: pad };

        for ret in ret_members(ir, f) {
            let at = before_inserted_epilogue(ir, f, ret);
            ir.insert_before(at, &[up]);
        }
        let at = past_inserted_prologue(ir, ir.functions[&f].head);
        ir.insert_before(at, &[down]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{emit, lifted, run};
    use super::super::{apply_transforms, parse_spec};
    use crate::isa::{AluImmOp, Instr, Reg};
    use crate::vm::Outcome;
    use crate::zxe::Executable;

    fn locals_program() -> (Executable, crate::irdb::ProgramIR) {
        lifted(
            |a| {
                a.label("entry");
                a.i(Instr::Movi { dst: Reg::R0, imm: 11 });
                a.call("f");
                a.i(Instr::Halt);
                a.label("f");
                a.i(Instr::Store { base: Reg::SP, offset: -4, src: Reg::R0 });
                a.i(Instr::Movi { dst: Reg::R0, imm: 0 });
                a.i(Instr::Load { dst: Reg::R0, base: Reg::SP, offset: -4 });
                a.i(Instr::AluImm { op: AluImmOp::Addi, dst: Reg::R0, imm: 1 });
                a.i(Instr::Ret);
            },
            vec![],
        )
    }

    fn pads_of(ir: &crate::irdb::ProgramIR) -> Vec<u32> {
        let mut pads: Vec<u32> = ir
            .records
            .values()
            .filter(|r| r.original_address.is_none())
            .filter_map(|r| match r.instr {
                Instr::AluImm { op: AluImmOp::Addi, dst: Reg::SP, imm } if imm as i32 > 0 => {
                    Some(imm)
                }
                _ => None,
            })
            .collect();
        pads.sort();
        pads
    }

    #[test]
    fn padded_frames_behave_identically() {
        let (exe, mut ir) = locals_program();
        let base = run(&exe);
        assert_eq!(base.outcome, Outcome::Exit(12));
        apply_transforms(&mut ir, &[parse_spec("p1_pad").unwrap()], 99).unwrap();
        let out = run(&emit(&ir));
        assert_eq!((out.outcome, out.output), (base.outcome, base.output));
    }

    #[test]
    fn degenerate_range_pads_exactly_four() {
        let (_, mut ir) = locals_program();
        apply_transforms(&mut ir, &[parse_spec("p1_pad:max_pad=4").unwrap()], 5).unwrap();
        // Both functions get padded; every restore is +4.
        assert_eq!(pads_of(&ir), vec![4]); // f's single RET (entry has none)
        let downs = ir
            .records
            .values()
            .filter(|r| {
                r.original_address.is_none()
                    && r.instr
                        == Instr::AluImm { op: AluImmOp::Addi, dst: Reg::SP, imm: 4u32.wrapping_neg() }
            })
            .count();
        assert_eq!(downs, 2); // entry and f each shift down by 4
    }

    #[test]
    fn seeds_diversify_the_pad_vector() {
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..6 {
            let (_, mut ir) = locals_program();
            apply_transforms(
                &mut ir,
                &[parse_spec(&format!("p1_pad:seed={seed}")).unwrap()],
                0,
            )
            .unwrap();
            seen.insert(pads_of(&ir));
        }
        assert!(seen.len() > 1, "six seeds never changed the pad sizes");
    }

    #[test]
    fn fixed_slot_access_is_skipped_and_reported() {
        let (exe, mut ir) = lifted(
            |a| {
                a.label("entry");
                a.i(Instr::Movi { dst: Reg::R0, imm: 1 });
                a.call("peek");
                a.i(Instr::Halt);
                a.label("peek");
                // Reads its own return address: the frame cannot move.
                a.i(Instr::Load { dst: Reg::R1, base: Reg::SP, offset: 0 });
                a.i(Instr::Ret);
            },
            vec![],
        );
        let base = run(&exe);
        let notes =
            apply_transforms(&mut ir, &[parse_spec("p1_pad").unwrap()], 3).unwrap();
        assert!(notes.iter().any(|n| n.contains("at or above")), "{notes:?}");
        let out = run(&emit(&ir));
        assert_eq!((out.outcome, out.output), (base.outcome, base.output));
    }

    /// Composed with the stamp, the pad must go below the stamp's prologue
    /// and above its epilogue so both see the return-address slot in place.
    #[test]
    fn composes_with_the_return_address_stamp() {
        let (exe, mut ir) = locals_program();
        let base = run(&exe);
        let specs = [
            parse_spec("stack_stamp:key=0xA5A5A5A5").unwrap(),
            parse_spec("p1_pad").unwrap(),
        ];
        apply_transforms(&mut ir, &specs, 41).unwrap();
        let out = run(&emit(&ir));
        assert_eq!((out.outcome, out.output), (base.outcome, base.output));

        // Statically: walking f's head chain shows PUSH..POP, then the pad.
        // (Only the entry function carries a name; f is the other one.)
        let f = ir.functions.values().find(|f| f.name.is_none()).unwrap();
        let mut cur = f.head;
        let mut shape = Vec::new();
        while ir.record(cur).original_address.is_none() {
            shape.push(ir.record(cur).instr);
            cur = ir.record(cur).fallthrough.unwrap();
        }
        assert_eq!(shape.len(), 6, "five stamp instructions then one pad: {shape:?}");
        assert!(matches!(shape[0], Instr::Push { .. }));
        assert!(matches!(shape[5], Instr::AluImm { dst: Reg::SP, .. }));
    }
}
