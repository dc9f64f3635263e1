//! `initialize_stack`: zero each function's stack frame on entry.
//!
//! Uninitialized-local reads become deterministic zero reads. For each
//! function the probe depth `F` is the deepest `[sp-4k]` slot its lifted
//! code touches, capped by the `frame_probe` option (in words). The prologue
//! stashes a scratch register one slot *below* the probed frame, zeroes the
//! frame with it, and restores it:
//!
//! ```text
//! STORE [sp-4(F+1)], r0      ; stash below the frame
//! MOVI  r0, 0
//! STORE [sp-4*1], r0
//! ...
//! STORE [sp-4*F], r0
//! LOAD  r0, [sp-4(F+1)]      ; restore
//! ```
//!
//! A push/pop save would not work here: the push slot `[sp-4]` is aliased by
//! the frame being zeroed, so the pop would reload a zeroed value. The stash
//! slot sits below everything the function touches and nothing can clobber
//! it before the restore — no call happens inside the prologue.

use std::collections::BTreeMap;

use crate::irdb::ProgramIR;
use crate::isa::{Instr, Reg};

use super::{head_is_branch_target, max_frame_words, member_ownership, opt_u32, TransformError};

pub(super) fn run(ir: &mut ProgramIR, opts: &BTreeMap<String, String>) -> Result<(), TransformError> {
    let probe_cap = opt_u32(opts, "initialize_stack", "frame_probe", 16)?;
    if probe_cap == 0 || probe_cap > 1000 {
        return Err(TransformError::BadValue {
            transform: "initialize_stack".into(),
            key: "frame_probe".into(),
            value: probe_cap.to_string(),
            why: "must be between 1 and 1000 words".into(),
        });
    }

    let own = member_ownership(ir);
    let funcs: Vec<_> = ir.functions.keys().copied().collect();
    for f in funcs {
        // The prologue must run exactly once per entry: not when a branch
        // re-enters the head, and not when another function flows through it
        // (its live frame would be zeroed mid-flight).
        if head_is_branch_target(ir, f) || own.get(&ir.functions[&f].head).copied().unwrap_or(0) > 1
        {
            continue;
        }
        let frame = max_frame_words(ir, f).min(probe_cap);
        if frame == 0 {
            continue;
        }
        let stash = -4 * (frame as i16 + 1);
        let mut seq = Vec::with_capacity(frame as usize + 3);
        seq.push(Instr::Store { base: Reg::SP, offset: stash, src: Reg::R0 });
        seq.push(Instr::Movi { dst: Reg::R0, imm: 0 });
        for k in 1..=frame as i16 {
            seq.push(Instr::Store { base: Reg::SP, offset: -4 * k, src: Reg::R0 });
        }
        seq.push(Instr::Load { dst: Reg::R0, base: Reg::SP, offset: stash });
        let head = ir.functions[&f].head;
        ir.insert_before(head, &seq);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{emit, lifted, run};
    use super::super::{apply_transforms, parse_spec};
    use crate::isa::{Instr, Reg};

    /// entry dirties the memory the callee frame will occupy, then calls f;
    /// f reads its local 1 without ever writing it. Untransformed, the read
    /// leaks the caller's sentinel; transformed, the slot is zero by
    /// construction.
    #[test]
    fn frame_slots_are_zeroed_even_after_dirtying() {
        let (exe, mut ir) = lifted(
            |a| {
                a.label("entry");
                // After `ADDI sp,-4; CALL` the callee's sp sits 8 below
                // entry's, so f's local 1 ([sp_f-4]) is entry's [sp-12].
                a.i(Instr::Movi { dst: Reg::R3, imm: 0x55AA55AA });
                a.i(Instr::Store { base: Reg::SP, offset: -12, src: Reg::R3 });
                a.i(Instr::AluImm { op: crate::isa::AluImmOp::Addi, dst: Reg::SP, imm: -4i32 as u32 });
                a.call("f");
                a.i(Instr::AluImm { op: crate::isa::AluImmOp::Addi, dst: Reg::SP, imm: 4 });
                a.i(Instr::Halt);
                a.label("f");
                a.i(Instr::Load { dst: Reg::R0, base: Reg::SP, offset: -4 });
                a.i(Instr::Store { base: Reg::SP, offset: -8, src: Reg::R0 }); // deepest slot: 2 words
                a.i(Instr::Sys { code: 3 });
                a.i(Instr::Ret);
            },
            vec![],
        );
        // Untransformed: prints the sentinel that leaked into the frame.
        assert_eq!(run(&exe).output, format!("{}", 0x55AA55AAu32).into_bytes());

        apply_transforms(&mut ir, &[parse_spec("initialize_stack").unwrap()], 0).unwrap();
        assert_eq!(run(&emit(&ir)).output, b"0");
    }

    #[test]
    fn scratch_register_survives_the_prologue() {
        let (exe, mut ir) = lifted(
            |a| {
                a.label("entry");
                a.i(Instr::Movi { dst: Reg::R0, imm: 1234 });
                a.call("f");
                a.i(Instr::Halt);
                a.label("f");
                a.i(Instr::Store { base: Reg::SP, offset: -4, src: Reg::R0 });
                a.i(Instr::Load { dst: Reg::R1, base: Reg::SP, offset: -4 });
                a.i(Instr::Sys { code: 3 }); // prints r1 = 1234 only if r0 survived
                a.i(Instr::Ret);
            },
            vec![],
        );
        assert_eq!(run(&exe).output, b"1234");
        apply_transforms(&mut ir, &[parse_spec("initialize_stack").unwrap()], 0).unwrap();
        assert_eq!(run(&emit(&ir)).output, b"1234");
    }

    /// The inserted prologue plays out as stash, zero-fill, restore.
    #[test]
    fn prologue_shape_matches_frame_depth() {
        let (_, mut ir) = lifted(
            |a| {
                a.label("entry");
                a.call("f");
                a.i(Instr::Halt);
                a.label("f");
                a.i(Instr::Store { base: Reg::SP, offset: -12, src: Reg::R2 });
                a.i(Instr::Ret);
            },
            vec![],
        );
        apply_transforms(&mut ir, &[parse_spec("initialize_stack").unwrap()], 0).unwrap();
        // Find f's head chain: 3-word frame -> stash + MOVI + 3 stores + restore.
        let f = ir
            .functions
            .values()
            .find(|f| ir.record(f.head).original_address.is_none())
            .expect("f got a prologue");
        let mut cur = f.head;
        let mut seq = Vec::new();
        while ir.record(cur).original_address.is_none() {
            seq.push(ir.record(cur).instr);
            cur = ir.record(cur).fallthrough.unwrap();
        }
        assert_eq!(seq.len(), 6);
        assert_eq!(seq[0], Instr::Store { base: Reg::SP, offset: -16, src: Reg::R0 });
        assert_eq!(seq[1], Instr::Movi { dst: Reg::R0, imm: 0 });
        assert_eq!(seq[5], Instr::Load { dst: Reg::R0, base: Reg::SP, offset: -16 });
    }
}
