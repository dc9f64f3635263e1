//! `stack_stamp`: XOR each function's saved return address with a key.
//!
//! On entry the return address sits on top of the stack. The prologue XORs
//! it with the per-binary key `K`; the same sequence before each `RET`
//! undoes it. While the function body runs, the slot holds `original ⊕ K`,
//! so an overwrite (smashed buffer, forged frame) that does not know `K`
//! lands the `RET` on a scrambled address instead of the attacker's.
//!
//! ```text
//! PUSH  r0
//! LOAD  r0, [sp+4]     ; the return-address slot
//! XORI  r0, K
//! STORE [sp+4], r0
//! POP   r0
//! ```
//!
//! Only functions where entry and exit instrumentation provably pair up are
//! stamped: the entry function has no return address at all; a branch-target
//! head would re-stamp on every loop iteration; shared members could run one
//! side of the pair under another function; a function that exits through
//! `JMPR` hands its stamped slot to code that never learned about the stamp;
//! and a function with no `RET` could stamp without anyone un-stamping.
//! Everything else is skipped and reported.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::irdb::ProgramIR;
use crate::isa::{AluImmOp, Instr, Reg};

use super::{
    entry_function, head_is_branch_target, member_ownership, parse_u32, ret_members,
    shares_members, TransformError,
};

/// The 32-bit stamp key a given seed produces.
pub fn stamp_key(seed: u64) -> u32 {
    ChaCha8Rng::seed_from_u64(seed).random()
}

fn stamp_run(key: u32) -> [Instr; 5] {
    [
        Instr::Push { src: Reg::R0 },
        Instr::Load { dst: Reg::R0, base: Reg::SP, offset: 4 },
        Instr::AluImm { op: AluImmOp::Xori, dst: Reg::R0, imm: key },
        Instr::Store { base: Reg::SP, offset: 4, src: Reg::R0 },
        Instr::Pop { dst: Reg::R0 },
    ]
}

pub(super) fn run(
    ir: &mut ProgramIR,
    opts: &BTreeMap<String, String>,
    stream_seed: u64,
    notes: &mut Vec<String>,
) -> Result<(), TransformError> {
    let key = match opts.get("key") {
        Some(v) => parse_u32("stack_stamp", "key", v)?,
        None => stamp_key(stream_seed),
    };
    let run = stamp_run(key);

    let own = member_ownership(ir);
    let entry = entry_function(ir);
    let funcs: Vec<_> = ir.functions.keys().copied().collect();
    for f in funcs {
        let skip = if Some(f) == entry {
            Some("it is the entry function (no return address on the stack)")
        } else if head_is_branch_target(ir, f) {
            Some("a branch targets its head (prologue would re-run)")
        } else if shares_members(&own, ir, f) {
            Some("it shares records with another function")
        } else if ir.functions[&f].members.iter().any(|&m| matches!(ir.record(m).instr, Instr::JmpR { .. })) {
            Some("it exits through an indirect jump (un-stamp cannot pair)")
        } else {
            None
        };
        let rets = ret_members(ir, f);
        let skip = skip.or(if rets.is_empty() {
            Some("it never returns (stamp would go un-paired)")
        } else {
            None
        });
        if let Some(why) = skip {
            let name = ir.functions[&f].name.clone().unwrap_or_else(|| f.to_string());
            notes.push(format!("stack_stamp: skipped {name}: {why}"));
            continue;
        }
        for ret in rets {
            ir.insert_before(ret, &run);
        }
        let head = ir.functions[&f].head;
        ir.insert_before(head, &run);
    }
    Ok(())
}
