//! `kill_deads`: poison every register reported dead at every program point.
//!
//! Before each record, for each register the liveness analysis proves dead
//! there, insert `MOVI r, value`. The rewritten program behaves identically
//! exactly when the analysis is sound, which makes a differential run of
//! this transform a whole-corpus soundness check of the liveness results.

use std::collections::BTreeMap;

use crate::irdb::ProgramIR;
use crate::isa::Instr;

use super::{merged_dead_map, opt_u32, TransformError};

pub(super) fn run(ir: &mut ProgramIR, opts: &BTreeMap<String, String>) -> Result<(), TransformError> {
    let value = opt_u32(opts, "kill_deads", "value", 0xDEAD_DEAD)?;

    // Collect the full plan before editing so inserted poison is never
    // itself analyzed.
    for (id, regs) in merged_dead_map(ir) {
        let poison: Vec<Instr> =
            regs.iter().map(|r| Instr::Movi { dst: r, imm: value }).collect();
        if !poison.is_empty() {
            ir.insert_before(id, &poison);
        }
    }
    Ok(())
}
