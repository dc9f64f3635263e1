//! `coverage`: fuzzer-style edge counting into a shared memory map.
//!
//! Every basic block gets a random id below `map_size`. At each block head,
//! inserted code folds the previous block's id into the current one and
//! bumps the corresponding 32-bit map cell:
//!
//! ```text
//! cur  = id                     (compile-time constant)
//! idx  = cur ^ prev
//! map[idx] += 1
//! prev = cur >> 1               (shifted so A→B and B→A differ)
//! ```
//!
//! The map is a fresh zeroed data section at `map_base` (`map_size` cells of
//! four bytes); `prev` lives in one extra word just past the cells. The
//! sequence needs two scratch registers: preferably two the liveness
//! analysis reports dead at the block head, otherwise `r0`/`r1` spilled to
//! stack slots just below the deepest frame slot the function touches.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::analyses::cfg::build_cfg;
use crate::irdb::{InstrId, ProgramIR};
use crate::isa::{AluImmOp, Instr, Reg, ShiftOp};

use super::{max_frame_words, merged_dead_map, opt_u32, region_collides, TransformError};

pub(super) fn run(
    ir: &mut ProgramIR,
    opts: &BTreeMap<String, String>,
    rng: &mut ChaCha8Rng,
) -> Result<(), TransformError> {
    let map_base = opt_u32(opts, "coverage", "map_base", 0x2000_0000)?;
    let map_size = opt_u32(opts, "coverage", "map_size", 65536)?;
    if !map_size.is_power_of_two() || map_size < 2 {
        return Err(TransformError::BadValue {
            transform: "coverage".into(),
            key: "map_size".into(),
            value: map_size.to_string(),
            why: "cell count must be a power of two (ids xor into indices)".into(),
        });
    }
    let total = map_size
        .checked_mul(4)
        .and_then(|b| b.checked_add(4))
        .ok_or_else(|| TransformError::BadValue {
            transform: "coverage".into(),
            key: "map_size".into(),
            value: map_size.to_string(),
            why: "map does not fit in the address space".into(),
        })?;
    if let Some(what) = region_collides(ir, map_base, total) {
        return Err(TransformError::Unapplicable {
            transform: "coverage".into(),
            why: format!(
                "map region {:#010x}..{:#010x} overlaps {what}",
                map_base,
                map_base + total
            ),
        });
    }
    let prev_addr = map_base + 4 * map_size;

    // Plan first, edit after: block boundaries and deadness must come from
    // the uninstrumented program.
    let dead = merged_dead_map(ir);
    let mut frame_words: BTreeMap<InstrId, u32> = BTreeMap::new();
    let mut leaders: Vec<InstrId> = Vec::new();
    let mut seen: BTreeSet<InstrId> = BTreeSet::new();
    for f in ir.functions.keys().copied().collect::<Vec<_>>() {
        let frame = max_frame_words(ir, f);
        for block in &build_cfg(ir, f).blocks {
            let leader = block.records[0];
            let fw = frame_words.entry(leader).or_default();
            *fw = (*fw).max(frame);
            if seen.insert(leader) {
                leaders.push(leader);
            }
        }
    }

    for leader in leaders {
        let id = rng.random_range(0..map_size);
        let scratch: Vec<Reg> = dead
            .get(&leader)
            .map(|s| s.iter().take(2).collect())
            .unwrap_or_default();
        let mut seq = Vec::with_capacity(15);
        let (a, b) = if let [a, b] = scratch[..] {
            (a, b)
        } else {
            let stash = |k: u32| -> Result<i16, TransformError> {
                i16::try_from(-4 * (frame_words[&leader] as i64 + k as i64)).map_err(|_| {
                    TransformError::Unapplicable {
                        transform: "coverage".into(),
                        why: "frame too deep to spill scratch registers below".into(),
                    }
                })
            };
            seq.push(Instr::Store { base: Reg::SP, offset: stash(1)?, src: Reg::R0 });
            seq.push(Instr::Store { base: Reg::SP, offset: stash(2)?, src: Reg::R1 });
            (Reg::R0, Reg::R1)
        };
        seq.extend([
            Instr::Movi { dst: a, imm: prev_addr },
            Instr::Load { dst: b, base: a, offset: 0 },
            Instr::AluImm { op: AluImmOp::Xori, dst: b, imm: id },
            Instr::ShiftImm { op: ShiftOp::Shl, dst: b, amount: 2 },
            Instr::AluImm { op: AluImmOp::Addi, dst: b, imm: map_base },
            Instr::Load { dst: a, base: b, offset: 0 },
            Instr::AluImm { op: AluImmOp::Addi, dst: a, imm: 1 },
            Instr::Store { base: b, offset: 0, src: a },
            Instr::Movi { dst: a, imm: prev_addr },
            Instr::Movi { dst: b, imm: id >> 1 },
            Instr::Store { base: a, offset: 0, src: b },
        ]);
        if seq.len() > 11 {
            let stash1 = match seq[0] {
                Instr::Store { offset, .. } => offset,
                _ => unreachable!(),
            };
            let stash2 = match seq[1] {
                Instr::Store { offset, .. } => offset,
                _ => unreachable!(),
            };
            seq.push(Instr::Load { dst: Reg::R0, base: Reg::SP, offset: stash1 });
            seq.push(Instr::Load { dst: Reg::R1, base: Reg::SP, offset: stash2 });
        }
        ir.insert_before(leader, &seq);
    }

    ir.alloc_object(map_base, vec![0; total as usize]);
    Ok(())
}
