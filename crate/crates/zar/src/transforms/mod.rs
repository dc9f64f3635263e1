//! Composable program transforms over the IR database.
//!
//! Each transform edits identity links only; it never computes an address.
//! The registry applies transforms in the order given, re-validates the
//! database after each one, and attributes any structural damage to the
//! transform that caused it.
//!
//! Randomized decisions (padding amounts, stamp keys) draw from a stream
//! derived from the pipeline seed and the transform's position, so a run is
//! reproducible from `(input, transform list, seed)` alone. A transform's
//! `seed` option replaces its derived stream, decoupling it from its
//! position in the list.
//!
//! Safety: transforms that create per-entry state (frame stamping, stack
//! padding) only instrument functions they can prove well-shaped — no
//! branch into the head (the prologue must run once per entry), and no
//! records shared with another function (exit instrumentation must pair with
//! exactly one entry instrumentation). Unprovable functions are skipped,
//! never broken.

mod cfi;
mod coverage;
mod init_stack;
mod kill_deads;
mod pad;
mod stamp;

pub use stamp::stamp_key;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::irdb::{FuncId, InstrId, ProgramIR, Violation};
use crate::isa::{Instr, Reg};

/// A transform invocation: name plus raw key=value options.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformSpec {
    pub name: String,
    pub options: BTreeMap<String, String>,
}

#[derive(Debug, thiserror::Error)]
pub enum TransformError {
    #[error("unknown transform `{0}`")]
    UnknownTransform(String),
    #[error("transform `{transform}` has no option `{key}`")]
    UnknownOption { transform: String, key: String },
    #[error("transform `{transform}`: option `{key}` has bad value `{value}`: {why}")]
    BadValue { transform: String, key: String, value: String, why: String },
    #[error("`stack_stamp` must run before `p1_pad`: the pad displaces the return-address slot the stamp patches")]
    StampAfterPad,
    #[error("transform `{transform}`: {why}")]
    Unapplicable { transform: String, why: String },
    #[error("IR invalid after `{transform}`: {}", format_violations(.violations))]
    PostValidation { transform: String, violations: Vec<Violation> },
    #[error("malformed transform spec `{0}`: expected `name` or `name:key=value,...`")]
    BadSpec(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// Transform names and the option keys each accepts.
const TRANSFORMS: &[(&str, &[&str])] = &[
    ("initialize_stack", &["frame_probe"]),
    ("kill_deads", &["value"]),
    ("stack_stamp", &["key", "seed"]),
    ("p1_pad", &["max_pad", "seed"]),
    ("coverage", &["map_base", "map_size", "seed"]),
    ("selective_cfi", &[]),
];

/// Parses `name` or `name:k=v,k2=v2` into a spec, checking the name and the
/// option keys against the registry.
pub fn parse_spec(s: &str) -> Result<TransformSpec, TransformError> {
    let (name, rest) = match s.split_once(':') {
        Some((n, r)) => (n, Some(r)),
        None => (s, None),
    };
    let allowed = TRANSFORMS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, keys)| *keys)
        .ok_or_else(|| TransformError::UnknownTransform(name.to_string()))?;
    let mut options = BTreeMap::new();
    if let Some(rest) = rest {
        for pair in rest.split(',') {
            let (k, v) = pair.split_once('=').ok_or_else(|| TransformError::BadSpec(s.to_string()))?;
            if !allowed.contains(&k) {
                return Err(TransformError::UnknownOption {
                    transform: name.to_string(),
                    key: k.to_string(),
                });
            }
            options.insert(k.to_string(), v.to_string());
        }
    }
    Ok(TransformSpec { name: name.to_string(), options })
}

/// Applies `specs` in order, validating the database after each transform.
///
/// Returns human-readable notes about work a transform declined (functions
/// it could not prove safe to instrument).
pub fn apply_transforms(
    ir: &mut ProgramIR,
    specs: &[TransformSpec],
    seed: u64,
) -> Result<Vec<String>, TransformError> {
    // Name and option-key validation up front, so a typo in the third
    // transform does not leave the database half-rewritten.
    for spec in specs {
        let allowed = TRANSFORMS
            .iter()
            .find(|(n, _)| *n == spec.name)
            .map(|(_, keys)| *keys)
            .ok_or_else(|| TransformError::UnknownTransform(spec.name.clone()))?;
        for key in spec.options.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(TransformError::UnknownOption {
                    transform: spec.name.clone(),
                    key: key.clone(),
                });
            }
        }
    }
    if let (Some(pad), Some(stamp)) = (
        specs.iter().position(|s| s.name == "p1_pad"),
        specs.iter().rposition(|s| s.name == "stack_stamp"),
    ) {
        if stamp > pad {
            return Err(TransformError::StampAfterPad);
        }
    }

    let mut notes = Vec::new();
    for (index, spec) in specs.iter().enumerate() {
        let stream_seed = match spec.options.get("seed") {
            Some(v) => parse_u64(&spec.name, "seed", v)?,
            None => derived_seed(seed, index),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
        match spec.name.as_str() {
            "initialize_stack" => init_stack::run(ir, &spec.options)?,
            "kill_deads" => kill_deads::run(ir, &spec.options)?,
            "stack_stamp" => stamp::run(ir, &spec.options, stream_seed, &mut notes)?,
            "p1_pad" => pad::run(ir, &spec.options, &mut rng, &mut notes)?,
            "coverage" => coverage::run(ir, &spec.options, &mut rng)?,
            "selective_cfi" => cfi::run(ir, &spec.options)?,
            _ => unreachable!("validated above"),
        }
        let violations = crate::irdb::validate(ir);
        if !violations.is_empty() {
            return Err(TransformError::PostValidation { transform: spec.name.clone(), violations });
        }
    }
    Ok(notes)
}

/// Default random stream for the transform at `index`.
fn derived_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Parses a decimal or `0x`-prefixed option value.
fn parse_u32(transform: &str, key: &str, value: &str) -> Result<u32, TransformError> {
    let parsed = match value.strip_prefix("0x") {
        Some(hex) => u32::from_str_radix(hex, 16),
        None => value.parse(),
    };
    parsed.map_err(|e| TransformError::BadValue {
        transform: transform.to_string(),
        key: key.to_string(),
        value: value.to_string(),
        why: e.to_string(),
    })
}

fn parse_u64(transform: &str, key: &str, value: &str) -> Result<u64, TransformError> {
    let parsed = match value.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => value.parse(),
    };
    parsed.map_err(|e| TransformError::BadValue {
        transform: transform.to_string(),
        key: key.to_string(),
        value: value.to_string(),
        why: e.to_string(),
    })
}

fn opt_u32(
    opts: &BTreeMap<String, String>,
    transform: &str,
    key: &str,
    default: u32,
) -> Result<u32, TransformError> {
    match opts.get(key) {
        Some(v) => parse_u32(transform, key, v),
        None => Ok(default),
    }
}

// ---- shared structural helpers -------------------------------------------

/// The function whose head is the program entry record, if any.
fn entry_function(ir: &ProgramIR) -> Option<FuncId> {
    ir.functions.values().find(|f| f.head == ir.entry_record).map(|f| f.id)
}

/// How many functions claim each record.
fn member_ownership(ir: &ProgramIR) -> BTreeMap<InstrId, usize> {
    let mut own: BTreeMap<InstrId, usize> = BTreeMap::new();
    for f in ir.functions.values() {
        for &m in &f.members {
            *own.entry(m).or_default() += 1;
        }
    }
    own
}

/// True when some member reaches the head by branch or jump (not by call).
/// A once-per-entry prologue cannot be placed in front of such a head: the
/// loop edge would re-execute it.
fn head_is_branch_target(ir: &ProgramIR, f: FuncId) -> bool {
    let func = &ir.functions[&f];
    func.members.iter().any(|&m| {
        let rec = ir.record(m);
        !rec.instr.is_call() && rec.target == Some(func.head)
    })
}

/// True when any member record is shared with another function. Entry/exit
/// instrumentation pairs only balance if every path through the function
/// belongs to this function alone.
fn shares_members(own: &BTreeMap<InstrId, usize>, ir: &ProgramIR, f: FuncId) -> bool {
    ir.functions[&f].members.iter().any(|m| own.get(m).copied().unwrap_or(0) > 1)
}

/// Deepest stack slot the function's own (lifted) code touches, in words:
/// the maximum `k` over `LOAD`/`STORE [sp-4k]` accesses.
fn max_frame_words(ir: &ProgramIR, f: FuncId) -> u32 {
    let mut max = 0u32;
    for &m in &ir.functions[&f].members {
        let rec = ir.record(m);
        if rec.original_address.is_none() {
            continue;
        }
        let disp = match rec.instr {
            Instr::Load { base, offset, .. } if base == Reg::SP => Some(offset),
            Instr::Store { base, offset, .. } if base == Reg::SP => Some(offset),
            _ => None,
        };
        if let Some(d) = disp {
            if d < 0 {
                max = max.max(((-(d as i32)) as u32).div_ceil(4));
            }
        }
    }
    max
}

/// True when lifted code in the function addresses the stack at or above the
/// incoming pointer (`[sp+d]`, `d >= 0`): the frame cannot be moved.
fn has_nonnegative_sp_access(ir: &ProgramIR, f: FuncId) -> bool {
    ir.functions[&f].members.iter().any(|&m| {
        let rec = ir.record(m);
        if rec.original_address.is_none() {
            return false;
        }
        match rec.instr {
            Instr::Load { base, offset, .. } | Instr::Store { base, offset, .. } => {
                base == Reg::SP && offset >= 0
            }
            _ => false,
        }
    })
}

/// Registers provably dead before each record, merged across functions: a
/// record claimed by several functions only keeps registers every owner
/// agrees are dead.
fn merged_dead_map(ir: &ProgramIR) -> BTreeMap<InstrId, crate::isa::RegSet> {
    let mut dead: BTreeMap<InstrId, crate::isa::RegSet> = BTreeMap::new();
    for f in ir.functions.keys().copied().collect::<Vec<_>>() {
        for (id, regs) in crate::analyses::live::dead_before_map(ir, f) {
            dead.entry(id)
                .and_modify(|cur| *cur = cur.minus(cur.minus(regs)))
                .or_insert(regs);
        }
    }
    dead
}

/// Member records holding a `RET`.
fn ret_members(ir: &ProgramIR, f: FuncId) -> Vec<InstrId> {
    ir.functions[&f]
        .members
        .iter()
        .copied()
        .filter(|&m| ir.record(m).instr == Instr::Ret)
        .collect()
}

/// First record at or after `id` (following fallthroughs) that carries an
/// original address: the start of the function's own code, past any
/// previously inserted straight-line prologue. Inserting there runs new code
/// after the existing prologue.
fn past_inserted_prologue(ir: &ProgramIR, id: InstrId) -> InstrId {
    let mut cur = id;
    loop {
        let r = ir.record(cur);
        if r.original_address.is_some() || r.instr.is_control() {
            return cur;
        }
        match r.fallthrough {
            Some(n) => cur = n,
            None => return cur,
        }
    }
}

/// Walks backward from `id` through straight-line inserted code, returning
/// the earliest record whose execution always continues into `id`. Inserting
/// there runs new code before everything already inserted in front of `id`,
/// on every path that reaches `id`.
fn before_inserted_epilogue(ir: &ProgramIR, f: FuncId, id: InstrId) -> InstrId {
    let members = &ir.functions[&f].members;
    let mut cur = id;
    loop {
        let mut preds = members.iter().copied().filter(|&m| {
            let r = ir.record(m);
            m != cur && (r.fallthrough == Some(cur) || r.target == Some(cur))
        });
        let (Some(p), None) = (preds.next(), preds.next()) else {
            return cur;
        };
        let pr = ir.record(p);
        if pr.original_address.is_some() || pr.instr.is_control() {
            return cur;
        }
        cur = p;
    }
}

/// Does `[base, base+size)` overlap the text region or any data object?
fn region_collides(ir: &ProgramIR, base: u32, size: u32) -> Option<String> {
    let Some(end) = base.checked_add(size) else {
        return Some("region wraps the address space".to_string());
    };
    let overlap = |lo: u32, hi: u32| base < hi && lo < end;
    if overlap(ir.text_base, ir.text_base + ir.text_size) {
        return Some("text region".to_string());
    }
    for obj in ir.data_objects.values() {
        if overlap(obj.vaddr, obj.vaddr + obj.bytes.len() as u32) {
            return Some(format!("data object at {:#010x}", obj.vaddr));
        }
    }
    None
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::asm::Asm;
    use crate::frontend::lift;
    use crate::irdb::ProgramIR;
    use crate::vm::{self, ExecutionResult};
    use crate::zxe::{Executable, Section};

    /// Lifts an assembled program.
    pub(crate) fn lifted(build: impl FnOnce(&mut Asm), data: Vec<Section>) -> (Executable, ProgramIR) {
        let mut a = Asm::new(0x1000);
        build(&mut a);
        let exe = a.finish().unwrap().into_exe("entry", data).unwrap();
        let ir = lift(&exe, "test").unwrap();
        (exe, ir)
    }

    /// Reconstitutes a runnable binary from the database.
    pub(crate) fn emit(ir: &ProgramIR) -> Executable {
        crate::backend::rewrite(ir).unwrap().exe
    }

    /// Runs a program to completion with empty input.
    pub(crate) fn run(exe: &Executable) -> ExecutionResult {
        vm::run(exe, &[])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parsing_accepts_options() {
        let spec = parse_spec("kill_deads:value=0xABCD1234").unwrap();
        assert_eq!(spec.name, "kill_deads");
        assert_eq!(spec.options["value"], "0xABCD1234");
        assert_eq!(parse_spec("selective_cfi").unwrap().options.len(), 0);
    }

    #[test]
    fn unknown_transform_is_rejected() {
        assert!(matches!(
            parse_spec("rot13_code"),
            Err(TransformError::UnknownTransform(n)) if n == "rot13_code"
        ));
    }

    #[test]
    fn unknown_option_key_is_rejected() {
        assert!(matches!(
            parse_spec("kill_deads:colour=red"),
            Err(TransformError::UnknownOption { transform, key })
                if transform == "kill_deads" && key == "colour"
        ));
    }

    #[test]
    fn stamp_after_pad_is_rejected_before_any_edit() {
        let (_, mut ir) = testutil::lifted(
            |a| {
                a.label("entry");
                a.i(Instr::Halt);
            },
            vec![],
        );
        let before = ir.clone();
        let specs = vec![parse_spec("p1_pad").unwrap(), parse_spec("stack_stamp").unwrap()];
        assert!(matches!(apply_transforms(&mut ir, &specs, 1), Err(TransformError::StampAfterPad)));
        assert_eq!(ir, before, "failed ordering check must not edit the database");
    }

    #[test]
    fn empty_transform_list_is_identity() {
        let (_, mut ir) = testutil::lifted(
            |a| {
                a.label("entry");
                a.i(Instr::Halt);
            },
            vec![],
        );
        let before = ir.clone();
        apply_transforms(&mut ir, &[], 7).unwrap();
        assert_eq!(ir, before);
    }
}
