//! `selective_cfi`: gate indirect transfers through a valid-target table.
//!
//! The table is a new data section holding every pinned address in ascending
//! order, closed by an all-ones sentinel. Pinned addresses are exactly the
//! places an indirect transfer can legitimately land after rewriting, so the
//! set doubles as the control-flow policy. Before each `CALLR`/`JMPR` whose
//! target register cannot be proven constant, a check walks the table:
//!
//! ```text
//! PUSH a; PUSH b
//! a = &table
//! loop: b = [a]
//!       b == sentinel ? -> miss
//!       b == target   ? -> hit
//!       a += 4; goto loop
//! miss: r0 = 139; SYS 0            (exit; never returns)
//! hit:  POP b; POP a               (fall into the original transfer)
//! ```
//!
//! The selective part: a forward constant-propagation pass over each
//! function finds transfers whose register provably holds one fixed address
//! on every path (a `MOVI`-fed dispatch, say). A constant the program itself
//! placed cannot be bent by an attacker, so those sites keep zero inserted
//! instructions. The check clobbers the comparison flags, which is safe
//! because no conforming program carries flags across an indirect transfer.

use std::collections::{BTreeMap, VecDeque};

use crate::irdb::{InstrId, ProgramIR};
use crate::isa::{AluImmOp, BranchOff, Cond, Instr, Reg, NUM_REGS};

use super::{region_collides, TransformError};

const TABLE_BASE: u32 = 0x3000_0000;
const SENTINEL: u32 = 0xFFFF_FFFF;
const EXIT_CODE: u32 = 139;

pub(super) fn run(
    ir: &mut ProgramIR,
    _opts: &BTreeMap<String, String>,
) -> Result<(), TransformError> {
    let sites: Vec<InstrId> = ir
        .records
        .values()
        .filter(|r| matches!(r.instr, Instr::CallR { .. } | Instr::JmpR { .. }))
        .map(|r| r.id)
        .collect();
    let known = known_targets(ir);
    let checked: Vec<InstrId> = sites
        .into_iter()
        .filter(|s| !known.get(s).is_some_and(|v| ir.pins.contains_key(v)))
        .collect();
    if checked.is_empty() {
        return Ok(());
    }

    let mut words: Vec<u32> = ir.pins.keys().copied().collect();
    words.push(SENTINEL);
    let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
    if let Some(what) = region_collides(ir, TABLE_BASE, bytes.len() as u32) {
        return Err(TransformError::Unapplicable {
            transform: "selective_cfi".into(),
            why: format!("target table at {TABLE_BASE:#010x} overlaps {what}"),
        });
    }
    ir.alloc_object(TABLE_BASE, bytes);

    for site in checked {
        instrument_site(ir, site);
    }
    Ok(())
}

/// Lattice for one register's value along one path set.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Lat {
    Unreached,
    Const(u32),
    Varying,
}

fn meet(x: Lat, y: Lat) -> Lat {
    match (x, y) {
        (Lat::Unreached, v) | (v, Lat::Unreached) => v,
        (Lat::Const(a), Lat::Const(b)) if a == b => Lat::Const(a),
        _ => Lat::Varying,
    }
}

fn apply(instr: &Instr, regs: &mut [Lat; NUM_REGS]) {
    match *instr {
        Instr::Movi { dst, imm } => regs[dst.index() as usize] = Lat::Const(imm),
        Instr::Mov { dst, src } => regs[dst.index() as usize] = regs[src.index() as usize],
        _ => {
            for r in instr.writes().iter() {
                regs[r.index() as usize] = Lat::Varying;
            }
            if instr.is_call() {
                for r in 0..4 {
                    regs[r] = Lat::Varying; // callee-clobbered
                }
            }
            if matches!(instr, Instr::Sys { .. }) {
                regs[0] = Lat::Varying; // input reads land in r0
            }
        }
    }
}

/// For each indirect transfer inside some function, the one value its target
/// register holds on every path from the head — when such a value exists and
/// every owning function agrees on it.
fn known_targets(ir: &ProgramIR) -> BTreeMap<InstrId, u32> {
    let mut known: BTreeMap<InstrId, Option<u32>> = BTreeMap::new();
    for f in ir.functions.values() {
        let mut state: BTreeMap<InstrId, [Lat; NUM_REGS]> =
            f.members.iter().map(|&m| (m, [Lat::Unreached; NUM_REGS])).collect();
        state.insert(f.head, [Lat::Varying; NUM_REGS]);
        let mut work: VecDeque<InstrId> = VecDeque::from([f.head]);
        while let Some(id) = work.pop_front() {
            let rec = ir.record(id);
            let mut out = state[&id];
            apply(&rec.instr, &mut out);
            let flow = |next: Option<InstrId>,
                            state: &mut BTreeMap<InstrId, [Lat; NUM_REGS]>,
                            work: &mut VecDeque<InstrId>| {
                let Some(n) = next else { return };
                let Some(cur) = state.get_mut(&n) else { return };
                let mut changed = false;
                for i in 0..NUM_REGS {
                    let m = meet(cur[i], out[i]);
                    if m != cur[i] {
                        cur[i] = m;
                        changed = true;
                    }
                }
                if changed {
                    work.push_back(n);
                }
            };
            flow(rec.fallthrough, &mut state, &mut work);
            if !rec.instr.is_call() {
                flow(rec.target, &mut state, &mut work);
            }
        }
        for &m in &f.members {
            let t = match ir.record(m).instr {
                Instr::CallR { target } | Instr::JmpR { target } => target,
                _ => continue,
            };
            let v = match state[&m][t.index() as usize] {
                Lat::Const(v) => Some(v),
                _ => None,
            };
            known
                .entry(m)
                .and_modify(|cur| {
                    if *cur != v {
                        *cur = None;
                    }
                })
                .or_insert(v);
        }
    }
    known.into_iter().filter_map(|(id, v)| v.map(|v| (id, v))).collect()
}

/// Splices the table-walk check in front of one transfer. The site record
/// keeps its identity (pins and incoming edges land on the check), and the
/// displaced transfer runs only from the `hit` exit.
fn instrument_site(ir: &mut ProgramIR, site: InstrId) {
    let t = match ir.record(site).instr {
        Instr::CallR { target } | Instr::JmpR { target } => target,
        _ => unreachable!("only indirect transfers are instrumented"),
    };
    let mut scratch = Reg::all().filter(|&r| r != Reg::SP && r != t);
    let a = scratch.next().unwrap();
    let b = scratch.next().unwrap();
    let rel = BranchOff::Rel32(0); // placeholder; emission resolves by identity

    let y = ir.displace(site);
    let function = ir.record(y).function;
    let fresh = |ir: &mut ProgramIR, i: Instr| {
        let id = ir.alloc_record(i);
        ir.record_mut(id).function = function;
        id
    };
    let push_b = fresh(ir, Instr::Push { src: b });
    let table = fresh(ir, Instr::Movi { dst: a, imm: TABLE_BASE });
    let load = fresh(ir, Instr::Load { dst: b, base: a, offset: 0 });
    let at_end = fresh(ir, Instr::Cmpi { a: b, imm: SENTINEL });
    let br_miss = fresh(ir, Instr::Br { cond: Cond::Z, off: rel });
    let found = fresh(ir, Instr::Cmp { a: b, b: t });
    let br_hit = fresh(ir, Instr::Br { cond: Cond::Z, off: rel });
    let advance = fresh(ir, Instr::AluImm { op: AluImmOp::Addi, dst: a, imm: 4 });
    let again = fresh(ir, Instr::Jmp { off: rel });
    let miss = fresh(ir, Instr::Movi { dst: Reg::R0, imm: EXIT_CODE });
    let exit = fresh(ir, Instr::Sys { code: 0 });
    let pop_b = fresh(ir, Instr::Pop { dst: b });
    let pop_a = fresh(ir, Instr::Pop { dst: a });

    {
        let r = ir.record_mut(site);
        r.instr = Instr::Push { src: a };
        r.target = None;
        r.fallthrough = Some(push_b);
    }
    let ft = [
        (push_b, table),
        (table, load),
        (load, at_end),
        (at_end, br_miss),
        (br_miss, found),
        (found, br_hit),
        (br_hit, advance),
        (advance, again),
        (miss, exit),
        (exit, pop_b), // statically valid link; SYS 0 never returns
        (pop_b, pop_a),
        (pop_a, y),
    ];
    for (from, to) in ft {
        ir.record_mut(from).fallthrough = Some(to);
    }
    ir.record_mut(br_miss).target = Some(miss);
    ir.record_mut(br_hit).target = Some(pop_b);
    ir.record_mut(again).target = Some(load);

    let chain =
        [push_b, table, load, at_end, br_miss, found, br_hit, advance, again, miss, exit, pop_b, pop_a];
    for fid in ir.functions_containing(site) {
        let members = &mut ir.functions.get_mut(&fid).unwrap().members;
        for id in chain {
            members.insert(id);
        }
    }
}
