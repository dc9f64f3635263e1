//! Seeded generation of well-behaved test programs.
//!
//! The rewriting pipeline, and especially the stack-reshaping transforms,
//! assume the programs they are given follow a few calling conventions
//! (see [`check_abi`] for the list). This module produces arbitrarily many
//! deterministic programs inside that envelope — arithmetic chains, counted
//! loops, direct and table-indirect calls, tail dispatch through a jump
//! table, stack locals, and console I/O — together with the input bytes and
//! the expected execution result for each.
//!
//! Generation is two-phase: a planning pass spends all the randomness and
//! produces a [`Plan`] of nested shapes with exact cost accounting, then a
//! deterministic emission pass assembles it. Identical seeds therefore give
//! byte-identical containers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::asm::Asm;
use crate::isa::{AluImmOp, AluOp, Cond, Instr, Reg, ShiftOp};
use crate::vm::{self, Outcome};
use crate::zxe::{Executable, Section};

/// Where generated code is assembled.
pub const TEXT_BASE: u32 = 0x1000;
/// Read-only seeded words and the indirect-call tables live here.
const CONST_BASE: u32 = 0x0010_0000;
/// A zero-initialised read/write area the programs scribble in.
const SCRATCH_BASE: u32 = 0x0020_0000;
const SCRATCH_WORDS: u32 = 64;
/// Estimated-dynamic-instruction ceiling enforced while planning; keeps every
/// program far below the emulator's default step limit.
const DYN_CAP: u64 = 2_000_000;
/// A program that still fails to terminate is re-rolled this many times.
const MAX_RETRIES: u64 = 8;

/// How big a generated program aims to be, as an instruction budget.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    /// Upper bound on emitted instructions for the class.
    pub fn budget(self) -> usize {
        match self {
            SizeClass::Small => 200,
            SizeClass::Medium => 2_000,
            SizeClass::Large => 20_000,
        }
    }

    /// The standard mix: 80% small, 15% medium, 5% large, decided by seed.
    pub fn for_seed(seed: u64) -> SizeClass {
        match seed % 20 {
            0..=15 => SizeClass::Small,
            16..=18 => SizeClass::Medium,
            _ => SizeClass::Large,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }
}

/// One generated program plus everything needed to test against it.
#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub seed: u64,
    pub class: SizeClass,
    pub exe: Executable,
    pub input: Vec<u8>,
    /// The emulator's verdict on the untouched binary — the differential
    /// harness's control arm.
    pub expected: vm::ExecutionResult,
}

/// Generates the standard corpus: seeds `1..=count` with the 80/15/5 mix.
pub fn standard_corpus(count: u32) -> Vec<CorpusEntry> {
    (1..=count as u64)
        .map(|seed| generate(seed, SizeClass::for_seed(seed)))
        .collect()
}

/// Generates one program. If a candidate does not exit cleanly within the
/// default step limit it is re-rolled from a perturbed seed (bounded retries;
/// the cost accounting makes this nearly impossible to exhaust).
pub fn generate(seed: u64, class: SizeClass) -> CorpusEntry {
    for retry in 0..MAX_RETRIES {
        let (exe, input) = build_program(seed ^ (retry << 56), class);
        let expected = vm::run_with_limit(&exe, &input, vm::DEFAULT_STEP_LIMIT);
        if matches!(expected.outcome, Outcome::Exit(_)) {
            return CorpusEntry { seed, class, exe, input, expected };
        }
    }
    panic!("seed {seed}: no terminating program within {MAX_RETRIES} retries");
}

// ---------------------------------------------------------------------------
// Planning

/// General-purpose register pool. r0 is reserved for the console ops, r6/r7
/// for the two loop-nesting levels, so values survive across loop bodies.
const POOL: [Reg; 5] = [Reg::R1, Reg::R2, Reg::R3, Reg::R4, Reg::R5];
const LOOP_COUNTERS: [Reg; 2] = [Reg::R6, Reg::R7];

#[derive(Clone, Debug)]
enum Shape {
    Op(Instr),
    LocalWrite { slot: u8, src: Reg },
    LocalRead { slot: u8, dst: Reg },
    ScratchWrite { slot: u32, src: Reg, addr: Reg },
    ScratchRead { slot: u32, dst: Reg, addr: Reg },
    ConstRead { word: u32, dst: Reg, addr: Reg },
    PrintDec { src: Reg },
    PutChar { src: Reg },
    ReadByte { dst: Reg },
    Loop { counter: Reg, trips: u32, body: Vec<Shape> },
    If { cmp: Instr, cond: Cond, then_: Vec<Shape>, else_: Vec<Shape> },
    CallDirect { callee: usize },
    /// Load the target from a data-section table slot, then call it.
    CallTable { table: usize, slot: usize, tmp: Reg, addr: Reg },
    /// Materialise the target with a code-pointer constant, then call it.
    CallMovi { callee: usize, tmp: Reg },
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Kind {
    Entry,
    Normal,
    /// Masks a selector, loads a target from its table, and tail-jumps.
    Dispatcher { table: usize },
}

#[derive(Clone, Debug)]
struct FuncPlan {
    kind: Kind,
    locals: u8,
    body: Vec<Shape>,
}

#[derive(Clone, Debug)]
struct Plan {
    funcs: Vec<FuncPlan>,
    /// Indirect-call and dispatch tables; entries are function indices.
    tables: Vec<Vec<usize>>,
    consts: Vec<u32>,
    input: Vec<u8>,
}

/// Emitted-instruction count of a shape; must match `emit_shape` exactly.
fn static_cost(shape: &Shape) -> usize {
    match shape {
        Shape::Op(_) | Shape::LocalWrite { .. } | Shape::LocalRead { .. } => 1,
        Shape::ScratchWrite { .. }
        | Shape::ScratchRead { .. }
        | Shape::ConstRead { .. }
        | Shape::PrintDec { .. }
        | Shape::PutChar { .. }
        | Shape::ReadByte { .. } => 2,
        Shape::Loop { body, .. } => 4 + body.iter().map(static_cost).sum::<usize>(),
        Shape::If { then_, else_, .. } => {
            3 + then_.iter().map(static_cost).sum::<usize>()
                + else_.iter().map(static_cost).sum::<usize>()
        }
        Shape::CallDirect { .. } => 3,
        Shape::CallTable { .. } => 5,
        Shape::CallMovi { .. } => 4,
    }
}

/// Estimated executed-instruction count, with callee costs folded in.
fn dyn_cost(shape: &Shape, func_dyn: &[u64]) -> u64 {
    match shape {
        Shape::Loop { trips, body, .. } => {
            let inner: u64 = body.iter().map(|s| dyn_cost(s, func_dyn)).sum();
            1 + (*trips as u64) * (inner + 3)
        }
        Shape::If { then_, else_, .. } => {
            let t: u64 = then_.iter().map(|s| dyn_cost(s, func_dyn)).sum();
            let e: u64 = else_.iter().map(|s| dyn_cost(s, func_dyn)).sum();
            3 + t.max(e)
        }
        Shape::CallDirect { callee } | Shape::CallMovi { callee, .. } => {
            static_cost(shape) as u64 + func_dyn[*callee]
        }
        Shape::CallTable { table: _, .. } => 0, // patched by the planner
        s => static_cost(s) as u64,
    }
}

/// A constant that can never collide with a code address: either a small
/// value or one far above any generated text section.
fn safe_const(rng: &mut ChaCha8Rng) -> u32 {
    if rng.random_bool(0.6) {
        rng.random_range(0..0x800)
    } else {
        rng.random_range(0x0040_0000..0x1fff_0000)
    }
}

/// Which pool registers hold a value this function produced (or received as
/// an argument). Reads are restricted to this set so the only values that
/// ever flow across a call boundary travel in the argument registers r1–r3 —
/// exactly the set the liveness model says a call consumes. Anything else
/// would be clobbered by dead-register poisoning.
#[derive(Clone, Copy)]
struct RegInit(u8);

impl RegInit {
    fn args() -> RegInit {
        RegInit(0b0000_0111) // r1, r2, r3
    }

    /// A register that is safe to read.
    fn src(self, rng: &mut ChaCha8Rng) -> Reg {
        let live: Vec<Reg> =
            POOL.iter().enumerate().filter(|(i, _)| self.0 & (1 << i) != 0).map(|(_, &r)| r).collect();
        live[rng.random_range(0..live.len())]
    }

    /// A register about to be overwritten; any pool register qualifies.
    fn dst(&mut self, rng: &mut ChaCha8Rng) -> Reg {
        let i = rng.random_range(0..POOL.len());
        self.0 |= 1 << i;
        POOL[i]
    }
}

struct Planner {
    rng: ChaCha8Rng,
    tables: Vec<Vec<usize>>,
    /// Transitive estimated dynamic cost per function, filled callee-first.
    func_dyn: Vec<u64>,
    levels: Vec<usize>,
}

impl Planner {
    /// Functions callable from `i`: strictly deeper in the level order, so
    /// the call graph is acyclic with chains no longer than eight calls.
    fn candidates(&self, i: usize) -> Vec<usize> {
        (0..self.levels.len()).filter(|&j| self.levels[j] > self.levels[i]).collect()
    }

    fn table_for(&mut self, entries: usize, candidates: &[usize]) -> usize {
        let t: Vec<usize> = (0..entries)
            .map(|_| candidates[self.rng.random_range(0..candidates.len())])
            .collect();
        self.tables.push(t);
        self.tables.len() - 1
    }

    fn simple_shape(&mut self, locals: u8, written: &mut u32, init: &mut RegInit) -> Shape {
        let rng = &mut self.rng;
        match rng.random_range(0..10) {
            0 => Shape::Op(Instr::Movi { dst: init.dst(rng), imm: safe_const(rng) }),
            1 => {
                let ops = [AluOp::Add, AluOp::Sub, AluOp::Xor, AluOp::And, AluOp::Or];
                // Read-modify-write: both operands must hold local values.
                Shape::Op(Instr::Alu {
                    op: ops[rng.random_range(0..ops.len())],
                    dst: init.src(rng),
                    src: init.src(rng),
                })
            }
            2 => {
                let op = if rng.random_bool(0.5) { AluImmOp::Addi } else { AluImmOp::Xori };
                Shape::Op(Instr::AluImm { op, dst: init.src(rng), imm: safe_const(rng) })
            }
            3 => {
                let op = if rng.random_bool(0.5) { ShiftOp::Shl } else { ShiftOp::Shr };
                Shape::Op(Instr::ShiftImm {
                    op,
                    dst: init.src(rng),
                    amount: rng.random_range(1..8),
                })
            }
            4 => Shape::Op(Instr::Mov { src: init.src(rng), dst: init.dst(rng) }),
            5 if locals > 0 => {
                let slot = rng.random_range(1..=locals);
                *written |= 1 << slot;
                Shape::LocalWrite { slot, src: init.src(rng) }
            }
            6 if locals > 0 && *written != 0 => {
                let set: Vec<u8> = (1..=locals).filter(|k| *written & (1 << k) != 0).collect();
                let slot = set[rng.random_range(0..set.len())];
                Shape::LocalRead { slot, dst: init.dst(rng) }
            }
            7 => Shape::ScratchWrite {
                slot: rng.random_range(0..SCRATCH_WORDS),
                src: init.src(rng),
                addr: init.dst(rng),
            },
            8 => match rng.random_range(0..3) {
                0 => Shape::PrintDec { src: init.src(rng) },
                1 => Shape::PutChar { src: init.src(rng) },
                _ => Shape::ReadByte { dst: init.dst(rng) },
            },
            _ => Shape::ScratchRead {
                slot: rng.random_range(0..SCRATCH_WORDS),
                dst: init.dst(rng),
                addr: init.dst(rng),
            },
        }
    }

    fn cmp_shape(&mut self, init: RegInit) -> (Instr, Cond) {
        let rng = &mut self.rng;
        let cmp = if rng.random_bool(0.5) {
            Instr::Cmp { a: init.src(rng), b: init.src(rng) }
        } else {
            Instr::Cmpi { a: init.src(rng), imm: safe_const(rng) }
        };
        let conds = [Cond::Z, Cond::Nz, Cond::Lt, Cond::Ge];
        (cmp, conds[rng.random_range(0..conds.len())])
    }

    fn block(
        &mut self,
        len: usize,
        locals: u8,
        written: &mut u32,
        init: &mut RegInit,
        consts: usize,
    ) -> Vec<Shape> {
        (0..len)
            .map(|_| {
                if self.rng.random_bool(0.15) && consts > 0 {
                    let word = self.rng.random_range(0..consts as u32);
                    Shape::ConstRead {
                        word,
                        dst: init.dst(&mut self.rng),
                        addr: init.dst(&mut self.rng),
                    }
                } else {
                    self.simple_shape(locals, written, init)
                }
            })
            .collect()
    }

    /// Plans one function body within `budget` emitted instructions and the
    /// program-wide dynamic ceiling, returning (shapes, dynamic estimate).
    fn body(&mut self, i: usize, locals: u8, budget: usize, consts: usize) -> (Vec<Shape>, u64) {
        let mut shapes = Vec::new();
        let mut cost = 0usize;
        let mut dynamic = 0u64;
        // Pre-writing every local keeps all later reads write-before-read on
        // every path, which the frame-zeroing transform relies on.
        let mut written: u32 = 0;
        let mut init = RegInit::args();
        let mut calls_left = 2u32;
        let candidates = self.candidates(i);

        while cost + 8 < budget {
            let roll = self.rng.random_range(0..100);
            let shape = if roll < 55 {
                self.simple_shape(locals, &mut written, &mut init)
            } else if roll < 70 {
                let trips = self.rng.random_range(1..=6);
                let len = self.rng.random_range(1..=4);
                let body = self.block(len, locals, &mut written, &mut init, consts);
                Shape::Loop { counter: LOOP_COUNTERS[0], trips, body }
            } else if roll < 82 {
                let (cmp, cond) = self.cmp_shape(init);
                let tlen = self.rng.random_range(1..=3);
                let elen = self.rng.random_range(1..=3);
                // State after the branch is what both arms guarantee, so
                // later reads stay safe on either path.
                let (mut tw, mut ew) = (written, written);
                let (mut ti, mut ei) = (init, init);
                let then_ = self.block(tlen, locals, &mut tw, &mut ti, consts);
                let else_ = self.block(elen, locals, &mut ew, &mut ei, consts);
                written = tw & ew;
                init = RegInit(ti.0 & ei.0);
                Shape::If { cmp, cond, then_, else_ }
            } else if roll < 94 && calls_left > 0 && !candidates.is_empty() {
                calls_left -= 1;
                let callee = candidates[self.rng.random_range(0..candidates.len())];
                match self.rng.random_range(0..3) {
                    0 => Shape::CallDirect { callee },
                    1 => Shape::CallMovi { callee, tmp: init.dst(&mut self.rng) },
                    _ => {
                        let entries = self.rng.random_range(2..=4);
                        let table = self.table_for(entries, &candidates);
                        let slot = self.rng.random_range(0..entries);
                        let tmp = init.dst(&mut self.rng);
                        let addr = init.dst(&mut self.rng);
                        Shape::CallTable { table, slot, tmp, addr }
                    }
                }
            } else {
                self.simple_shape(locals, &mut written, &mut init)
            };

            let d = match &shape {
                Shape::CallTable { table, .. } => {
                    // Worst entry in the table, since any may run.
                    5 + self.tables[*table].iter().map(|&j| self.func_dyn[j]).max().unwrap_or(0)
                }
                s => dyn_cost(s, &self.func_dyn),
            };
            if dynamic + d > DYN_CAP {
                break;
            }
            dynamic += d;
            cost += static_cost(&shape);
            shapes.push(shape);
        }
        (shapes, dynamic)
    }
}

fn build_plan(seed: u64, class: SizeClass) -> Plan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_funcs = match class {
        SizeClass::Small => rng.random_range(2..=4),
        SizeClass::Medium => rng.random_range(4..=8),
        SizeClass::Large => rng.random_range(8..=14),
    };
    let budget_per = class.budget() / n_funcs;
    let consts: Vec<u32> = (0..rng.random_range(8..=32)).map(|_| safe_const(&mut rng)).collect();
    let input: Vec<u8> = (0..rng.random_range(0..=12)).map(|_| rng.random()).collect();
    let levels: Vec<usize> = (0..n_funcs).map(|i| i * 8 / n_funcs).collect();

    // One mid-program function becomes a tail dispatcher when it has at
    // least two deeper functions to fan out to.
    let dispatcher = if n_funcs >= 3 && rng.random_bool(0.6) {
        let i = rng.random_range(1..n_funcs - 1);
        let deeper = (0..n_funcs).filter(|&j| levels[j] > levels[i]).count();
        (deeper >= 2).then_some(i)
    } else {
        None
    };

    let mut planner = Planner { rng, tables: Vec::new(), func_dyn: vec![0; n_funcs], levels };

    // Deepest functions first, so callers always know their callees' cost.
    let mut funcs: Vec<Option<FuncPlan>> = vec![None; n_funcs];
    for i in (0..n_funcs).rev() {
        if dispatcher == Some(i) {
            let candidates = planner.candidates(i);
            let entries = if planner.rng.random_bool(0.5) { 2 } else { 4 };
            let table = planner.table_for(entries, &candidates);
            let worst =
                planner.tables[table].iter().map(|&j| planner.func_dyn[j]).max().unwrap_or(0);
            planner.func_dyn[i] = 7 + worst;
            funcs[i] = Some(FuncPlan { kind: Kind::Dispatcher { table }, locals: 0, body: vec![] });
            continue;
        }
        let kind = if i == 0 { Kind::Entry } else { Kind::Normal };
        let locals = planner.rng.random_range(0..=4);
        // Head overhead: warmup + local inits + tail (exit or return).
        let overhead = 2 + 2 * locals as usize + 4;
        let (body, dynamic) = planner.body(i, locals, budget_per.saturating_sub(overhead), consts.len());
        planner.func_dyn[i] = dynamic + overhead as u64;
        funcs[i] = Some(FuncPlan { kind, locals, body });
    }

    Plan {
        funcs: funcs.into_iter().map(Option::unwrap).collect(),
        tables: planner.tables,
        consts,
        input,
    }
}

// ---------------------------------------------------------------------------
// Emission

struct Emitter {
    asm: Asm,
    next_label: u32,
}

impl Emitter {
    fn fresh(&mut self) -> String {
        self.next_label += 1;
        format!("L{}", self.next_label)
    }

    fn shape(&mut self, s: &Shape, locals: u8, table_vaddrs: &[u32]) {
        match s {
            Shape::Op(i) => {
                self.asm.i(*i);
            }
            Shape::LocalWrite { slot, src } => {
                self.asm.i(Instr::Store { base: Reg::SP, offset: -4 * *slot as i16, src: *src });
            }
            Shape::LocalRead { slot, dst } => {
                self.asm.i(Instr::Load { dst: *dst, base: Reg::SP, offset: -4 * *slot as i16 });
            }
            Shape::ScratchWrite { slot, src, addr } => {
                self.asm.i(Instr::Movi { dst: *addr, imm: SCRATCH_BASE + 4 * slot });
                self.asm.i(Instr::Store { base: *addr, offset: 0, src: *src });
            }
            Shape::ScratchRead { slot, dst, addr } => {
                self.asm.i(Instr::Movi { dst: *addr, imm: SCRATCH_BASE + 4 * slot });
                self.asm.i(Instr::Load { dst: *dst, base: *addr, offset: 0 });
            }
            Shape::ConstRead { word, dst, addr } => {
                self.asm.i(Instr::Movi { dst: *addr, imm: CONST_BASE + 4 * word });
                self.asm.i(Instr::Load { dst: *dst, base: *addr, offset: 0 });
            }
            Shape::PrintDec { src } => {
                self.asm.i(Instr::Mov { dst: Reg::R0, src: *src });
                self.asm.i(Instr::Sys { code: 3 });
            }
            Shape::PutChar { src } => {
                self.asm.i(Instr::Mov { dst: Reg::R0, src: *src });
                self.asm.i(Instr::Sys { code: 1 });
            }
            Shape::ReadByte { dst } => {
                self.asm.i(Instr::Sys { code: 2 });
                self.asm.i(Instr::Mov { dst: *dst, src: Reg::R0 });
            }
            Shape::Loop { counter, trips, body } => {
                let head = self.fresh();
                self.asm.i(Instr::Movi { dst: *counter, imm: *trips });
                self.asm.label(&head);
                for s in body {
                    self.shape(s, locals, table_vaddrs);
                }
                self.asm.i(Instr::AluImm { op: AluImmOp::Addi, dst: *counter, imm: u32::MAX });
                self.asm.i(Instr::Cmpi { a: *counter, imm: 0 });
                self.asm.br(Cond::Nz, &head);
            }
            Shape::If { cmp, cond, then_, else_ } => {
                let (then_l, join) = (self.fresh(), self.fresh());
                self.asm.i(*cmp);
                self.asm.br(*cond, &then_l);
                for s in else_ {
                    self.shape(s, locals, table_vaddrs);
                }
                self.asm.jmp(&join);
                self.asm.label(&then_l);
                for s in then_ {
                    self.shape(s, locals, table_vaddrs);
                }
                self.asm.label(&join);
            }
            Shape::CallDirect { callee } => {
                self.bracket_down(locals);
                self.asm.call(&format!("f{callee}"));
                self.bracket_up(locals);
            }
            Shape::CallTable { table, slot, tmp, addr } => {
                let vaddr = table_vaddrs[*table] + 4 * *slot as u32;
                self.asm.i(Instr::Movi { dst: *addr, imm: vaddr });
                self.asm.i(Instr::Load { dst: *tmp, base: *addr, offset: 0 });
                self.bracket_down(locals);
                self.asm.i(Instr::CallR { target: *tmp });
                self.bracket_up(locals);
            }
            Shape::CallMovi { callee, tmp } => {
                self.asm.movi_label(*tmp, &format!("f{callee}"));
                self.bracket_down(locals);
                self.asm.i(Instr::CallR { target: *tmp });
                self.bracket_up(locals);
            }
        }
    }

    /// Steps sp below this function's locals (plus one slack word) so the
    /// callee's pushed return address cannot clobber them.
    fn bracket_down(&mut self, locals: u8) {
        let bytes = 4 * (locals as u32 + 1);
        self.asm.i(Instr::AluImm { op: AluImmOp::Addi, dst: Reg::SP, imm: bytes.wrapping_neg() });
    }

    fn bracket_up(&mut self, locals: u8) {
        let bytes = 4 * (locals as u32 + 1);
        self.asm.i(Instr::AluImm { op: AluImmOp::Addi, dst: Reg::SP, imm: bytes });
    }
}

fn emit_plan(plan: &Plan) -> Executable {
    // Tables sit directly after the constant words in one data section.
    let mut table_vaddrs = Vec::new();
    let mut off = plan.consts.len() as u32;
    for t in &plan.tables {
        table_vaddrs.push(CONST_BASE + 4 * off);
        off += t.len() as u32;
    }

    let mut e = Emitter { asm: Asm::new(TEXT_BASE), next_label: 0 };
    for (i, f) in plan.funcs.iter().enumerate() {
        e.asm.label(&format!("f{i}"));
        match f.kind {
            Kind::Dispatcher { table } => {
                let mask = (plan.tables[table].len() - 1) as u32;
                e.asm.i(Instr::Movi { dst: Reg::R2, imm: mask });
                e.asm.i(Instr::Alu { op: AluOp::And, dst: Reg::R1, src: Reg::R2 });
                e.asm.i(Instr::ShiftImm { op: ShiftOp::Shl, dst: Reg::R1, amount: 2 });
                e.asm.i(Instr::Movi { dst: Reg::R3, imm: table_vaddrs[table] });
                e.asm.i(Instr::Alu { op: AluOp::Add, dst: Reg::R3, src: Reg::R1 });
                e.asm.i(Instr::Load { dst: Reg::R4, base: Reg::R3, offset: 0 });
                e.asm.i(Instr::JmpR { target: Reg::R4 });
            }
            kind => {
                // Warmup keeps the head out of every internal label, and the
                // local inits establish write-before-read for the frame.
                e.asm.i(Instr::Movi { dst: Reg::R1, imm: 0x11 * (i as u32 + 1) });
                for k in 1..=f.locals {
                    e.asm.i(Instr::Movi { dst: Reg::R2, imm: 0x101 * k as u32 });
                    e.asm.i(Instr::Store { base: Reg::SP, offset: -4 * k as i16, src: Reg::R2 });
                }
                for s in &f.body {
                    e.shape(s, f.locals, &table_vaddrs);
                }
                if kind == Kind::Entry {
                    e.asm.i(Instr::Mov { dst: Reg::R0, src: Reg::R3 });
                    e.asm.i(Instr::Sys { code: 3 });
                    e.asm.i(Instr::Mov { dst: Reg::R0, src: Reg::R2 });
                    e.asm.i(Instr::Halt);
                } else {
                    e.asm.i(Instr::Ret);
                }
            }
        }
    }

    let out = e.asm.finish().expect("generated program assembles");
    let mut data: Vec<u8> = plan.consts.iter().flat_map(|w| w.to_le_bytes()).collect();
    for t in &plan.tables {
        for &j in t {
            data.extend(out.addr(&format!("f{j}")).to_le_bytes());
        }
    }
    let sections = if data.is_empty() { vec![] } else { vec![Section::data(CONST_BASE, data)] };
    out.into_exe("f0", sections).expect("generated program packs")
}

fn build_program(seed: u64, class: SizeClass) -> (Executable, Vec<u8>) {
    let plan = build_plan(seed, class);
    (emit_plan(&plan), plan.input)
}

// ---------------------------------------------------------------------------
// Conformance checking

/// Statically verifies the conventions generated programs promise:
///
/// 1. stack access is strictly below the stack pointer (negative offsets);
/// 2. every call is bracketed by matching sp-step instructions, so pushed
///    return addresses land below the caller's locals;
/// 3. every conditional branch directly follows its compare — flags never
///    travel across calls or indirect transfers;
/// 4. jumps and branches stay inside their function and never target its
///    head;
/// 5. large immediates never collide with code addresses unless they are
///    genuine code pointers (some decoded instruction start);
/// 6. every local slot is written before it is read on all paths.
///
/// Returns human-readable violations; an empty list means conforming.
pub fn check_abi(exe: &Executable) -> Vec<String> {
    let ir = match crate::frontend::lift(exe, "abi-check") {
        Ok(ir) => ir,
        Err(e) => return vec![format!("does not lift: {e}")],
    };
    let mut bad = Vec::new();

    let starts: std::collections::BTreeSet<u32> =
        ir.records.values().filter_map(|r| r.original_address).collect();
    let heads: std::collections::BTreeSet<_> = ir.functions.values().map(|f| f.head).collect();
    let mut pred_by_ft: std::collections::BTreeMap<_, Vec<_>> = Default::default();
    for (&id, r) in &ir.records {
        if let Some(ft) = r.fallthrough {
            pred_by_ft.entry(ft).or_default().push(id);
        }
    }

    for (&id, r) in &ir.records {
        let at = |msg: String| format!("{:#x}: {msg}", r.original_address.unwrap_or(0));
        match r.instr {
            Instr::Load { base: Reg::SP, offset, .. } | Instr::Store { base: Reg::SP, offset, .. }
                if offset >= 0 =>
            {
                bad.push(at(format!("stack access at non-negative offset {offset}")));
            }
            Instr::Call { .. } | Instr::CallR { .. } => {
                let down = pred_by_ft.get(&id).and_then(|p| match p.as_slice() {
                    [one] => Some(ir.record(*one).instr),
                    _ => None,
                });
                let up = r.fallthrough.map(|ft| ir.record(ft).instr);
                match (down, up) {
                    (
                        Some(Instr::AluImm { op: AluImmOp::Addi, dst: Reg::SP, imm: d }),
                        Some(Instr::AluImm { op: AluImmOp::Addi, dst: Reg::SP, imm: u }),
                    ) if d == u.wrapping_neg() && u >= 4 && u % 4 == 0 => {}
                    _ => bad.push(at("call without a matching sp bracket".into())),
                }
            }
            Instr::Br { .. } => {
                let prev = pred_by_ft.get(&id).and_then(|p| match p.as_slice() {
                    [one] => Some(ir.record(*one).instr),
                    _ => None,
                });
                if !matches!(prev, Some(Instr::Cmp { .. } | Instr::Cmpi { .. })) {
                    bad.push(at("branch not directly after its compare".into()));
                }
            }
            Instr::Movi { imm, .. }
            | Instr::AluImm { imm, .. }
            | Instr::Cmpi { imm, .. }
                if (TEXT_BASE..CONST_BASE).contains(&imm) && !starts.contains(&imm) =>
            {
                bad.push(at(format!("immediate {imm:#x} aliases the code region")));
            }
            _ => {}
        }
        if matches!(r.instr, Instr::Jmp { .. } | Instr::Br { .. }) {
            if let Some(t) = r.target {
                if heads.contains(&t) {
                    bad.push(at("jump targets a function head".into()));
                }
                // Never-called code is not owned by any function; only owned
                // jumps must stay inside their owner.
                let owner = ir.functions.values().find(|f| f.members.contains(&id));
                if owner.is_some_and(|f| !f.members.contains(&t)) {
                    bad.push(at("jump leaves its function".into()));
                }
            }
        }
    }

    // Write-before-read over each function's control-flow graph.
    for (&fid, _) in &ir.functions {
        let cfg = crate::analyses::build_cfg(&ir, fid);
        let n = cfg.blocks.len();
        let mut input: Vec<Option<u32>> = vec![None; n]; // None = unreached
        input[cfg.entry.0] = Some(0);
        let mut changed = true;
        while changed {
            changed = false;
            for b in 0..n {
                let Some(mut state) = input[b] else { continue };
                for &rec in &cfg.blocks[b].records {
                    if let Instr::Store { base: Reg::SP, offset, .. } = ir.record(rec).instr {
                        if offset < 0 {
                            state |= 1 << (-offset / 4);
                        }
                    }
                }
                for &(succ, _) in &cfg.blocks[b].succs {
                    let meet = match input[succ.0] {
                        None => state,
                        Some(prev) => prev & state,
                    };
                    if input[succ.0] != Some(meet) {
                        input[succ.0] = Some(meet);
                        changed = true;
                    }
                }
            }
        }
        // Diagnostics pass over the stable fixpoint.
        for b in 0..n {
            let Some(mut state) = input[b] else { continue };
            for &rec in &cfg.blocks[b].records {
                match ir.record(rec).instr {
                    Instr::Store { base: Reg::SP, offset, .. } if offset < 0 => {
                        state |= 1 << (-offset / 4);
                    }
                    Instr::Load { base: Reg::SP, offset, .. } if offset < 0 => {
                        if state & (1 << (-offset / 4)) == 0 {
                            bad.push(format!(
                                "{:#x}: local [sp{offset}] read before written",
                                ir.record(rec).original_address.unwrap_or(0)
                            ));
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    bad.sort();
    bad.dedup();
    bad
}
