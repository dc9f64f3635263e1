//! The reference emulator: a deterministic interpreter for ZXE images used as
//! the behavioral oracle for everything the rewriter produces.
//!
//! Semantics in brief: nine 32-bit registers with `sp` starting at
//! [`STACK_INIT`]; a sparse byte-addressed memory that reads as zero until
//! written; Z/N flags set only by `CMP`/`CMPI`; byte input and output streams
//! reached through `SYS`. The text section is write-protected and is the only
//! region `pc` may point into. Stack underflow is not detected: `sp`
//! arithmetic simply wraps.

use std::collections::HashMap;

use crate::isa::{AluImmOp, AluOp, Cond, Instr, Reg, ShiftOp, NUM_REGS};
use crate::zxe::Executable;

/// Initial stack pointer. The stack grows downward from here.
pub const STACK_INIT: u32 = 0x4000_0000;

/// Default cap on executed instructions before giving up.
pub const DEFAULT_STEP_LIMIT: u64 = 10_000_000;

/// Value loaded into `r0` by `SYS 2` at end of input.
pub const EOF_SENTINEL: u32 = 0xffff_ffff;

/// Why execution stopped abnormally.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Trap {
    /// `pc` pointed at bytes that do not decode (unknown opcode, bad register
    /// field, or an instruction running off the end of text).
    UnknownOpcode { pc: u32 },
    /// A store targeted the write-protected text section.
    TextWrite { pc: u32, addr: u32 },
    /// `pc` left the text section.
    PcOutsideText { pc: u32 },
    /// A `SYS` code outside the defined set `0..=3`.
    UnknownSys { pc: u32, code: u8 },
}

impl std::fmt::Display for Trap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Trap::UnknownOpcode { pc } => write!(f, "undecodable instruction at pc={pc:#010x}"),
            Trap::TextWrite { pc, addr } => {
                write!(f, "write to text address {addr:#010x} at pc={pc:#010x}")
            }
            Trap::PcOutsideText { pc } => write!(f, "pc left text: {pc:#010x}"),
            Trap::UnknownSys { pc, code } => write!(f, "unknown sys code {code} at pc={pc:#010x}"),
        }
    }
}

/// How a run ended.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Outcome {
    /// `HALT` or `SYS 0`; carries the full 32-bit exit code from `r0`.
    Exit(u32),
    Trap(Trap),
    /// The step limit was reached before the program stopped.
    StepLimit,
}

/// Result of running a program to completion.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ExecutionResult {
    pub outcome: Outcome,
    pub output: Vec<u8>,
    /// Number of instructions executed.
    pub steps: u64,
}

/// One step of execution: either keep going or stop with an outcome.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Step {
    Continue,
    Done(Outcome),
}

const PAGE_BITS: u32 = 12;
const PAGE_SIZE: usize = 1 << PAGE_BITS;

/// Sparse memory: absent pages read as zero.
#[derive(Default)]
struct Memory {
    pages: HashMap<u32, Box<[u8; PAGE_SIZE]>>,
}

impl Memory {
    fn read_u8(&self, addr: u32) -> u8 {
        match self.pages.get(&(addr >> PAGE_BITS)) {
            Some(p) => p[(addr as usize) & (PAGE_SIZE - 1)],
            None => 0,
        }
    }

    fn write_u8(&mut self, addr: u32, value: u8) {
        let page = self.pages.entry(addr >> PAGE_BITS).or_insert_with(|| Box::new([0; PAGE_SIZE]));
        page[(addr as usize) & (PAGE_SIZE - 1)] = value;
    }

    fn read_u32(&self, addr: u32) -> u32 {
        let off = (addr as usize) & (PAGE_SIZE - 1);
        if off <= PAGE_SIZE - 4 {
            match self.pages.get(&(addr >> PAGE_BITS)) {
                Some(p) => u32::from_le_bytes([p[off], p[off + 1], p[off + 2], p[off + 3]]),
                None => 0,
            }
        } else {
            let mut b = [0u8; 4];
            for (i, slot) in b.iter_mut().enumerate() {
                *slot = self.read_u8(addr.wrapping_add(i as u32));
            }
            u32::from_le_bytes(b)
        }
    }

    fn write_u32(&mut self, addr: u32, value: u32) {
        let off = (addr as usize) & (PAGE_SIZE - 1);
        let bytes = value.to_le_bytes();
        if off <= PAGE_SIZE - 4 {
            let page =
                self.pages.entry(addr >> PAGE_BITS).or_insert_with(|| Box::new([0; PAGE_SIZE]));
            page[off..off + 4].copy_from_slice(&bytes);
        } else {
            for (i, b) in bytes.into_iter().enumerate() {
                self.write_u8(addr.wrapping_add(i as u32), b);
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Decoded {
    NotYet,
    Ok(Instr, u8),
    Bad,
}

/// A running machine. Build one with [`MachineState::new`], then drive it with
/// [`step`](MachineState::step) or use the [`run`] convenience wrapper.
pub struct MachineState {
    pub regs: [u32; NUM_REGS],
    pub pc: u32,
    pub zf: bool,
    pub nf: bool,
    pub steps: u64,
    pub output: Vec<u8>,
    mem: Memory,
    text_base: u32,
    text: Vec<u8>,
    decode_cache: Vec<Decoded>,
    input: Vec<u8>,
    input_pos: usize,
    /// When set, targets of `CALLR`/`JMPR`/`RET` transfers are appended here.
    pub indirect_log: Option<Vec<u32>>,
}

impl MachineState {
    /// Loads every section into memory and points `pc` at the entry.
    pub fn new(exe: &Executable, input: &[u8]) -> MachineState {
        let mut mem = Memory::default();
        for s in &exe.sections {
            for (i, b) in s.bytes.iter().enumerate() {
                mem.write_u8(s.vaddr + i as u32, *b);
            }
        }
        let text = exe.text();
        let mut regs = [0u32; NUM_REGS];
        regs[Reg::SP.index() as usize] = STACK_INIT;
        MachineState {
            regs,
            pc: exe.entry,
            zf: false,
            nf: false,
            steps: 0,
            output: Vec::new(),
            mem,
            text_base: text.vaddr,
            decode_cache: vec![Decoded::NotYet; text.bytes.len()],
            text: text.bytes.clone(),
            input: input.to_vec(),
            input_pos: 0,
        indirect_log: None,
        }
    }

    /// Reads a register.
    pub fn reg(&self, r: Reg) -> u32 {
        self.regs[r.index() as usize]
    }

    /// Writes a register.
    pub fn set_reg(&mut self, r: Reg, value: u32) {
        self.regs[r.index() as usize] = value;
    }

    /// Inspects memory without side effects (zero for untouched bytes).
    pub fn read_u32(&self, addr: u32) -> u32 {
        self.mem.read_u32(addr)
    }

    /// Test hook: writes memory without the text-protection check.
    pub fn poke_u32(&mut self, addr: u32, value: u32) {
        self.mem.write_u32(addr, value);
    }

    fn in_text(&self, pc: u32) -> bool {
        pc >= self.text_base && (pc - self.text_base) < self.text.len() as u32
    }

    fn fetch(&mut self, pc: u32) -> Option<(Instr, u8)> {
        let off = (pc - self.text_base) as usize;
        match self.decode_cache[off] {
            Decoded::Ok(i, l) => Some((i, l)),
            Decoded::Bad => None,
            Decoded::NotYet => match Instr::decode(&self.text, off) {
                Ok((i, l)) => {
                    self.decode_cache[off] = Decoded::Ok(i, l as u8);
                    Some((i, l as u8))
                }
                Err(_) => {
                    self.decode_cache[off] = Decoded::Bad;
                    None
                }
            },
        }
    }

    /// Checked 32-bit store: text is write-protected.
    fn store(&mut self, pc: u32, addr: u32, value: u32) -> Result<(), Trap> {
        let (t0, t1) = (self.text_base, self.text_base + self.text.len() as u32);
        // Any byte of the 4-byte store landing in text is a violation.
        let end = addr.wrapping_add(4);
        let hits_text = if addr <= end { addr < t1 && end > t0 } else { addr < t1 || end > t0 };
        if hits_text {
            return Err(Trap::TextWrite { pc, addr });
        }
        self.mem.write_u32(addr, value);
        Ok(())
    }

    fn push(&mut self, pc: u32, value: u32) -> Result<(), Trap> {
        let sp = self.reg(Reg::SP).wrapping_sub(4);
        self.set_reg(Reg::SP, sp);
        self.store(pc, sp, value)
    }

    fn pop(&mut self) -> u32 {
        let sp = self.reg(Reg::SP);
        let v = self.mem.read_u32(sp);
        self.set_reg(Reg::SP, sp.wrapping_add(4));
        v
    }

    fn log_indirect(&mut self, target: u32) {
        if let Some(log) = &mut self.indirect_log {
            log.push(target);
        }
    }

    /// Executes one instruction.
    pub fn step(&mut self) -> Step {
        let pc = self.pc;
        if !self.in_text(pc) {
            return Step::Done(Outcome::Trap(Trap::PcOutsideText { pc }));
        }
        let (instr, len) = match self.fetch(pc) {
            Some(d) => d,
            None => return Step::Done(Outcome::Trap(Trap::UnknownOpcode { pc })),
        };
        let next = pc.wrapping_add(len as u32);
        self.steps += 1;
        self.pc = next;
        match instr {
            Instr::Halt => return Step::Done(Outcome::Exit(self.reg(Reg::R0))),
            Instr::Nop => {}
            Instr::Mov { dst, src } => self.set_reg(dst, self.reg(src)),
            Instr::Movi { dst, imm } => self.set_reg(dst, imm),
            Instr::Alu { op, dst, src } => {
                let a = self.reg(dst);
                let b = self.reg(src);
                let v = match op {
                    AluOp::Add => a.wrapping_add(b),
                    AluOp::Sub => a.wrapping_sub(b),
                    AluOp::Xor => a ^ b,
                    AluOp::And => a & b,
                    AluOp::Or => a | b,
                };
                self.set_reg(dst, v);
            }
            Instr::ShiftImm { op, dst, amount } => {
                let a = self.reg(dst);
                let sh = (amount as u32) & 31;
                let v = match op {
                    ShiftOp::Shl => a << sh,
                    ShiftOp::Shr => a >> sh,
                };
                self.set_reg(dst, v);
            }
            Instr::AluImm { op, dst, imm } => {
                let a = self.reg(dst);
                let v = match op {
                    AluImmOp::Addi => a.wrapping_add(imm),
                    AluImmOp::Xori => a ^ imm,
                };
                self.set_reg(dst, v);
            }
            Instr::Load { dst, base, offset } => {
                let addr = self.reg(base).wrapping_add(offset as i32 as u32);
                let v = self.mem.read_u32(addr);
                self.set_reg(dst, v);
            }
            Instr::Store { base, offset, src } => {
                let addr = self.reg(base).wrapping_add(offset as i32 as u32);
                let v = self.reg(src);
                if let Err(t) = self.store(pc, addr, v) {
                    return Step::Done(Outcome::Trap(t));
                }
            }
            Instr::Push { src } => {
                let v = self.reg(src);
                if let Err(t) = self.push(pc, v) {
                    return Step::Done(Outcome::Trap(t));
                }
            }
            Instr::Pop { dst } => {
                let v = self.pop();
                self.set_reg(dst, v);
            }
            Instr::Cmp { a, b } => {
                let (x, y) = (self.reg(a), self.reg(b));
                self.zf = x == y;
                self.nf = (x as i32) < (y as i32);
            }
            Instr::Cmpi { a, imm } => {
                let x = self.reg(a);
                self.zf = x == imm;
                self.nf = (x as i32) < (imm as i32);
            }
            Instr::Jmp { off } => self.pc = next.wrapping_add(off.value() as u32),
            Instr::Br { cond, off } => {
                let taken = match cond {
                    Cond::Z => self.zf,
                    Cond::Nz => !self.zf,
                    Cond::Lt => self.nf,
                    Cond::Ge => !self.nf,
                };
                if taken {
                    self.pc = next.wrapping_add(off.value() as u32);
                }
            }
            Instr::Call { off } => {
                if let Err(t) = self.push(pc, next) {
                    return Step::Done(Outcome::Trap(t));
                }
                self.pc = next.wrapping_add(off as u32);
            }
            Instr::CallR { target } => {
                let dest = self.reg(target);
                if let Err(t) = self.push(pc, next) {
                    return Step::Done(Outcome::Trap(t));
                }
                self.log_indirect(dest);
                self.pc = dest;
            }
            Instr::JmpR { target } => {
                let dest = self.reg(target);
                self.log_indirect(dest);
                self.pc = dest;
            }
            Instr::Ret => {
                let dest = self.pop();
                self.log_indirect(dest);
                self.pc = dest;
            }
            Instr::Sys { code } => match code {
                0 => return Step::Done(Outcome::Exit(self.reg(Reg::R0))),
                1 => self.output.push(self.reg(Reg::R0) as u8),
                2 => {
                    let v = match self.input.get(self.input_pos) {
                        Some(b) => {
                            self.input_pos += 1;
                            *b as u32
                        }
                        None => EOF_SENTINEL,
                    };
                    self.set_reg(Reg::R0, v);
                }
                3 => {
                    let text = self.reg(Reg::R0).to_string();
                    self.output.extend(text.bytes());
                }
                _ => return Step::Done(Outcome::Trap(Trap::UnknownSys { pc, code })),
            },
        }
        Step::Continue
    }

    /// Runs until the program stops or `step_limit` instructions have
    /// executed, consuming the machine.
    pub fn run_to_end(mut self, step_limit: u64) -> ExecutionResult {
        loop {
            if self.steps >= step_limit {
                return ExecutionResult {
                    outcome: Outcome::StepLimit,
                    output: self.output,
                    steps: self.steps,
                };
            }
            if let Step::Done(outcome) = self.step() {
                return ExecutionResult { outcome, output: self.output, steps: self.steps };
            }
        }
    }
}

/// Runs `exe` on `input` with an explicit step limit.
pub fn run_with_limit(exe: &Executable, input: &[u8], step_limit: u64) -> ExecutionResult {
    MachineState::new(exe, input).run_to_end(step_limit)
}

/// Runs `exe` on `input` with [`DEFAULT_STEP_LIMIT`].
pub fn run(exe: &Executable, input: &[u8]) -> ExecutionResult {
    run_with_limit(exe, input, DEFAULT_STEP_LIMIT)
}
