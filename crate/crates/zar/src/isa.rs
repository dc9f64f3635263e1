//! The ZAR-32 instruction set: a little-endian, variable-length (1..=6 byte)
//! register machine with eight general registers plus a stack pointer.
//!
//! Everything downstream leans on two properties of the encoding that are
//! checked by the tests here: decoding is a pure function of `(bytes, offset)`
//! with no mode state, and `decode(encode(i)) == i` for every well-formed
//! instruction.

use std::fmt;

/// Number of addressable registers: `r0..r7` plus `sp`.
pub const NUM_REGS: usize = 9;

/// A register index. `0..=7` are the general registers, `8` is `sp`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(u8);

impl Reg {
    pub const R0: Reg = Reg(0);
    pub const R1: Reg = Reg(1);
    pub const R2: Reg = Reg(2);
    pub const R3: Reg = Reg(3);
    pub const R4: Reg = Reg(4);
    pub const R5: Reg = Reg(5);
    pub const R6: Reg = Reg(6);
    pub const R7: Reg = Reg(7);
    /// The stack pointer.
    pub const SP: Reg = Reg(8);

    /// Wraps an index, panicking on values the encoding cannot express.
    pub fn new(index: u8) -> Reg {
        assert!(index < NUM_REGS as u8, "register index {index} out of range");
        Reg(index)
    }

    /// The raw index, `0..=8`.
    pub fn index(self) -> u8 {
        self.0
    }

    /// Iterates `r0, r1, .., r7, sp`.
    pub fn all() -> impl Iterator<Item = Reg> {
        (0..NUM_REGS as u8).map(Reg)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Reg::SP {
            write!(f, "sp")
        } else {
            write!(f, "r{}", self.0)
        }
    }
}

impl fmt::Debug for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// A set of registers, stored as a bitmask over the nine register indices.
#[derive(Clone, Copy, PartialEq, Eq, Default)]
pub struct RegSet(u16);

impl RegSet {
    /// The empty set.
    pub const EMPTY: RegSet = RegSet(0);
    /// Every register, including `sp`.
    pub const ALL: RegSet = RegSet((1 << NUM_REGS) - 1);

    /// Builds a set from a slice of registers.
    pub fn of(regs: &[Reg]) -> RegSet {
        let mut s = RegSet::EMPTY;
        for &r in regs {
            s.insert(r);
        }
        s
    }

    pub fn insert(&mut self, r: Reg) {
        self.0 |= 1 << r.0;
    }

    pub fn remove(&mut self, r: Reg) {
        self.0 &= !(1 << r.0);
    }

    pub fn contains(self, r: Reg) -> bool {
        self.0 & (1 << r.0) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn union(self, other: RegSet) -> RegSet {
        RegSet(self.0 | other.0)
    }

    pub fn minus(self, other: RegSet) -> RegSet {
        RegSet(self.0 & !other.0)
    }

    /// Iterates members in ascending register order.
    pub fn iter(self) -> impl Iterator<Item = Reg> {
        Reg::all().filter(move |r| self.contains(*r))
    }
}

impl fmt::Debug for RegSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// Two-operand ALU operations (`dst = dst op src`).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum AluOp {
    Add,
    Sub,
    Xor,
    And,
    Or,
}

/// Immediate-shift operations (`dst = dst shift amount`).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum ShiftOp {
    Shl,
    Shr,
}

/// Immediate ALU operations (`dst = dst op imm32`).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum AluImmOp {
    Addi,
    Xori,
}

/// Branch conditions, testing the flags set by `CMP`/`CMPI`.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Cond {
    /// Taken when Z is set.
    Z,
    /// Taken when Z is clear.
    Nz,
    /// Taken when N is set (signed less-than).
    Lt,
    /// Taken when N is clear.
    Ge,
}

/// A relative branch displacement in one of the two encodable widths.
///
/// Displacements are measured from the address immediately after the
/// instruction. The width is part of the instruction identity: it selects the
/// opcode and the total length.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum BranchOff {
    Rel8(i8),
    Rel32(i32),
}

impl BranchOff {
    /// The displacement value, sign-extended.
    pub fn value(self) -> i32 {
        match self {
            BranchOff::Rel8(d) => d as i32,
            BranchOff::Rel32(d) => d,
        }
    }
}

/// One decoded ZAR-32 instruction.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Instr {
    /// Stop execution; the exit code is `r0`.
    Halt,
    Nop,
    /// `dst = src`.
    Mov { dst: Reg, src: Reg },
    /// `dst = imm`.
    Movi { dst: Reg, imm: u32 },
    /// `dst = dst op src` (wrapping).
    Alu { op: AluOp, dst: Reg, src: Reg },
    /// `dst = dst shift amount` (amount taken mod 32).
    ShiftImm { op: ShiftOp, dst: Reg, amount: u8 },
    /// `dst = dst op imm` (wrapping).
    AluImm { op: AluImmOp, dst: Reg, imm: u32 },
    /// `dst = mem32[base + offset]`.
    Load { dst: Reg, base: Reg, offset: i16 },
    /// `mem32[base + offset] = src`.
    Store { base: Reg, offset: i16, src: Reg },
    /// `sp -= 4; mem32[sp] = src`.
    Push { src: Reg },
    /// `dst = mem32[sp]; sp += 4`.
    Pop { dst: Reg },
    /// Sets Z = (a == b), N = (a < b, signed).
    Cmp { a: Reg, b: Reg },
    /// Sets Z = (a == imm), N = (a < imm, signed).
    Cmpi { a: Reg, imm: u32 },
    /// Unconditional relative jump.
    Jmp { off: BranchOff },
    /// Conditional relative jump.
    Br { cond: Cond, off: BranchOff },
    /// Push the next-instruction address, then jump relative.
    Call { off: i32 },
    /// Push the next-instruction address, then jump to `target`'s value.
    CallR { target: Reg },
    /// Jump to `target`'s value.
    JmpR { target: Reg },
    /// Pop the return address into `pc`.
    Ret,
    /// System call selected by `code`: 0 exit, 1 putc, 2 getc, 3 put-decimal.
    Sys { code: u8 },
}

// Opcode bytes. Branches come in rel8 and rel32 rows; the condition opcodes
// are contiguous so the rel8 and rel32 forms share an offset.
const OP_HALT: u8 = 0x00;
const OP_NOP: u8 = 0x01;
const OP_MOV: u8 = 0x10;
const OP_MOVI: u8 = 0x11;
const OP_ADD: u8 = 0x12;
const OP_SUB: u8 = 0x13;
const OP_XOR: u8 = 0x14;
const OP_AND: u8 = 0x15;
const OP_OR: u8 = 0x16;
const OP_SHL: u8 = 0x17;
const OP_SHR: u8 = 0x18;
const OP_ADDI: u8 = 0x19;
const OP_XORI: u8 = 0x1a;
const OP_LOAD: u8 = 0x20;
const OP_STORE: u8 = 0x21;
const OP_PUSH: u8 = 0x28;
const OP_POP: u8 = 0x29;
const OP_CMP: u8 = 0x30;
const OP_CMPI: u8 = 0x31;
const OP_JMP8: u8 = 0x40;
const OP_JMP32: u8 = 0x41;
const OP_JZ8: u8 = 0x42;
const OP_JNZ8: u8 = 0x43;
const OP_JLT8: u8 = 0x44;
const OP_JGE8: u8 = 0x45;
const OP_JZ32: u8 = 0x46;
const OP_JNZ32: u8 = 0x47;
const OP_JLT32: u8 = 0x48;
const OP_JGE32: u8 = 0x49;
const OP_CALL: u8 = 0x50;
const OP_CALLR: u8 = 0x51;
const OP_JMPR: u8 = 0x52;
const OP_RET: u8 = 0x53;
const OP_SYS: u8 = 0x60;

/// Why a byte sequence failed to decode.
#[derive(Clone, Copy, PartialEq, Eq, Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("unknown opcode {opcode:#04x} at offset {offset}")]
    UnknownOpcode { opcode: u8, offset: usize },
    #[error("truncated instruction at offset {offset}: need {need} bytes, have {have}")]
    Truncated { offset: usize, need: usize, have: usize },
    #[error("register field {value:#04x} out of range at offset {offset}")]
    BadRegister { value: u8, offset: usize },
}

fn split_regs(byte: u8, offset: usize) -> Result<(Reg, Reg), DecodeError> {
    let hi = byte >> 4;
    let lo = byte & 0x0f;
    if hi >= NUM_REGS as u8 || lo >= NUM_REGS as u8 {
        return Err(DecodeError::BadRegister { value: byte, offset });
    }
    Ok((Reg(hi), Reg(lo)))
}

fn single_reg(byte: u8, offset: usize) -> Result<Reg, DecodeError> {
    if byte >= NUM_REGS as u8 {
        return Err(DecodeError::BadRegister { value: byte, offset });
    }
    Ok(Reg(byte))
}

impl Instr {
    /// Decodes one instruction starting at `offset` within `bytes`.
    ///
    /// Returns the instruction and its encoded length. Fails on an unknown
    /// opcode, an out-of-range register field, or a buffer that ends inside
    /// the instruction; the error carries `offset` so callers can report it.
    pub fn decode(bytes: &[u8], offset: usize) -> Result<(Instr, usize), DecodeError> {
        let at = |i: usize| -> Result<u8, DecodeError> {
            bytes.get(offset + i).copied().ok_or(DecodeError::Truncated {
                offset,
                need: i + 1,
                have: bytes.len().saturating_sub(offset),
            })
        };
        let opcode = at(0)?;
        let len = match opcode_length(opcode) {
            Some(len) => len,
            None => return Err(DecodeError::UnknownOpcode { opcode, offset }),
        };
        if offset + len > bytes.len() {
            return Err(DecodeError::Truncated { offset, need: len, have: bytes.len() - offset });
        }
        let imm32 = || u32::from_le_bytes([bytes[offset + 2], bytes[offset + 3], bytes[offset + 4], bytes[offset + 5]]);
        let disp16 = || i16::from_le_bytes([bytes[offset + 2], bytes[offset + 3]]);
        let rel32 = || i32::from_le_bytes([bytes[offset + 1], bytes[offset + 2], bytes[offset + 3], bytes[offset + 4]]);

        let instr = match opcode {
            OP_HALT => Instr::Halt,
            OP_NOP => Instr::Nop,
            OP_MOV => {
                let (dst, src) = split_regs(at(1)?, offset)?;
                Instr::Mov { dst, src }
            }
            OP_MOVI => Instr::Movi { dst: single_reg(at(1)?, offset)?, imm: imm32() },
            OP_ADD | OP_SUB | OP_XOR | OP_AND | OP_OR => {
                let op = match opcode {
                    OP_ADD => AluOp::Add,
                    OP_SUB => AluOp::Sub,
                    OP_XOR => AluOp::Xor,
                    OP_AND => AluOp::And,
                    _ => AluOp::Or,
                };
                let (dst, src) = split_regs(at(1)?, offset)?;
                Instr::Alu { op, dst, src }
            }
            OP_SHL | OP_SHR => {
                let op = if opcode == OP_SHL { ShiftOp::Shl } else { ShiftOp::Shr };
                Instr::ShiftImm { op, dst: single_reg(at(1)?, offset)?, amount: at(2)? }
            }
            OP_ADDI | OP_XORI => {
                let op = if opcode == OP_ADDI { AluImmOp::Addi } else { AluImmOp::Xori };
                Instr::AluImm { op, dst: single_reg(at(1)?, offset)?, imm: imm32() }
            }
            OP_LOAD => {
                let (dst, base) = split_regs(at(1)?, offset)?;
                Instr::Load { dst, base, offset: disp16() }
            }
            OP_STORE => {
                let (base, src) = split_regs(at(1)?, offset)?;
                Instr::Store { base, offset: disp16(), src }
            }
            OP_PUSH => Instr::Push { src: single_reg(at(1)?, offset)? },
            OP_POP => Instr::Pop { dst: single_reg(at(1)?, offset)? },
            OP_CMP => {
                let (a, b) = split_regs(at(1)?, offset)?;
                Instr::Cmp { a, b }
            }
            OP_CMPI => Instr::Cmpi { a: single_reg(at(1)?, offset)?, imm: imm32() },
            OP_JMP8 => Instr::Jmp { off: BranchOff::Rel8(at(1)? as i8) },
            OP_JMP32 => Instr::Jmp { off: BranchOff::Rel32(rel32()) },
            OP_JZ8 | OP_JNZ8 | OP_JLT8 | OP_JGE8 => {
                let cond = cond_for(opcode - OP_JZ8);
                Instr::Br { cond, off: BranchOff::Rel8(at(1)? as i8) }
            }
            OP_JZ32 | OP_JNZ32 | OP_JLT32 | OP_JGE32 => {
                let cond = cond_for(opcode - OP_JZ32);
                Instr::Br { cond, off: BranchOff::Rel32(rel32()) }
            }
            OP_CALL => Instr::Call { off: rel32() },
            OP_CALLR => Instr::CallR { target: single_reg(at(1)?, offset)? },
            OP_JMPR => Instr::JmpR { target: single_reg(at(1)?, offset)? },
            OP_RET => Instr::Ret,
            OP_SYS => Instr::Sys { code: at(1)? },
            _ => unreachable!("opcode_length accepted {opcode:#04x}"),
        };
        Ok((instr, len))
    }

    /// Appends the encoding of `self` to `out`.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let two = |d: Reg, s: Reg| (d.0 << 4) | s.0;
        match *self {
            Instr::Halt => out.push(OP_HALT),
            Instr::Nop => out.push(OP_NOP),
            Instr::Mov { dst, src } => out.extend([OP_MOV, two(dst, src)]),
            Instr::Movi { dst, imm } => {
                out.extend([OP_MOVI, dst.0]);
                out.extend(imm.to_le_bytes());
            }
            Instr::Alu { op, dst, src } => {
                let opcode = match op {
                    AluOp::Add => OP_ADD,
                    AluOp::Sub => OP_SUB,
                    AluOp::Xor => OP_XOR,
                    AluOp::And => OP_AND,
                    AluOp::Or => OP_OR,
                };
                out.extend([opcode, two(dst, src)]);
            }
            Instr::ShiftImm { op, dst, amount } => {
                let opcode = if op == ShiftOp::Shl { OP_SHL } else { OP_SHR };
                out.extend([opcode, dst.0, amount]);
            }
            Instr::AluImm { op, dst, imm } => {
                let opcode = if op == AluImmOp::Addi { OP_ADDI } else { OP_XORI };
                out.extend([opcode, dst.0]);
                out.extend(imm.to_le_bytes());
            }
            Instr::Load { dst, base, offset } => {
                out.extend([OP_LOAD, two(dst, base)]);
                out.extend(offset.to_le_bytes());
            }
            Instr::Store { base, offset, src } => {
                out.extend([OP_STORE, two(base, src)]);
                out.extend(offset.to_le_bytes());
            }
            Instr::Push { src } => out.extend([OP_PUSH, src.0]),
            Instr::Pop { dst } => out.extend([OP_POP, dst.0]),
            Instr::Cmp { a, b } => out.extend([OP_CMP, two(a, b)]),
            Instr::Cmpi { a, imm } => {
                out.extend([OP_CMPI, a.0]);
                out.extend(imm.to_le_bytes());
            }
            Instr::Jmp { off: BranchOff::Rel8(d) } => out.extend([OP_JMP8, d as u8]),
            Instr::Jmp { off: BranchOff::Rel32(d) } => {
                out.push(OP_JMP32);
                out.extend(d.to_le_bytes());
            }
            Instr::Br { cond, off: BranchOff::Rel8(d) } => out.extend([OP_JZ8 + cond_index(cond), d as u8]),
            Instr::Br { cond, off: BranchOff::Rel32(d) } => {
                out.push(OP_JZ32 + cond_index(cond));
                out.extend(d.to_le_bytes());
            }
            Instr::Call { off } => {
                out.push(OP_CALL);
                out.extend(off.to_le_bytes());
            }
            Instr::CallR { target } => out.extend([OP_CALLR, target.0]),
            Instr::JmpR { target } => out.extend([OP_JMPR, target.0]),
            Instr::Ret => out.push(OP_RET),
            Instr::Sys { code } => out.extend([OP_SYS, code]),
        }
    }

    /// The encoding of `self` as a fresh vector.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6);
        self.encode_into(&mut out);
        out
    }

    /// Encoded length in bytes, `1..=6`.
    pub fn length(&self) -> usize {
        match self {
            Instr::Halt | Instr::Nop | Instr::Ret => 1,
            Instr::Mov { .. }
            | Instr::Alu { .. }
            | Instr::Push { .. }
            | Instr::Pop { .. }
            | Instr::Cmp { .. }
            | Instr::CallR { .. }
            | Instr::JmpR { .. }
            | Instr::Sys { .. } => 2,
            Instr::ShiftImm { .. } => 3,
            Instr::Load { .. } | Instr::Store { .. } => 4,
            Instr::Jmp { off } | Instr::Br { off, .. } => match off {
                BranchOff::Rel8(_) => 2,
                BranchOff::Rel32(_) => 5,
            },
            Instr::Call { .. } => 5,
            Instr::Movi { .. } | Instr::AluImm { .. } | Instr::Cmpi { .. } => 6,
        }
    }

    /// True for instructions that never fall through: `JMP`, `JMPR`, `RET`,
    /// `HALT`. (`CALL`/`CALLR` resume at the next instruction and conditional
    /// branches may fall through, so they are not included.)
    pub fn is_unconditional_transfer(&self) -> bool {
        matches!(self, Instr::Jmp { .. } | Instr::JmpR { .. } | Instr::Ret | Instr::Halt)
    }

    /// True for every control-transfer instruction, conditional or not.
    pub fn is_control(&self) -> bool {
        matches!(
            self,
            Instr::Jmp { .. }
                | Instr::Br { .. }
                | Instr::Call { .. }
                | Instr::CallR { .. }
                | Instr::JmpR { .. }
                | Instr::Ret
                | Instr::Halt
        )
    }

    /// True for `CALL` and `CALLR`.
    pub fn is_call(&self) -> bool {
        matches!(self, Instr::Call { .. } | Instr::CallR { .. })
    }

    /// The static branch target for pc-relative transfers located at `addr`,
    /// measured from the address immediately after the instruction.
    pub fn static_target(&self, addr: u32) -> Option<u32> {
        let next = addr.wrapping_add(self.length() as u32);
        match self {
            Instr::Jmp { off } | Instr::Br { off, .. } => Some(next.wrapping_add(off.value() as u32)),
            Instr::Call { off } => Some(next.wrapping_add(*off as u32)),
            _ => None,
        }
    }

    /// Whether execution can continue at the next sequential instruction.
    pub fn has_fallthrough(&self) -> bool {
        !self.is_unconditional_transfer()
    }

    /// Registers read when the instruction executes.
    ///
    /// The dead-register analysis builds directly on these sets, so the
    /// boundary instructions (`CALLR`, `JMPR`, `RET`, `HALT`, `SYS`) claim to
    /// read everything: past them, any register may still be observed. `CALL`
    /// reads the argument registers `r0..r3` plus `sp`.
    pub fn reads(&self) -> RegSet {
        let r = |rs: &[Reg]| RegSet::of(rs);
        match *self {
            Instr::Halt | Instr::Ret | Instr::Sys { .. } => RegSet::ALL,
            Instr::CallR { .. } | Instr::JmpR { .. } => RegSet::ALL,
            Instr::Nop | Instr::Jmp { .. } | Instr::Br { .. } => RegSet::EMPTY,
            Instr::Mov { src, .. } => r(&[src]),
            Instr::Movi { .. } => RegSet::EMPTY,
            Instr::Alu { dst, src, .. } => r(&[dst, src]),
            Instr::ShiftImm { dst, .. } | Instr::AluImm { dst, .. } => r(&[dst]),
            Instr::Load { base, .. } => r(&[base]),
            Instr::Store { base, src, .. } => r(&[base, src]),
            Instr::Push { src } => r(&[src, Reg::SP]),
            Instr::Pop { .. } => r(&[Reg::SP]),
            Instr::Cmp { a, b } => r(&[a, b]),
            Instr::Cmpi { a, .. } => r(&[a]),
            Instr::Call { .. } => {
                let mut s = RegSet::of(&[Reg(0), Reg(1), Reg(2), Reg(3)]);
                s.insert(Reg::SP);
                s
            }
        }
    }

    /// Registers whose value is (re)defined by the instruction. `CALL` kills
    /// the caller-clobbered registers `r0..r3` and adjusts `sp`.
    pub fn writes(&self) -> RegSet {
        let r = |rs: &[Reg]| RegSet::of(rs);
        match *self {
            Instr::Mov { dst, .. }
            | Instr::Movi { dst, .. }
            | Instr::Alu { dst, .. }
            | Instr::ShiftImm { dst, .. }
            | Instr::AluImm { dst, .. }
            | Instr::Load { dst, .. } => r(&[dst]),
            Instr::Push { .. } => r(&[Reg::SP]),
            Instr::Pop { dst } => r(&[dst, Reg::SP]),
            // A call's own effect is the push. What the callee clobbers is a
            // *may*-write, which must not kill liveness, so it is not listed.
            Instr::Call { .. } | Instr::CallR { .. } => r(&[Reg::SP]),
            Instr::Ret => r(&[Reg::SP]),
            _ => RegSet::EMPTY,
        }
    }

    /// The same instruction with any rel8 displacement widened to rel32.
    /// Displacement values are placeholders until patching assigns real ones,
    /// so only the form matters.
    pub fn widened(&self) -> Instr {
        match *self {
            Instr::Jmp { off: BranchOff::Rel8(d) } => Instr::Jmp { off: BranchOff::Rel32(d as i32) },
            Instr::Br { cond, off: BranchOff::Rel8(d) } => Instr::Br { cond, off: BranchOff::Rel32(d as i32) },
            other => other,
        }
    }

    /// Replaces the displacement of a pc-relative transfer.
    pub fn with_displacement(&self, disp: i32) -> Instr {
        match *self {
            Instr::Jmp { off: BranchOff::Rel8(_) } => Instr::Jmp {
                off: BranchOff::Rel8(i8::try_from(disp).expect("rel8 displacement out of range")),
            },
            Instr::Jmp { off: BranchOff::Rel32(_) } => Instr::Jmp { off: BranchOff::Rel32(disp) },
            Instr::Br { cond, off: BranchOff::Rel8(_) } => Instr::Br {
                cond,
                off: BranchOff::Rel8(i8::try_from(disp).expect("rel8 displacement out of range")),
            },
            Instr::Br { cond, off: BranchOff::Rel32(_) } => Instr::Br { cond, off: BranchOff::Rel32(disp) },
            Instr::Call { .. } => Instr::Call { off: disp },
            other => panic!("with_displacement on non-relative instruction {other}"),
        }
    }
}

fn cond_for(index: u8) -> Cond {
    match index {
        0 => Cond::Z,
        1 => Cond::Nz,
        2 => Cond::Lt,
        _ => Cond::Ge,
    }
}

fn cond_index(cond: Cond) -> u8 {
    match cond {
        Cond::Z => 0,
        Cond::Nz => 1,
        Cond::Lt => 2,
        Cond::Ge => 3,
    }
}

/// Total encoded length for an opcode byte, or `None` if unassigned.
pub fn opcode_length(opcode: u8) -> Option<usize> {
    Some(match opcode {
        OP_HALT | OP_NOP | OP_RET => 1,
        OP_MOV | OP_ADD | OP_SUB | OP_XOR | OP_AND | OP_OR => 2,
        OP_PUSH | OP_POP | OP_CMP | OP_CALLR | OP_JMPR | OP_SYS => 2,
        OP_JMP8 | OP_JZ8 | OP_JNZ8 | OP_JLT8 | OP_JGE8 => 2,
        OP_SHL | OP_SHR => 3,
        OP_LOAD | OP_STORE => 4,
        OP_JMP32 | OP_JZ32 | OP_JNZ32 | OP_JLT32 | OP_JGE32 | OP_CALL => 5,
        OP_MOVI | OP_ADDI | OP_XORI | OP_CMPI => 6,
        _ => return None,
    })
}

impl fmt::Display for Cond {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Cond::Z => "JZ",
            Cond::Nz => "JNZ",
            Cond::Lt => "JLT",
            Cond::Ge => "JGE",
        };
        f.write_str(s)
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let off = |f: &mut fmt::Formatter<'_>, o: &BranchOff| match o {
            BranchOff::Rel8(d) => write!(f, "{d:+}"),
            BranchOff::Rel32(d) => write!(f, "{d:+}!"),
        };
        match self {
            Instr::Halt => write!(f, "HALT"),
            Instr::Nop => write!(f, "NOP"),
            Instr::Mov { dst, src } => write!(f, "MOV {dst}, {src}"),
            Instr::Movi { dst, imm } => write!(f, "MOVI {dst}, {imm:#x}"),
            Instr::Alu { op, dst, src } => {
                let name = match op {
                    AluOp::Add => "ADD",
                    AluOp::Sub => "SUB",
                    AluOp::Xor => "XOR",
                    AluOp::And => "AND",
                    AluOp::Or => "OR",
                };
                write!(f, "{name} {dst}, {src}")
            }
            Instr::ShiftImm { op, dst, amount } => {
                write!(f, "{} {dst}, {amount}", if *op == ShiftOp::Shl { "SHL" } else { "SHR" })
            }
            Instr::AluImm { op, dst, imm } => {
                write!(f, "{} {dst}, {imm:#x}", if *op == AluImmOp::Addi { "ADDI" } else { "XORI" })
            }
            Instr::Load { dst, base, offset } => write!(f, "LOAD {dst}, [{base}{offset:+}]"),
            Instr::Store { base, offset, src } => write!(f, "STORE [{base}{offset:+}], {src}"),
            Instr::Push { src } => write!(f, "PUSH {src}"),
            Instr::Pop { dst } => write!(f, "POP {dst}"),
            Instr::Cmp { a, b } => write!(f, "CMP {a}, {b}"),
            Instr::Cmpi { a, imm } => write!(f, "CMPI {a}, {imm:#x}"),
            Instr::Jmp { off: o } => {
                write!(f, "JMP ")?;
                off(f, o)
            }
            Instr::Br { cond, off: o } => {
                write!(f, "{cond} ")?;
                off(f, o)
            }
            Instr::Call { off: d } => write!(f, "CALL {d:+}"),
            Instr::CallR { target } => write!(f, "CALLR {target}"),
            Instr::JmpR { target } => write!(f, "JMPR {target}"),
            Instr::Ret => write!(f, "RET"),
            Instr::Sys { code } => write!(f, "SYS {code}"),
        }
    }
}
