//! A small label-resolving assembler for building ZAR-32 text sections.
//!
//! This is plumbing for fixtures and the corpus generator, not a user-facing
//! assembler: instructions are appended as [`Instr`] values, control transfers
//! may name labels, and [`Asm::finish`] back-patches every displacement once
//! all label addresses are known.

use std::collections::BTreeMap;

use crate::isa::{BranchOff, Cond, Instr, Reg};

/// How a fix-up site stores its resolved address.
enum Fixup {
    /// rel8 displacement at `pos + 1`, relative to the end of the instruction.
    Rel8 { pos: usize, next: u32 },
    /// rel32 displacement at `pos + 1`, relative to the end of the instruction.
    Rel32 { pos: usize, next: u32 },
    /// Absolute 32-bit address as a `MOVI`-style immediate at `pos + 2`.
    Abs32 { pos: usize },
}

/// Assembly errors, reported from [`Asm::finish`].
#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum AsmError {
    #[error("label `{0}` was never defined")]
    Undefined(String),
    #[error("label `{0}` defined twice")]
    Redefined(String),
    #[error("rel8 branch to `{label}` out of range (displacement {disp})")]
    Rel8Range { label: String, disp: i64 },
}

/// An in-progress text section based at a fixed virtual address.
pub struct Asm {
    base: u32,
    bytes: Vec<u8>,
    labels: BTreeMap<String, u32>,
    fixups: Vec<(String, Fixup)>,
}

impl Asm {
    pub fn new(base: u32) -> Asm {
        Asm { base, bytes: Vec::new(), labels: BTreeMap::new(), fixups: Vec::new() }
    }

    /// The address the next emitted byte will occupy.
    pub fn here(&self) -> u32 {
        self.base + self.bytes.len() as u32
    }

    /// Defines `label` at the current address.
    pub fn label(&mut self, label: &str) -> &mut Self {
        if self.labels.insert(label.to_string(), self.here()).is_some() {
            // Surface the mistake at finish() so call sites can stay fluent.
            self.fixups.push((label.to_string(), Fixup::Abs32 { pos: usize::MAX }));
        }
        self
    }

    /// Appends one instruction verbatim.
    pub fn i(&mut self, instr: Instr) -> &mut Self {
        instr.encode_into(&mut self.bytes);
        self
    }

    /// Appends raw bytes (junk, embedded constants).
    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.bytes.extend(bytes);
        self
    }

    /// `JMP` (rel32) to a label.
    pub fn jmp(&mut self, label: &str) -> &mut Self {
        self.transfer(label, Instr::Jmp { off: BranchOff::Rel32(0) })
    }

    /// `JMP` (rel8) to a label; `finish` fails if the target is out of range.
    pub fn jmp8(&mut self, label: &str) -> &mut Self {
        self.transfer(label, Instr::Jmp { off: BranchOff::Rel8(0) })
    }

    /// Conditional branch (rel32) to a label.
    pub fn br(&mut self, cond: Cond, label: &str) -> &mut Self {
        self.transfer(label, Instr::Br { cond, off: BranchOff::Rel32(0) })
    }

    /// Conditional branch (rel8) to a label.
    pub fn br8(&mut self, cond: Cond, label: &str) -> &mut Self {
        self.transfer(label, Instr::Br { cond, off: BranchOff::Rel8(0) })
    }

    /// `CALL` to a label.
    pub fn call(&mut self, label: &str) -> &mut Self {
        self.transfer(label, Instr::Call { off: 0 })
    }

    /// `MOVI dst, <address of label>`.
    pub fn movi_label(&mut self, dst: Reg, label: &str) -> &mut Self {
        let pos = self.bytes.len();
        Instr::Movi { dst, imm: 0 }.encode_into(&mut self.bytes);
        self.fixups.push((label.to_string(), Fixup::Abs32 { pos }));
        self
    }

    fn transfer(&mut self, label: &str, instr: Instr) -> &mut Self {
        let pos = self.bytes.len();
        instr.encode_into(&mut self.bytes);
        let next = self.here();
        let fixup = match instr {
            Instr::Jmp { off: BranchOff::Rel8(_) } | Instr::Br { off: BranchOff::Rel8(_), .. } => {
                Fixup::Rel8 { pos, next }
            }
            _ => Fixup::Rel32 { pos, next },
        };
        self.fixups.push((label.to_string(), fixup));
        self
    }

    /// Resolves all fix-ups and returns the finished section image.
    pub fn finish(self) -> Result<AsmOut, AsmError> {
        let Asm { base, mut bytes, labels, fixups } = self;
        for (label, fixup) in fixups {
            if matches!(fixup, Fixup::Abs32 { pos: usize::MAX }) {
                return Err(AsmError::Redefined(label));
            }
            let target = *labels.get(&label).ok_or_else(|| AsmError::Undefined(label.clone()))?;
            match fixup {
                Fixup::Rel8 { pos, next } => {
                    let disp = target as i64 - next as i64;
                    let disp8 = i8::try_from(disp).map_err(|_| AsmError::Rel8Range { label, disp })?;
                    bytes[pos + 1] = disp8 as u8;
                }
                Fixup::Rel32 { pos, next } => {
                    let disp = target.wrapping_sub(next) as i32;
                    bytes[pos + 1..pos + 5].copy_from_slice(&disp.to_le_bytes());
                }
                Fixup::Abs32 { pos } => {
                    bytes[pos + 2..pos + 6].copy_from_slice(&target.to_le_bytes());
                }
            }
        }
        Ok(AsmOut { base, bytes, labels })
    }
}

/// A finished text image plus the resolved label table.
#[derive(Debug)]
pub struct AsmOut {
    pub base: u32,
    pub bytes: Vec<u8>,
    pub labels: BTreeMap<String, u32>,
}

impl AsmOut {
    /// Address of a label defined during assembly.
    pub fn addr(&self, label: &str) -> u32 {
        self.labels[label]
    }

    /// Wraps the image in a text [`Section`](crate::zxe::Section).
    pub fn text_section(&self) -> crate::zxe::Section {
        crate::zxe::Section {
            kind: crate::zxe::SectionKind::Text,
            vaddr: self.base,
            bytes: self.bytes.clone(),
        }
    }

    /// Builds an executable whose entry is `entry_label`, with optional data
    /// sections appended after the text section.
    pub fn into_exe(
        self,
        entry_label: &str,
        data: Vec<crate::zxe::Section>,
    ) -> Result<crate::zxe::Executable, crate::zxe::ContainerError> {
        let entry = self.addr(entry_label);
        let mut sections = vec![self.text_section()];
        sections.extend(data);
        crate::zxe::Executable::new(entry, sections)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{AluImmOp, Instr};

    #[test]
    fn forward_and_backward_labels_resolve() {
        let mut a = Asm::new(0x1000);
        a.label("top")
            .i(Instr::Nop)
            .jmp8("top") // backward: next = 0x1003, disp = -3
            .jmp("end") // forward rel32
            .label("end")
            .i(Instr::Halt);
        let out = a.finish().unwrap();
        assert_eq!(out.bytes[1], 0x40);
        assert_eq!(out.bytes[2], (-3i8) as u8);
        // Forward JMP at 0x1003, next 0x1008, target 0x1008 => disp 0.
        assert_eq!(&out.bytes[4..8], &[0, 0, 0, 0]);
        assert_eq!(out.addr("end"), 0x1008);
    }

    #[test]
    fn movi_label_stores_absolute_address() {
        let mut a = Asm::new(0x2000);
        a.movi_label(Reg::new(2), "x").label("x").i(Instr::Halt);
        let out = a.finish().unwrap();
        assert_eq!(&out.bytes[2..6], &0x2006u32.to_le_bytes());
    }

    #[test]
    fn undefined_label_is_an_error() {
        let mut a = Asm::new(0);
        a.jmp("nowhere");
        assert_eq!(a.finish().unwrap_err(), AsmError::Undefined("nowhere".into()));
    }

    #[test]
    fn rel8_out_of_range_is_an_error() {
        let mut a = Asm::new(0);
        a.jmp8("far");
        for _ in 0..50 {
            a.i(Instr::AluImm { op: AluImmOp::Addi, dst: Reg::new(0), imm: 1 });
        }
        a.label("far").i(Instr::Halt);
        assert!(matches!(a.finish().unwrap_err(), AsmError::Rel8Range { .. }));
    }
}
