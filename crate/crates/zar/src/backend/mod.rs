//! Reconstituting a runnable executable from the IR.
//!
//! The pipeline is: group records into dollops (placement units), route
//! every pin (coalesce, long trampoline, or short trampoline via an island),
//! best-fit the remaining dollops into free gaps or the extension, then emit
//! bytes with all pc-relative displacements and recorded address sites
//! recomputed from the assigned addresses.
//!
//! Two rules give the emitted control flow its meaning:
//!
//!  * a branch, call, or synthesized terminator whose target record is
//!    *pinned* aims at the pin address — the pin carries either the real
//!    code or a trampoline, so indirect and direct flow agree on one
//!    canonical address per pinned record;
//!  * an *unpinned* target resolves to wherever the record actually landed,
//!    including mid-dollop.
//!
//! Emission ends with structural self-checks: written ranges must be
//! disjoint, every pin must reach its code within two unconditional jumps,
//! and re-decoding the image at every assigned address must reproduce the
//! intended instruction.

mod dollop;
mod ledger;
mod place;

pub use dollop::{build_dollops, Dollop, DollopSet};
pub use ledger::{verify_best_fit_log, AllocKind, LogEntry, SpaceLedger};
pub use place::{place, Layout, PinRoute, RoutedPin};

use std::collections::BTreeMap;

use crate::irdb::{validate, InstrId, ProgramIR, RelocSite, Relocation, Violation};
use crate::isa::{BranchOff, Instr};
use crate::zxe::{ContainerError, Executable, Section};

/// Why a rewrite could not produce an executable.
#[derive(Debug, thiserror::Error)]
pub enum RewriteError {
    #[error("IR failed validation with {} issue(s); first: {}", .0.len(), .0.first().map(|v| v.message.as_str()).unwrap_or("?"))]
    InvalidIr(Vec<Violation>),
    #[error("pin {pin:#010x} cannot be laid out: {obstacle}")]
    PinConflict { pin: u32, obstacle: String },
    #[error("plugin proposed {addr:#010x}+{len}: {reason}")]
    PluginPlacement { addr: u32, len: u32, reason: String },
    #[error("container rejected the rewritten image: {0}")]
    Container(#[from] ContainerError),
    #[error("internal layout invariant broken: {0}")]
    Internal(String),
}

/// Hooks for callers that want to steer layout or post-process relocation
/// values. Both default to "no opinion".
pub trait LayoutPlugin {
    /// May claim an address for a dollop about to be placed. `gaps` is the
    /// current free list as `(start, len)` pairs; proposing bytes that are
    /// not free fails the rewrite.
    fn propose_placement(&self, _dollop: &Dollop, _gaps: &[(u32, u32)]) -> Option<u32> {
        None
    }

    /// May replace the value a relocation site is about to receive.
    fn custom_reloc(&self, _reloc: &Relocation, _resolved: u32) -> Option<u32> {
        None
    }
}

/// Where everything landed, for reports and tests.
#[derive(Debug)]
pub struct PlacementMap {
    /// Final address of every instruction record.
    pub record_addrs: BTreeMap<InstrId, u32>,
    /// Per-pin routing decisions, ascending by pin address.
    pub routes: Vec<RoutedPin>,
    /// Bytes the image grew past the original text end.
    pub extension_size: u32,
    /// Final text image length in bytes.
    pub text_len: u32,
    /// Unused byte ranges inside the original text region.
    pub free_gaps: Vec<(u32, u32)>,
    /// Every allocation, in the order the layout passes made them.
    pub log: Vec<LogEntry>,
}

impl PlacementMap {
    /// Stable text rendering of the layout (the `--dump-placement` payload).
    pub fn dump(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "text {} bytes, extension {} bytes\n",
            self.text_len, self.extension_size
        ));
        for r in &self.routes {
            let desc = match r.route {
                PinRoute::Coalesced { elided: true } => {
                    "coalesced, terminator elided".to_string()
                }
                PinRoute::Coalesced { elided: false } => "coalesced".to_string(),
                PinRoute::Long => {
                    format!("long jump to {:#010x}", self.record_addrs[&r.head])
                }
                PinRoute::Short { island_at } => format!(
                    "short jump via island {:#010x} to {:#010x}",
                    island_at, self.record_addrs[&r.head]
                ),
            };
            out.push_str(&format!("pin {:#010x} -> {desc}\n", r.pin));
        }
        for e in &self.log {
            let kind = match e.kind {
                AllocKind::Reserve => "reserve",
                AllocKind::Exact => "exact",
                AllocKind::BestFit => "best-fit",
                AllocKind::Window => "window",
            };
            out.push_str(&format!("alloc {kind} {:#010x}+{} {}\n", e.start, e.len, e.what));
        }
        for &(start, len) in &self.free_gaps {
            out.push_str(&format!("free {start:#010x}+{len}\n"));
        }
        out
    }
}

/// A rewritten program: the new container plus the layout that produced it.
#[derive(Debug)]
pub struct Rewritten {
    pub exe: Executable,
    pub placement: PlacementMap,
}

/// Rewrites a validated IR into a runnable executable.
pub fn rewrite(ir: &ProgramIR) -> Result<Rewritten, RewriteError> {
    rewrite_with_plugin(ir, None)
}

/// [`rewrite`] with layout/relocation hooks.
pub fn rewrite_with_plugin(
    ir: &ProgramIR,
    plugin: Option<&dyn LayoutPlugin>,
) -> Result<Rewritten, RewriteError> {
    let violations = validate(ir);
    if !violations.is_empty() {
        return Err(RewriteError::InvalidIr(violations));
    }
    let set = build_dollops(ir);
    let layout = place(ir, &set, plugin)?;
    emit(ir, &set, layout, plugin)
}

/// True when the object's bytes live inside the original text region (an
/// embedded data run) rather than in its own section.
fn is_embedded(ir: &ProgramIR, vaddr: u32) -> bool {
    vaddr >= ir.text_base && vaddr < ir.text_base + ir.text_size
}

/// The instruction exactly as it will appear in the output: rel8 widened,
/// displacement recomputed from assigned addresses, and any recorded
/// immediate site rewritten to its referent's final address.
fn final_instr(
    ir: &ProgramIR,
    layout: &Layout,
    plugin: Option<&dyn LayoutPlugin>,
    imm_relocs: &BTreeMap<InstrId, Relocation>,
    rid: InstrId,
    addr: u32,
) -> Result<Instr, RewriteError> {
    let rec = ir.record(rid);
    let mut instr = rec.instr.widened();
    if matches!(instr, Instr::Jmp { .. } | Instr::Br { .. } | Instr::Call { .. }) {
        let t = rec
            .target
            .ok_or_else(|| RewriteError::Internal(format!("{rid:?} lost its target")))?;
        let resolved = resolve_target(ir, layout, t);
        let next = addr.wrapping_add(instr.length() as u32);
        instr = instr.with_displacement(resolved.wrapping_sub(next) as i32);
    }
    if let Some(reloc) = imm_relocs.get(&rid) {
        let value = reloc_value(ir, layout, plugin, reloc);
        instr = match instr {
            Instr::Movi { dst, .. } => Instr::Movi { dst, imm: value },
            Instr::AluImm { op, dst, .. } => Instr::AluImm { op, dst, imm: value },
            Instr::Cmpi { a, .. } => Instr::Cmpi { a, imm: value },
            other => {
                return Err(RewriteError::Internal(format!(
                    "immediate relocation on non-immediate instruction {other}"
                )))
            }
        };
    }
    Ok(instr)
}

/// The canonical output address for a branch target: the pin if the record
/// is pinned, its assigned address otherwise.
fn resolve_target(ir: &ProgramIR, layout: &Layout, id: InstrId) -> u32 {
    ir.record(id).pinned_at.unwrap_or_else(|| layout.addr_of[&id])
}

/// The value a relocation site receives, after the optional plugin override.
fn reloc_value(
    ir: &ProgramIR,
    layout: &Layout,
    plugin: Option<&dyn LayoutPlugin>,
    reloc: &Relocation,
) -> u32 {
    let resolved = resolve_target(ir, layout, reloc.referent);
    plugin.and_then(|p| p.custom_reloc(reloc, resolved)).unwrap_or(resolved)
}

fn emit(
    ir: &ProgramIR,
    set: &DollopSet,
    layout: Layout,
    plugin: Option<&dyn LayoutPlugin>,
) -> Result<Rewritten, RewriteError> {
    let text_end = ir.text_base + ir.text_size;
    let image_end = layout.ledger.high_water().max(text_end);
    let mut image = vec![0u8; (image_end - ir.text_base) as usize];
    // (start, len, what) of every write, for the structural disjointness check.
    let mut spans: Vec<(u32, u32, String)> = Vec::new();
    fn write(
        image: &mut [u8],
        spans: &mut Vec<(u32, u32, String)>,
        text_base: u32,
        addr: u32,
        bytes: &[u8],
        what: String,
    ) {
        let off = (addr - text_base) as usize;
        image[off..off + bytes.len()].copy_from_slice(bytes);
        spans.push((addr, bytes.len() as u32, what));
    }

    let imm_relocs: BTreeMap<InstrId, Relocation> = ir
        .relocations
        .iter()
        .filter_map(|r| match r.site {
            RelocSite::InstrImm { record } => Some((record, *r)),
            _ => None,
        })
        .collect();

    // Embedded data runs keep their bytes in place.
    for obj in ir.data_objects.values() {
        if is_embedded(ir, obj.vaddr) {
            write(
                &mut image,
                &mut spans,
                ir.text_base,
                obj.vaddr,
                &obj.bytes,
                format!("data run {:?}", obj.id),
            );
        }
    }
    // Address words recorded inside them are rewritten (pinned referents
    // resolve to the pin, so untouched code keeps identical bytes).
    for reloc in &ir.relocations {
        if let RelocSite::Data { object, offset } = reloc.site {
            let obj = &ir.data_objects[&object];
            if is_embedded(ir, obj.vaddr) {
                let value = reloc_value(ir, &layout, plugin, reloc);
                let off = (obj.vaddr - ir.text_base + offset) as usize;
                image[off..off + 4].copy_from_slice(&value.to_le_bytes());
            }
        }
    }

    // Dollop bodies and synthesized terminators.
    for (di, d) in set.dollops.iter().enumerate() {
        let base = layout.dollop_base[di];
        let mut a = base;
        for &rid in &d.records {
            debug_assert_eq!(layout.addr_of[&rid], a);
            let instr = final_instr(ir, &layout, plugin, &imm_relocs, rid, a)?;
            let bytes = instr.encode();
            let off = (a - ir.text_base) as usize;
            image[off..off + bytes.len()].copy_from_slice(&bytes);
            a += bytes.len() as u32;
        }
        if let Some(t) = d.terminator {
            if !layout.elided.contains(&di) {
                let resolved = resolve_target(ir, &layout, t);
                let j = Instr::Jmp {
                    off: BranchOff::Rel32(resolved.wrapping_sub(a + 5) as i32),
                };
                let off = (a - ir.text_base) as usize;
                image[off..off + 5].copy_from_slice(&j.encode());
                a += 5;
            }
        }
        spans.push((base, a - base, format!("dollop {di}")));
    }

    // Pin trampolines. These aim at the *body* address on purpose: routing
    // through `resolve_target` would bounce a trampoline back to its own pin.
    for r in &layout.routes {
        let body = layout.addr_of[&r.head];
        match r.route {
            PinRoute::Coalesced { .. } => {}
            PinRoute::Long => {
                let j = Instr::Jmp {
                    off: BranchOff::Rel32(body.wrapping_sub(r.pin + 5) as i32),
                };
                let what = format!("pin {:#x} trampoline", r.pin);
                write(&mut image, &mut spans, ir.text_base, r.pin, &j.encode(), what);
            }
            PinRoute::Short { island_at } => {
                let d8 = i8::try_from(island_at.wrapping_sub(r.pin + 2) as i32).map_err(|_| {
                    RewriteError::Internal(format!(
                        "island {island_at:#x} is outside pin {:#x}'s rel8 range",
                        r.pin
                    ))
                })?;
                let hop = Instr::Jmp { off: BranchOff::Rel8(d8) };
                let what = format!("pin {:#x} hop", r.pin);
                write(&mut image, &mut spans, ir.text_base, r.pin, &hop.encode(), what);
                let j = Instr::Jmp {
                    off: BranchOff::Rel32(body.wrapping_sub(island_at + 5) as i32),
                };
                let what = format!("pin {:#x} island", r.pin);
                write(&mut image, &mut spans, ir.text_base, island_at, &j.encode(), what);
            }
        }
    }

    check_disjoint(&spans)?;
    check_pin_hops(ir, &layout, &image)?;
    check_decode(ir, &layout, plugin, &imm_relocs, &image)?;

    // Data objects outside the text region become sections, with their
    // recorded address words rewritten.
    let mut data_sections: Vec<(u32, Vec<u8>)> = Vec::new();
    for obj in ir.data_objects.values() {
        if !is_embedded(ir, obj.vaddr) {
            let mut bytes = obj.bytes.clone();
            for reloc in &ir.relocations {
                if let RelocSite::Data { object, offset } = reloc.site {
                    if object == obj.id {
                        let value = reloc_value(ir, &layout, plugin, reloc);
                        let off = offset as usize;
                        bytes[off..off + 4].copy_from_slice(&value.to_le_bytes());
                    }
                }
            }
            data_sections.push((obj.vaddr, bytes));
        }
    }
    data_sections.sort_by_key(|&(vaddr, _)| vaddr);

    let text_len = image.len() as u32;
    let mut sections = vec![Section::text(ir.text_base, image)];
    sections.extend(data_sections.into_iter().map(|(v, b)| Section::data(v, b)));
    let exe = Executable::new(ir.entry_addr, sections)?;

    let placement = PlacementMap {
        record_addrs: layout.addr_of,
        routes: layout.routes,
        extension_size: layout.ledger.extension_size(),
        text_len,
        free_gaps: layout.ledger.gaps_in_text(),
        log: layout.ledger.log().to_vec(),
    };
    Ok(Rewritten { exe, placement })
}

/// Written ranges must never overlap; the layout passes guarantee it, and
/// this re-checks the guarantee structurally on every emit.
fn check_disjoint(spans: &[(u32, u32, String)]) -> Result<(), RewriteError> {
    let mut sorted: Vec<_> = spans.iter().filter(|s| s.1 > 0).collect();
    sorted.sort_by_key(|s| s.0);
    for w in sorted.windows(2) {
        let (a_start, a_len, a_what) = w[0];
        let (b_start, _, b_what) = w[1];
        if a_start + a_len > *b_start {
            return Err(RewriteError::Internal(format!(
                "overlapping writes: {a_what} [{a_start:#x}+{a_len}] and {b_what} [{b_start:#x}]"
            )));
        }
    }
    Ok(())
}

/// Every pin must reach its record's code in at most two unconditional
/// jumps, verified by decoding the actual emitted bytes.
fn check_pin_hops(ir: &ProgramIR, layout: &Layout, image: &[u8]) -> Result<(), RewriteError> {
    for r in &layout.routes {
        let body = layout.addr_of[&r.head];
        let mut cur = r.pin;
        let mut hops = 0;
        while cur != body {
            if hops >= 2 {
                return Err(RewriteError::Internal(format!(
                    "pin {:#x} does not reach its code within 2 jumps",
                    r.pin
                )));
            }
            let off = (cur - ir.text_base) as usize;
            let (instr, _) = Instr::decode(image, off).map_err(|e| {
                RewriteError::Internal(format!("pin {:#x} hop decodes to garbage: {e}", r.pin))
            })?;
            if !matches!(instr, Instr::Jmp { .. }) {
                return Err(RewriteError::Internal(format!(
                    "pin {:#x} hop is not an unconditional jump",
                    r.pin
                )));
            }
            cur = instr.static_target(cur).expect("jmp has a static target");
            hops += 1;
        }
    }
    Ok(())
}

/// Re-decodes the image at every assigned address and compares against the
/// intended instruction — catches any write that silently corrupted another.
fn check_decode(
    ir: &ProgramIR,
    layout: &Layout,
    plugin: Option<&dyn LayoutPlugin>,
    imm_relocs: &BTreeMap<InstrId, Relocation>,
    image: &[u8],
) -> Result<(), RewriteError> {
    for (&rid, &addr) in &layout.addr_of {
        let expected = final_instr(ir, layout, plugin, imm_relocs, rid, addr)?;
        let off = (addr - ir.text_base) as usize;
        match Instr::decode(image, off) {
            Ok((got, _)) if got == expected => {}
            Ok((got, _)) => {
                return Err(RewriteError::Internal(format!(
                    "{rid:?} at {addr:#x} decodes to {got}, expected {expected}"
                )))
            }
            Err(e) => {
                return Err(RewriteError::Internal(format!(
                    "{rid:?} at {addr:#x} fails to decode: {e}"
                )))
            }
        }
    }
    Ok(())
}
