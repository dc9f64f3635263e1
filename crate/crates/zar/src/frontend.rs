//! Lifting a container into the IR database.
//!
//! Disassembly is the *union* of two strategies, iterated to a fixed point:
//!
//! * **Linear sweep** walks the text section from its base, decoding
//!   instruction after instruction; on an undecodable byte it resynchronizes
//!   one byte later. This finds code that is never referenced directly
//!   (e.g. functions reached only through tables).
//! * **Recursive traversal** follows the control-flow closure of the entry
//!   point and every static branch/call target, and of every address-taken
//!   location discovered below.
//!
//! Because decoding at a given address is deterministic, the union maps each
//! address to at most one instruction; two *streams* may still overlap (one
//! instruction's bytes containing another's start), and both interpretations
//! are kept — the backend gives each its own placement, so a binary that is
//! wrong about which stream is real still runs.
//!
//! **Pins** are addresses whose meaning must survive rewriting because
//! indirect control flow may land there: the entry point, every 4-byte word
//! in a data object that equals a decoded instruction start (jump/call
//! tables), every 32-bit immediate operand that equals a decoded start
//! (address materialization), and the return address after every call.
//! Address words that decode but were not otherwise found seed further
//! disassembly, which can expose further address words — hence the fixed
//! point.
//!
//! Byte runs covered by no decoded instruction become opaque blob objects at
//! their original address: they may be data read by loads, so the backend
//! keeps those bytes exactly in place.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::irdb::{InstrId, ProgramIR, RelocSite, Relocation};
use crate::isa::Instr;
use crate::zxe::Executable;

/// Errors that make a container unliftable.
#[derive(Debug, thiserror::Error)]
pub enum LiftError {
    #[error("entry point {addr:#010x} does not decode: {source}")]
    EntryUndecodable {
        addr: u32,
        #[source]
        source: crate::isa::DecodeError,
    },
    #[error(
        "the instruction stream at the entry point {addr:#010x} runs out of \
         decodable text before reaching a terminator"
    )]
    EntryStreamUnterminated { addr: u32 },
}

struct Scanner<'a> {
    text: &'a [u8],
    base: u32,
    decoded: BTreeMap<u32, Instr>,
    worklist: VecDeque<u32>,
    queued: BTreeSet<u32>,
}

impl<'a> Scanner<'a> {
    fn new(text: &'a [u8], base: u32) -> Scanner<'a> {
        Scanner {
            text,
            base,
            decoded: BTreeMap::new(),
            worklist: VecDeque::new(),
            queued: BTreeSet::new(),
        }
    }

    fn in_text(&self, addr: u32) -> bool {
        addr >= self.base && (addr - self.base) < self.text.len() as u32
    }

    fn try_decode(&self, addr: u32) -> Option<(Instr, usize)> {
        Instr::decode(self.text, (addr - self.base) as usize).ok()
    }

    fn enqueue(&mut self, addr: u32) {
        if self.in_text(addr) && !self.decoded.contains_key(&addr) && self.queued.insert(addr) {
            self.worklist.push_back(addr);
        }
    }

    /// Recursive traversal: walk each queued stream until it ends (error,
    /// unconditional transfer, or an address already walked), enqueueing
    /// static targets along the way.
    fn drain(&mut self) {
        while let Some(start) = self.worklist.pop_front() {
            let mut addr = start;
            while self.in_text(addr) && !self.decoded.contains_key(&addr) {
                let Some((instr, len)) = self.try_decode(addr) else { break };
                self.decoded.insert(addr, instr);
                if let Some(t) = instr.static_target(addr) {
                    self.enqueue(t);
                }
                if !instr.has_fallthrough() {
                    break;
                }
                addr = addr.wrapping_add(len as u32);
            }
        }
    }

    /// Linear sweep from the base, resynchronizing one byte after failures.
    /// Already-decoded instructions are stepped over, which keeps the sweep
    /// in the same stream.
    fn linear_sweep(&mut self) {
        let mut addr = self.base;
        let end = self.base + self.text.len() as u32;
        while addr < end {
            if let Some(instr) = self.decoded.get(&addr) {
                addr += instr.length() as u32;
            } else if let Some((instr, len)) = self.try_decode(addr) {
                self.decoded.insert(addr, instr);
                if let Some(t) = instr.static_target(addr) {
                    self.enqueue(t);
                }
                addr += len as u32;
            } else {
                addr += 1;
            }
        }
    }

    /// Address-taken feedback: 32-bit values found in data sections and in
    /// immediate operands that decode as instructions seed new streams.
    /// Returns whether anything new was queued.
    fn seed_address_taken(&mut self, data_words: &[u32]) -> bool {
        let mut candidates: BTreeSet<u32> = BTreeSet::new();
        for &w in data_words {
            candidates.insert(w);
        }
        for instr in self.decoded.values() {
            if let Some(imm) = imm32_of(instr) {
                candidates.insert(imm);
            }
        }
        let mut progress = false;
        for c in candidates {
            if self.in_text(c) && !self.decoded.contains_key(&c) && self.try_decode(c).is_some() {
                self.enqueue(c);
                progress = true;
            }
        }
        progress
    }
}

fn imm32_of(instr: &Instr) -> Option<u32> {
    match *instr {
        Instr::Movi { imm, .. } => Some(imm),
        Instr::AluImm { imm, .. } => Some(imm),
        Instr::Cmpi { imm, .. } => Some(imm),
        _ => None,
    }
}

/// Every aligned-or-not 4-byte little-endian window of `bytes`.
fn words_of(bytes: &[u8]) -> impl Iterator<Item = (u32, u32)> + '_ {
    bytes
        .windows(4)
        .enumerate()
        .map(|(o, w)| (o as u32, u32::from_le_bytes([w[0], w[1], w[2], w[3]])))
}

/// Lifts a validated container into a fresh database. `source` is recorded
/// as provenance metadata.
pub fn lift(exe: &Executable, source: &str) -> Result<ProgramIR, LiftError> {
    let text = exe.text();
    let base = text.vaddr;
    let mut scanner = Scanner::new(&text.bytes, base);

    if let Err(e) = Instr::decode(&text.bytes, (exe.entry - base) as usize) {
        return Err(LiftError::EntryUndecodable { addr: exe.entry, source: e });
    }

    let data_words: Vec<u32> = exe
        .data_sections()
        .flat_map(|s| words_of(&s.bytes).map(|(_, w)| w))
        .collect();

    // Disassembly fixed point: entry closure, then the sweep, then
    // address-taken feedback until nothing new decodes.
    scanner.enqueue(exe.entry);
    scanner.drain();
    scanner.linear_sweep();
    scanner.drain();
    while scanner.seed_address_taken(&data_words) {
        scanner.drain();
    }

    let mut decoded = scanner.decoded;

    // A decoded instruction is only usable as code if executing it keeps the
    // machine inside decoded code: a fall-through must land on a decoded
    // instruction and a static transfer must land on one. Speculative streams
    // (overlaps, address-taken feedback) can instead die at the text end or
    // inside a data run; peel such tails until the survivors are closed under
    // both kinds of link. The peeled bytes fall back to blob coverage below.
    loop {
        let dead: Vec<u32> = decoded
            .iter()
            .filter(|&(&addr, instr)| {
                let bad_fallthrough = instr.has_fallthrough()
                    && !decoded.contains_key(&(addr + instr.length() as u32));
                let bad_target = matches!(
                    instr,
                    Instr::Jmp { .. } | Instr::Br { .. } | Instr::Call { .. }
                ) && !decoded
                    .contains_key(&instr.static_target(addr).expect("static transfer"));
                bad_fallthrough || bad_target
            })
            .map(|(&addr, _)| addr)
            .collect();
        if dead.is_empty() {
            break;
        }
        for addr in dead {
            decoded.remove(&addr);
        }
    }
    if !decoded.contains_key(&exe.entry) {
        return Err(LiftError::EntryStreamUnterminated { addr: exe.entry });
    }

    // Uncovered byte runs become blobs, preserved in place.
    let mut covered = vec![false; text.bytes.len()];
    for (&addr, instr) in &decoded {
        let start = (addr - base) as usize;
        for c in covered.iter_mut().skip(start).take(instr.length()) {
            *c = true;
        }
    }

    let mut ir = ProgramIR::new(base, text.bytes.len() as u32, exe.entry);
    ir.metadata.source = source.to_string();

    // Records in address order, so identities ascend with addresses.
    let mut by_addr: BTreeMap<u32, InstrId> = BTreeMap::new();
    for (&addr, instr) in &decoded {
        let id = ir.alloc_record(*instr);
        ir.record_mut(id).original_address = Some(addr);
        by_addr.insert(addr, id);
    }

    // Identity links.
    for (&addr, &id) in &by_addr {
        let instr = ir.record(id).instr;
        if let Some(t) = instr.static_target(addr) {
            ir.record_mut(id).target = by_addr.get(&t).copied();
        }
        if instr.has_fallthrough() {
            let next = addr + instr.length() as u32;
            ir.record_mut(id).fallthrough = by_addr.get(&next).copied();
        }
    }
    ir.entry_record = by_addr[&exe.entry];

    // Data objects: container data sections first, then text blobs.
    let mut section_objs = Vec::new();
    for sec in exe.data_sections() {
        section_objs.push(ir.alloc_object(sec.vaddr, sec.bytes.clone()));
    }
    let mut i = 0;
    while i < covered.len() {
        if covered[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < covered.len() && !covered[i] {
            i += 1;
        }
        ir.alloc_object(base + start as u32, text.bytes[start..i].to_vec());
    }

    // Pin set: entry, address words in every data object (container data and
    // blobs alike), 32-bit immediates, and call return addresses. Each pin
    // also yields a relocation when it lives in rewritable storage, so the
    // emitted bytes track the referent's final (pinned) address.
    let mut pins: BTreeSet<u32> = BTreeSet::new();
    pins.insert(exe.entry);
    let objs: Vec<_> = ir.data_objects.keys().copied().collect();
    for obj in objs {
        let words: Vec<(u32, u32)> = words_of(&ir.data_objects[&obj].bytes).collect();
        for (offset, w) in words {
            if let Some(&referent) = by_addr.get(&w) {
                pins.insert(w);
                ir.relocations.push(Relocation {
                    site: RelocSite::Data { object: obj, offset },
                    referent,
                });
            }
        }
    }
    for (&addr, &id) in &by_addr {
        let instr = ir.record(id).instr;
        if let Some(imm) = imm32_of(&instr) {
            if let Some(&referent) = by_addr.get(&imm) {
                pins.insert(imm);
                ir.relocations.push(Relocation { site: RelocSite::InstrImm { record: id }, referent });
            }
        }
        if instr.is_call() {
            let ret = addr + instr.length() as u32;
            if by_addr.contains_key(&ret) {
                pins.insert(ret);
            }
        }
    }
    for addr in pins {
        ir.pin(by_addr[&addr], addr);
    }

    // Functions: the entry plus every static call target heads one. Members
    // are the records reachable without traversing call-target edges (call
    // fallthroughs are traversed — execution returns there). A record's
    // primary function is the first one, in head-address order, that claims
    // it; member sets of different functions may overlap.
    let mut heads: BTreeSet<u32> = BTreeSet::new();
    heads.insert(exe.entry);
    for rec in ir.records.values() {
        if rec.instr.is_call() {
            if let Some(t) = rec.target {
                if let Some(a) = ir.record(t).original_address {
                    heads.insert(a);
                }
            }
        }
    }
    for head_addr in heads {
        let head = by_addr[&head_addr];
        let name = if head_addr == exe.entry { Some("entry".to_string()) } else { None };
        let f = ir.alloc_function(head, name);
        let mut seen: BTreeSet<InstrId> = BTreeSet::new();
        let mut queue = VecDeque::from([head]);
        seen.insert(head);
        while let Some(id) = queue.pop_front() {
            let rec = ir.record(id);
            let mut next = vec![rec.fallthrough];
            if !rec.instr.is_call() {
                next.push(rec.target);
            }
            for n in next.into_iter().flatten() {
                if seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        for &m in &seen {
            if ir.record(m).function.is_none() {
                ir.record_mut(m).function = Some(f);
            }
        }
        ir.functions.get_mut(&f).unwrap().members = seen;
    }

    Ok(ir)
}
