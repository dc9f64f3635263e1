//! The program IR database: instructions as identity-linked records rather
//! than address-linked bytes.
//!
//! Control flow between records travels over `target`/`fallthrough` identity
//! links, so transforms can insert, replace, and reorder code without ever
//! recomputing displacements; addresses reappear only when the backend lays
//! the records back out. The original address of a lifted record is kept as
//! provenance, and a record may be *pinned* to its original address, meaning
//! the rewritten binary must preserve the meaning of that exact address
//! (indirect control flow may land there).
//!
//! [`validate`] is a first-class operation: it returns a report of structural
//! violations instead of failing fast, and the rewriting pipeline refuses to
//! emit from an IR whose report is non-empty.

pub mod store;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use crate::isa::Instr;

/// Identity of an instruction record. Dense, assigned at lift time;
/// transform-inserted records continue the sequence.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct InstrId(pub u64);

/// Identity of a function record.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct FuncId(pub u64);

/// Identity of a data object.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct ObjId(pub u64);

impl fmt::Display for InstrId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for FuncId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ObjId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One instruction in the database.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct InstructionRecord {
    pub id: InstrId,
    pub instr: Instr,
    /// Where the instruction was found at lift time; `None` for
    /// transform-inserted code. Provenance only — never used for layout.
    pub original_address: Option<u32>,
    /// Identity of the static branch/call target, when the instruction has
    /// one and it resolved to a decoded record.
    pub target: Option<InstrId>,
    /// Identity of the next sequential record, when execution can fall
    /// through.
    pub fallthrough: Option<InstrId>,
    /// Address this record is pinned to. Unique across the database.
    pub pinned_at: Option<u32>,
    /// Owning function, when the record belongs to one.
    pub function: Option<FuncId>,
}

/// A function: a head record plus the set of records reachable from it
/// without traversing call edges.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct FunctionRecord {
    pub id: FuncId,
    pub head: InstrId,
    pub members: BTreeSet<InstrId>,
    pub name: Option<String>,
}

/// A byte image mapped at a fixed address: a data section, or an undecodable
/// run inside text kept in place as an opaque blob (its `vaddr` then lies in
/// the text region and the backend reserves those bytes).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DataObject {
    pub id: ObjId,
    pub vaddr: u32,
    pub bytes: Vec<u8>,
}

/// Where a relocation writes its resolved address.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RelocSite {
    /// Four bytes at `offset` within a data object.
    Data { object: ObjId, offset: u32 },
    /// The 32-bit immediate operand of a record (`MOVI`-class).
    InstrImm { record: InstrId },
}

/// A request to rewrite a 4-byte site with the final address of `referent`.
/// Pinned referents resolve to their pin address, so a site that already
/// holds the original address of a pinned record is rewritten to the same
/// value.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Relocation {
    pub site: RelocSite,
    pub referent: InstrId,
}

/// Free-form provenance carried through save/load.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Metadata {
    pub source: String,
    pub timestamp: u64,
    pub seed: Option<u64>,
}

/// The whole lifted program.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ProgramIR {
    pub records: BTreeMap<InstrId, InstructionRecord>,
    pub functions: BTreeMap<FuncId, FunctionRecord>,
    pub data_objects: BTreeMap<ObjId, DataObject>,
    pub relocations: Vec<Relocation>,
    /// Pinned address -> record pinned there. Mirrors `pinned_at`.
    pub pins: BTreeMap<u32, InstrId>,
    pub entry_record: InstrId,
    pub entry_addr: u32,
    pub text_base: u32,
    pub text_size: u32,
    pub metadata: Metadata,
    next_instr: u64,
    next_func: u64,
    next_obj: u64,
}

impl ProgramIR {
    /// An empty database for the given text region and entry address. The
    /// entry record must be created and pinned by the caller (the lifter does
    /// this).
    pub fn new(text_base: u32, text_size: u32, entry_addr: u32) -> ProgramIR {
        ProgramIR {
            records: BTreeMap::new(),
            functions: BTreeMap::new(),
            data_objects: BTreeMap::new(),
            relocations: Vec::new(),
            pins: BTreeMap::new(),
            entry_record: InstrId(0),
            entry_addr,
            text_base,
            text_size,
            metadata: Metadata::default(),
            next_instr: 0,
            next_func: 0,
            next_obj: 0,
        }
    }

    /// Allocates a fresh unlinked record.
    pub fn alloc_record(&mut self, instr: Instr) -> InstrId {
        let id = InstrId(self.next_instr);
        self.next_instr += 1;
        self.records.insert(
            id,
            InstructionRecord {
                id,
                instr,
                original_address: None,
                target: None,
                fallthrough: None,
                pinned_at: None,
                function: None,
            },
        );
        id
    }

    /// Allocates a fresh empty function.
    pub fn alloc_function(&mut self, head: InstrId, name: Option<String>) -> FuncId {
        let id = FuncId(self.next_func);
        self.next_func += 1;
        self.functions
            .insert(id, FunctionRecord { id, head, members: BTreeSet::new(), name });
        id
    }

    /// Allocates a data object.
    pub fn alloc_object(&mut self, vaddr: u32, bytes: Vec<u8>) -> ObjId {
        let id = ObjId(self.next_obj);
        self.next_obj += 1;
        self.data_objects.insert(id, DataObject { id, vaddr, bytes });
        id
    }

    pub fn record(&self, id: InstrId) -> &InstructionRecord {
        &self.records[&id]
    }

    pub fn record_mut(&mut self, id: InstrId) -> &mut InstructionRecord {
        self.records.get_mut(&id).expect("record id")
    }

    /// Pins `id` at `addr`, keeping the pin map in sync.
    pub fn pin(&mut self, id: InstrId, addr: u32) {
        self.record_mut(id).pinned_at = Some(addr);
        self.pins.insert(addr, id);
    }

    /// Functions whose member set contains `id`, in id order.
    pub fn functions_containing(&self, id: InstrId) -> Vec<FuncId> {
        self.functions.values().filter(|f| f.members.contains(&id)).map(|f| f.id).collect()
    }

    /// Moves the payload of `x` (instruction, links, provenance) onto a fresh
    /// record and returns it. `x` itself keeps its identity, pin, and
    /// function membership, but its instruction and links are left for the
    /// caller to rewrite — every existing reference to `x` (branches, pins,
    /// the entry record, relocation referents) now enters whatever the caller
    /// builds in front of the displaced instruction. A relocation whose
    /// *site* is `x` follows the immediate-carrying instruction onto the new
    /// record.
    pub fn displace(&mut self, x: InstrId) -> InstrId {
        let old = self.record(x).clone();
        let y = self.alloc_record(old.instr);
        {
            let yr = self.record_mut(y);
            yr.target = old.target;
            yr.fallthrough = old.fallthrough;
            yr.original_address = old.original_address;
            yr.function = old.function;
        }
        for f in self.functions_containing(x) {
            self.functions.get_mut(&f).unwrap().members.insert(y);
        }
        for reloc in &mut self.relocations {
            if reloc.site == (RelocSite::InstrImm { record: x }) {
                reloc.site = RelocSite::InstrImm { record: y };
            }
        }
        let xr = self.record_mut(x);
        xr.original_address = None;
        y
    }

    /// Inserts straight-line code in front of `x`: after the call, executing
    /// from the program point that was `x` runs `instrs` and then the
    /// original instruction. Returns the displaced original record.
    pub fn insert_before(&mut self, x: InstrId, instrs: &[Instr]) -> InstrId {
        assert!(!instrs.is_empty(), "insert_before with empty sequence");
        let y = self.displace(x);
        let function = self.record(y).function;
        let mut chain = Vec::with_capacity(instrs.len());
        chain.push(x);
        for instr in &instrs[1..] {
            chain.push(self.alloc_record(*instr));
        }
        for (i, &id) in chain.iter().enumerate() {
            let next = chain.get(i + 1).copied().unwrap_or(y);
            let r = self.record_mut(id);
            if i == 0 {
                r.instr = instrs[0];
            }
            r.target = None;
            r.fallthrough = Some(next);
            r.function = function;
        }
        for f in self.functions_containing(x) {
            let members = &mut self.functions.get_mut(&f).unwrap().members;
            for &id in &chain {
                members.insert(id);
            }
        }
        y
    }

    /// Record ids in ascending order.
    pub fn record_ids(&self) -> Vec<InstrId> {
        self.records.keys().copied().collect()
    }

    /// Restores the id counters after a load.
    pub(crate) fn rebuild_counters(&mut self) {
        self.next_instr = self.records.keys().map(|i| i.0 + 1).max().unwrap_or(0);
        self.next_func = self.functions.keys().map(|i| i.0 + 1).max().unwrap_or(0);
        self.next_obj = self.data_objects.keys().map(|i| i.0 + 1).max().unwrap_or(0);
    }
}

/// One problem found by [`validate`].
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Violation {
    pub record: Option<InstrId>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.record {
            Some(id) => write!(f, "record {id}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

fn violation(record: Option<InstrId>, message: impl Into<String>) -> Violation {
    Violation { record, message: message.into() }
}

/// Checks the structural invariants of the database and reports every
/// violation found. An empty report is the precondition for emitting.
///
/// Checked: link-shape per instruction class (unconditional transfers never
/// fall through, calls and conditional branches resolve both edges,
/// non-control records fall through), call fallthroughs pinned, pin
/// uniqueness and pin-map consistency, id resolution everywhere, function
/// membership connectivity, and relocation sites in range.
pub fn validate(ir: &ProgramIR) -> Vec<Violation> {
    let mut out = Vec::new();
    let exists = |id: InstrId| ir.records.contains_key(&id);

    for rec in ir.records.values() {
        let i = &rec.instr;
        let id = rec.id;
        if let Some(t) = rec.target {
            if !exists(t) {
                out.push(violation(Some(id), format!("target {t} does not resolve")));
            }
        }
        if let Some(ft) = rec.fallthrough {
            if !exists(ft) {
                out.push(violation(Some(id), format!("fallthrough {ft} does not resolve")));
            }
        }
        let is_uncond = i.is_unconditional_transfer();
        if is_uncond && rec.fallthrough.is_some() {
            out.push(violation(Some(id), format!("`{i}` must not fall through")));
        }
        match i {
            Instr::Jmp { .. } => {
                if rec.target.is_none() {
                    out.push(violation(Some(id), "jump without target identity"));
                }
            }
            Instr::Br { .. } => {
                if rec.target.is_none() || rec.fallthrough.is_none() {
                    out.push(violation(Some(id), "conditional branch needs target and fallthrough"));
                }
            }
            Instr::Call { .. } => {
                if rec.target.is_none() || rec.fallthrough.is_none() {
                    out.push(violation(Some(id), "call needs target and fallthrough"));
                } else if let Some(ft) = rec.fallthrough {
                    if exists(ft) && ir.record(ft).pinned_at.is_none() {
                        out.push(violation(
                            Some(id),
                            format!("call fallthrough {ft} is not pinned (return addresses are pinned)"),
                        ));
                    }
                }
            }
            Instr::CallR { .. } => {
                if rec.target.is_some() {
                    out.push(violation(Some(id), "register call cannot have a static target"));
                }
                if rec.fallthrough.is_none() {
                    out.push(violation(Some(id), "register call needs a fallthrough"));
                } else if let Some(ft) = rec.fallthrough {
                    if exists(ft) && ir.record(ft).pinned_at.is_none() {
                        out.push(violation(
                            Some(id),
                            format!("call fallthrough {ft} is not pinned (return addresses are pinned)"),
                        ));
                    }
                }
            }
            Instr::JmpR { .. } | Instr::Ret | Instr::Halt => {
                if rec.target.is_some() {
                    out.push(violation(Some(id), format!("`{i}` cannot have a static target")));
                }
            }
            _ => {
                if rec.target.is_some() {
                    out.push(violation(Some(id), format!("non-control `{i}` cannot have a target")));
                }
                if rec.fallthrough.is_none() {
                    out.push(violation(Some(id), format!("non-control `{i}` must fall through")));
                }
            }
        }
        if let Some(f) = rec.function {
            match ir.functions.get(&f) {
                None => out.push(violation(Some(id), format!("function {f} does not resolve"))),
                Some(fr) => {
                    if !fr.members.contains(&id) {
                        out.push(violation(Some(id), format!("not a member of its function {f}")));
                    }
                }
            }
        }
    }

    // Pins: unique per record, consistent with the map, entry pinned.
    let mut seen_pins: BTreeMap<u32, InstrId> = BTreeMap::new();
    for rec in ir.records.values() {
        if let Some(addr) = rec.pinned_at {
            if let Some(&prev) = seen_pins.get(&addr) {
                out.push(violation(
                    Some(rec.id),
                    format!("pinned at {addr:#010x}, already claimed by record {prev}"),
                ));
            } else {
                seen_pins.insert(addr, rec.id);
            }
            if ir.pins.get(&addr) != Some(&rec.id) {
                out.push(violation(Some(rec.id), format!("pin map out of sync at {addr:#010x}")));
            }
        }
    }
    for (&addr, &id) in &ir.pins {
        if !exists(id) {
            out.push(violation(None, format!("pin {addr:#010x} references missing record {id}")));
        } else if ir.record(id).pinned_at != Some(addr) {
            out.push(violation(Some(id), format!("pin map claims {addr:#010x} but record disagrees")));
        }
    }
    if !exists(ir.entry_record) {
        out.push(violation(None, "entry record does not resolve"));
    } else if ir.record(ir.entry_record).pinned_at != Some(ir.entry_addr) {
        out.push(violation(Some(ir.entry_record), "entry record is not pinned at the entry address"));
    }

    // Functions: heads and members resolve, members connected from the head
    // without traversing call-target edges.
    for f in ir.functions.values() {
        if !f.members.contains(&f.head) {
            out.push(violation(None, format!("function {}: head {} not in members", f.id, f.head)));
            continue;
        }
        let mut missing = false;
        for &m in &f.members {
            if !exists(m) {
                out.push(violation(None, format!("function {}: member {m} does not resolve", f.id)));
                missing = true;
            }
        }
        if missing {
            continue;
        }
        let mut seen: BTreeSet<InstrId> = BTreeSet::new();
        let mut queue = VecDeque::from([f.head]);
        seen.insert(f.head);
        while let Some(id) = queue.pop_front() {
            let rec = ir.record(id);
            let push = |next: Option<InstrId>, seen: &mut BTreeSet<InstrId>, queue: &mut VecDeque<InstrId>| {
                if let Some(n) = next {
                    if f.members.contains(&n) && seen.insert(n) {
                        queue.push_back(n);
                    }
                }
            };
            push(rec.fallthrough, &mut seen, &mut queue);
            if !rec.instr.is_call() {
                push(rec.target, &mut seen, &mut queue);
            }
        }
        for &m in &f.members {
            if !seen.contains(&m) {
                out.push(violation(
                    Some(m),
                    format!("function {}: member unreachable from head {}", f.id, f.head),
                ));
            }
        }
    }

    // Relocations.
    for (n, reloc) in ir.relocations.iter().enumerate() {
        if !exists(reloc.referent) {
            out.push(violation(None, format!("relocation {n}: referent {} missing", reloc.referent)));
        }
        match reloc.site {
            RelocSite::Data { object, offset } => match ir.data_objects.get(&object) {
                None => out.push(violation(None, format!("relocation {n}: object {object} missing"))),
                Some(obj) => {
                    if offset as usize + 4 > obj.bytes.len() {
                        out.push(violation(
                            None,
                            format!("relocation {n}: site offset {offset} out of range"),
                        ));
                    }
                }
            },
            RelocSite::InstrImm { record } => {
                if !exists(record) {
                    out.push(violation(None, format!("relocation {n}: site record {record} missing")));
                } else {
                    let ok = matches!(
                        ir.record(record).instr,
                        Instr::Movi { .. } | Instr::AluImm { .. } | Instr::Cmpi { .. }
                    );
                    if !ok {
                        out.push(violation(
                            Some(record),
                            format!("relocation {n}: site has no 32-bit immediate"),
                        ));
                    }
                }
            }
        }
    }

    out
}
