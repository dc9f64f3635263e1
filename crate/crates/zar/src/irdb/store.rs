//! Saving and loading the IR database.
//!
//! The on-disk form is line-oriented text, one record per line, so diffs of
//! two databases are meaningful and saves are byte-deterministic (all
//! containers iterate in key order). Grammar, one line kind per row:
//!
//! ```text
//! IRDB v1
//! meta ts=<dec> seed=<dec|-> src=<rest of line>
//! text base=<hex> size=<hex>
//! entry rec=<id> addr=<hex>
//! inst <id> enc=<hexbytes> addr=<hex|-> tgt=<id|-> fall=<id|-> pin=<hex|-> fn=<id|->
//! func <id> head=<id> name=<token|-> members=<id,id,...>
//! data <id> vaddr=<hex> bytes=<hexbytes|->
//! reloc data site=<objid>:<offset> ref=<id>
//! reloc imm site=<id> ref=<id>
//! ```
//!
//! Instructions are stored as their canonical machine encoding, so the
//! instruction codec is the single source of truth for operand shapes.
//! Loading rejects version mismatches, malformed lines, danging identities,
//! and duplicate pins.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use super::{
    DataObject, FuncId, FunctionRecord, InstrId, InstructionRecord, ObjId, ProgramIR, RelocSite,
    Relocation,
};
use crate::isa::{self, Instr};

/// Errors from [`load`].
#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported database version: expected `IRDB v1`, found `{0}`")]
    Version(String),
    #[error("line {line}: instruction does not decode: {source}")]
    BadInstruction {
        line: usize,
        #[source]
        source: isa::DecodeError,
    },
    #[error("dangling identity: {0}")]
    Dangling(String),
    #[error("duplicate pin at {0:#010x}")]
    DuplicatePin(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn hex_bytes(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// Serializes the database. Byte-identical output for equal databases.
pub fn save(ir: &ProgramIR) -> String {
    let mut out = String::new();
    out.push_str("IRDB v1\n");
    let seed = ir.metadata.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
    writeln!(out, "meta ts={} seed={} src={}", ir.metadata.timestamp, seed, ir.metadata.source)
        .unwrap();
    writeln!(out, "text base={:#x} size={:#x}", ir.text_base, ir.text_size).unwrap();
    writeln!(out, "entry rec={} addr={:#x}", ir.entry_record, ir.entry_addr).unwrap();

    let opt_id = |id: Option<InstrId>| id.map(|i| i.to_string()).unwrap_or_else(|| "-".into());
    let opt_hex = |v: Option<u32>| v.map(|v| format!("{v:#x}")).unwrap_or_else(|| "-".into());
    for rec in ir.records.values() {
        writeln!(
            out,
            "inst {} enc={} addr={} tgt={} fall={} pin={} fn={}",
            rec.id,
            hex_bytes(&rec.instr.encode()),
            opt_hex(rec.original_address),
            opt_id(rec.target),
            opt_id(rec.fallthrough),
            opt_hex(rec.pinned_at),
            rec.function.map(|f| f.to_string()).unwrap_or_else(|| "-".into()),
        )
        .unwrap();
    }
    for f in ir.functions.values() {
        let members: Vec<String> = f.members.iter().map(|m| m.to_string()).collect();
        writeln!(
            out,
            "func {} head={} name={} members={}",
            f.id,
            f.head,
            f.name.as_deref().unwrap_or("-"),
            members.join(","),
        )
        .unwrap();
    }
    for obj in ir.data_objects.values() {
        let bytes = if obj.bytes.is_empty() { "-".into() } else { hex_bytes(&obj.bytes) };
        writeln!(out, "data {} vaddr={:#x} bytes={}", obj.id, obj.vaddr, bytes).unwrap();
    }
    for reloc in &ir.relocations {
        match reloc.site {
            RelocSite::Data { object, offset } => {
                writeln!(out, "reloc data site={object}:{offset} ref={}", reloc.referent).unwrap()
            }
            RelocSite::InstrImm { record } => {
                writeln!(out, "reloc imm site={record} ref={}", reloc.referent).unwrap()
            }
        }
    }
    out
}

struct Parser<'a> {
    line_no: usize,
    line: &'a str,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: impl Into<String>) -> StoreError {
        StoreError::Parse { line: self.line_no, msg: msg.into() }
    }

    /// Consumes `key=` and returns the value token.
    fn field(&self, token: Option<&'a str>, key: &str) -> Result<&'a str, StoreError> {
        let token = token.ok_or_else(|| self.err(format!("missing field `{key}`")))?;
        token
            .strip_prefix(key)
            .and_then(|rest| rest.strip_prefix('='))
            .ok_or_else(|| self.err(format!("expected `{key}=...`, found `{token}`")))
    }

    fn u64(&self, s: &str) -> Result<u64, StoreError> {
        s.parse().map_err(|_| self.err(format!("bad number `{s}`")))
    }

    fn hex(&self, s: &str) -> Result<u32, StoreError> {
        let digits = s
            .strip_prefix("0x")
            .ok_or_else(|| self.err(format!("expected hex literal, found `{s}`")))?;
        u32::from_str_radix(digits, 16).map_err(|_| self.err(format!("bad hex `{s}`")))
    }

    fn opt<T>(
        &self,
        s: &str,
        f: impl FnOnce(&Self, &str) -> Result<T, StoreError>,
    ) -> Result<Option<T>, StoreError> {
        if s == "-" { Ok(None) } else { f(self, s).map(Some) }
    }

    fn bytes(&self, s: &str) -> Result<Vec<u8>, StoreError> {
        if s.len() % 2 != 0 {
            return Err(self.err("odd-length byte string"));
        }
        (0..s.len() / 2)
            .map(|i| {
                u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                    .map_err(|_| self.err(format!("bad byte string `{s}`")))
            })
            .collect()
    }
}

/// Parses a database produced by [`save`].
pub fn load(text: &str) -> Result<ProgramIR, StoreError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(StoreError::Version(String::new()))?;
    if header.trim_end() != "IRDB v1" {
        return Err(StoreError::Version(header.to_string()));
    }

    let mut ir = ProgramIR::new(0, 0, 0);
    for (idx, line) in lines {
        let p = Parser { line_no: idx + 1, line };
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut tok = line.split_ascii_whitespace();
        match tok.next().unwrap() {
            "meta" => {
                ir.metadata.timestamp = p.u64(p.field(tok.next(), "ts")?)?;
                ir.metadata.seed = p.opt(p.field(tok.next(), "seed")?, |p, s| p.u64(s))?;
                // `src` may contain spaces: take the rest of the raw line.
                let src = p
                    .line
                    .split_once("src=")
                    .ok_or_else(|| p.err("missing field `src`"))?
                    .1;
                ir.metadata.source = src.trim_end().to_string();
            }
            "text" => {
                ir.text_base = p.hex(p.field(tok.next(), "base")?)?;
                ir.text_size = p.hex(p.field(tok.next(), "size")?)?;
            }
            "entry" => {
                ir.entry_record = InstrId(p.u64(p.field(tok.next(), "rec")?)?);
                ir.entry_addr = p.hex(p.field(tok.next(), "addr")?)?;
            }
            "inst" => {
                let id = InstrId(p.u64(tok.next().ok_or_else(|| p.err("missing record id"))?)?);
                let enc = p.bytes(p.field(tok.next(), "enc")?)?;
                let (instr, len) = Instr::decode(&enc, 0)
                    .map_err(|source| StoreError::BadInstruction { line: p.line_no, source })?;
                if len != enc.len() {
                    return Err(p.err("trailing bytes after instruction"));
                }
                let rec = InstructionRecord {
                    id,
                    instr,
                    original_address: p.opt(p.field(tok.next(), "addr")?, |p, s| p.hex(s))?,
                    target: p
                        .opt(p.field(tok.next(), "tgt")?, |p, s| p.u64(s))?
                        .map(InstrId),
                    fallthrough: p
                        .opt(p.field(tok.next(), "fall")?, |p, s| p.u64(s))?
                        .map(InstrId),
                    pinned_at: p.opt(p.field(tok.next(), "pin")?, |p, s| p.hex(s))?,
                    function: p.opt(p.field(tok.next(), "fn")?, |p, s| p.u64(s))?.map(FuncId),
                };
                if ir.records.insert(id, rec).is_some() {
                    return Err(p.err(format!("duplicate record id {id}")));
                }
            }
            "func" => {
                let id = FuncId(p.u64(tok.next().ok_or_else(|| p.err("missing function id"))?)?);
                let head = InstrId(p.u64(p.field(tok.next(), "head")?)?);
                let name = p.opt(p.field(tok.next(), "name")?, |_, s| Ok(s.to_string()))?;
                let mut members = BTreeSet::new();
                let list = p.field(tok.next(), "members")?;
                if !list.is_empty() {
                    for m in list.split(',') {
                        members.insert(InstrId(p.u64(m)?));
                    }
                }
                if ir.functions.insert(id, FunctionRecord { id, head, members, name }).is_some() {
                    return Err(p.err(format!("duplicate function id {id}")));
                }
            }
            "data" => {
                let id = ObjId(p.u64(tok.next().ok_or_else(|| p.err("missing object id"))?)?);
                let vaddr = p.hex(p.field(tok.next(), "vaddr")?)?;
                let bytes =
                    p.opt(p.field(tok.next(), "bytes")?, |p, s| p.bytes(s))?.unwrap_or_default();
                if ir.data_objects.insert(id, DataObject { id, vaddr, bytes }).is_some() {
                    return Err(p.err(format!("duplicate object id {id}")));
                }
            }
            "reloc" => {
                let kind = tok.next().ok_or_else(|| p.err("missing relocation kind"))?;
                let site = p.field(tok.next(), "site")?;
                let referent = InstrId(p.u64(p.field(tok.next(), "ref")?)?);
                let site = match kind {
                    "data" => {
                        let (obj, off) =
                            site.split_once(':').ok_or_else(|| p.err("expected `obj:offset`"))?;
                        RelocSite::Data {
                            object: ObjId(p.u64(obj)?),
                            offset: p.u64(off)? as u32,
                        }
                    }
                    "imm" => RelocSite::InstrImm { record: InstrId(p.u64(site)?) },
                    other => return Err(p.err(format!("unknown relocation kind `{other}`"))),
                };
                ir.relocations.push(Relocation { site, referent });
            }
            other => return Err(p.err(format!("unknown line kind `{other}`"))),
        }
    }

    // Rebuild the pin map and reject duplicate pins.
    for rec in ir.records.values() {
        if let Some(addr) = rec.pinned_at {
            if ir.pins.insert(addr, rec.id).is_some() {
                return Err(StoreError::DuplicatePin(addr));
            }
        }
    }

    // Every identity mentioned anywhere must resolve.
    let check_rec = |id: InstrId, what: &str| {
        if ir.records.contains_key(&id) {
            Ok(())
        } else {
            Err(StoreError::Dangling(format!("{what} references record {id}")))
        }
    };
    check_rec(ir.entry_record, "entry")?;
    for rec in ir.records.values() {
        if let Some(t) = rec.target {
            check_rec(t, &format!("record {}", rec.id))?;
        }
        if let Some(f) = rec.fallthrough {
            check_rec(f, &format!("record {}", rec.id))?;
        }
        if let Some(f) = rec.function {
            if !ir.functions.contains_key(&f) {
                return Err(StoreError::Dangling(format!("record {} references function {f}", rec.id)));
            }
        }
    }
    for f in ir.functions.values() {
        check_rec(f.head, &format!("function {}", f.id))?;
        for &m in &f.members {
            check_rec(m, &format!("function {}", f.id))?;
        }
    }
    for (n, reloc) in ir.relocations.iter().enumerate() {
        check_rec(reloc.referent, &format!("relocation {n}"))?;
        match reloc.site {
            RelocSite::Data { object, .. } => {
                if !ir.data_objects.contains_key(&object) {
                    return Err(StoreError::Dangling(format!("relocation {n} references object {object}")));
                }
            }
            RelocSite::InstrImm { record } => check_rec(record, &format!("relocation {n}"))?,
        }
    }

    ir.rebuild_counters();
    Ok(ir)
}

/// [`save`] to a file.
pub fn save_file(ir: &ProgramIR, path: impl AsRef<Path>) -> Result<(), StoreError> {
    std::fs::write(path, save(ir))?;
    Ok(())
}

/// [`load`] from a file.
pub fn load_file(path: impl AsRef<Path>) -> Result<ProgramIR, StoreError> {
    load(&std::fs::read_to_string(path)?)
}
