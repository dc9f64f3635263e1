//! The ZXE executable container: a flat little-endian image holding an entry
//! point and a list of sections, each mapped at a fixed virtual address.
//!
//! Layout: magic `"ZXE1"`, `u16` version (currently 1), `u16` reserved zero,
//! `u32` entry, `u32` section count, then per section a 12-byte header
//! (`u8` kind, `u8` flags = 0, `u16` pad = 0, `u32` vaddr, `u32` size)
//! followed immediately by `size` raw bytes. Version 1 images carry exactly
//! one text section; the entry point must lie inside it.

use std::fs;
use std::io;
use std::path::Path;

/// File magic, the first four bytes of every image.
pub const MAGIC: [u8; 4] = *b"ZXE1";

/// Container format version emitted and accepted by this crate.
pub const VERSION: u16 = 1;

/// What a section holds.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SectionKind {
    /// Executable code. Exactly one per image; write-protected at run time.
    Text,
    /// Initialized read-write data.
    Data,
}

impl SectionKind {
    fn to_byte(self) -> u8 {
        match self {
            SectionKind::Text => 1,
            SectionKind::Data => 2,
        }
    }

    fn from_byte(b: u8) -> Option<SectionKind> {
        match b {
            1 => Some(SectionKind::Text),
            2 => Some(SectionKind::Data),
            _ => None,
        }
    }
}

/// One mapped section.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Section {
    pub kind: SectionKind,
    pub vaddr: u32,
    pub bytes: Vec<u8>,
}

impl Section {
    pub fn text(vaddr: u32, bytes: Vec<u8>) -> Section {
        Section { kind: SectionKind::Text, vaddr, bytes }
    }

    pub fn data(vaddr: u32, bytes: Vec<u8>) -> Section {
        Section { kind: SectionKind::Data, vaddr, bytes }
    }

    /// The half-open address range `[vaddr, vaddr + len)`.
    pub fn range(&self) -> (u32, u32) {
        (self.vaddr, self.vaddr + self.bytes.len() as u32)
    }
}

/// A validated executable image.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Executable {
    pub entry: u32,
    pub sections: Vec<Section>,
}

/// Structural problems in an image or its serialized form.
#[derive(Clone, PartialEq, Eq, Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic: expected \"ZXE1\"")]
    BadMagic,
    #[error("unsupported container version {0} (expected {VERSION})")]
    Version(u16),
    #[error("reserved header field is not zero")]
    ReservedNotZero,
    #[error("image truncated while reading {0}")]
    Truncated(&'static str),
    #[error("section {index} has unknown kind {kind:#04x}")]
    BadKind { index: usize, kind: u8 },
    #[error("section {index} has nonzero flags/pad")]
    BadSectionHeader { index: usize },
    #[error("section {index} wraps past the end of the address space")]
    AddressWrap { index: usize },
    #[error("sections {a} and {b} overlap")]
    Overlap { a: usize, b: usize },
    #[error("image must contain exactly one text section")]
    TextCount,
    #[error("entry {entry:#010x} lies outside the text section")]
    EntryOutsideText { entry: u32 },
}

impl Executable {
    /// Builds and validates an executable.
    pub fn new(entry: u32, sections: Vec<Section>) -> Result<Executable, ContainerError> {
        let exe = Executable { entry, sections };
        exe.validate()?;
        Ok(exe)
    }

    /// Checks the version-1 invariants: one text section, non-overlapping
    /// section ranges, no address wrap-around, entry inside text.
    pub fn validate(&self) -> Result<(), ContainerError> {
        let mut text_count = 0;
        for (index, s) in self.sections.iter().enumerate() {
            if s.vaddr.checked_add(s.bytes.len() as u32).is_none() {
                return Err(ContainerError::AddressWrap { index });
            }
            if s.kind == SectionKind::Text {
                text_count += 1;
            }
        }
        if text_count != 1 {
            return Err(ContainerError::TextCount);
        }
        for a in 0..self.sections.len() {
            for b in a + 1..self.sections.len() {
                let (a0, a1) = self.sections[a].range();
                let (b0, b1) = self.sections[b].range();
                if a0 < b1 && b0 < a1 && a1 > a0 && b1 > b0 {
                    return Err(ContainerError::Overlap { a, b });
                }
            }
        }
        let text = self.text();
        let (t0, t1) = text.range();
        if !(self.entry >= t0 && self.entry < t1) {
            return Err(ContainerError::EntryOutsideText { entry: self.entry });
        }
        Ok(())
    }

    /// The unique text section.
    pub fn text(&self) -> &Section {
        self.sections
            .iter()
            .find(|s| s.kind == SectionKind::Text)
            .expect("validated executable has a text section")
    }

    /// All data sections, in image order.
    pub fn data_sections(&self) -> impl Iterator<Item = &Section> {
        self.sections.iter().filter(|s| s.kind == SectionKind::Data)
    }

    /// Serializes the image. Byte-for-byte deterministic.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend(0u16.to_le_bytes());
        out.extend(self.entry.to_le_bytes());
        out.extend((self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.push(s.kind.to_byte());
            out.push(0); // flags
            out.extend(0u16.to_le_bytes()); // pad
            out.extend(s.vaddr.to_le_bytes());
            out.extend((s.bytes.len() as u32).to_le_bytes());
            out.extend(&s.bytes);
        }
        out
    }

    /// Parses and validates an image.
    pub fn from_bytes(bytes: &[u8]) -> Result<Executable, ContainerError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, what: &'static str| -> Result<&[u8], ContainerError> {
            if *pos + n > bytes.len() {
                return Err(ContainerError::Truncated(what));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let u16_at = |s: &[u8]| u16::from_le_bytes([s[0], s[1]]);
        let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]);

        if take(&mut pos, 4, "magic")? != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = u16_at(take(&mut pos, 2, "version")?);
        if version != VERSION {
            return Err(ContainerError::Version(version));
        }
        if u16_at(take(&mut pos, 2, "reserved")?) != 0 {
            return Err(ContainerError::ReservedNotZero);
        }
        let entry = u32_at(take(&mut pos, 4, "entry")?);
        let count = u32_at(take(&mut pos, 4, "section count")?) as usize;
        let mut sections = Vec::new();
        for index in 0..count {
            let header = take(&mut pos, 12, "section header")?;
            let kind = SectionKind::from_byte(header[0])
                .ok_or(ContainerError::BadKind { index, kind: header[0] })?;
            if header[1] != 0 || header[2] != 0 || header[3] != 0 {
                return Err(ContainerError::BadSectionHeader { index });
            }
            let vaddr = u32_at(&header[4..8]);
            let size = u32_at(&header[8..12]) as usize;
            let data = take(&mut pos, size, "section bytes")?;
            sections.push(Section { kind, vaddr, bytes: data.to_vec() });
        }
        Executable::new(entry, sections)
    }

    /// Reads an image from disk.
    pub fn load(path: &Path) -> Result<Executable, LoadError> {
        let bytes = fs::read(path).map_err(|e| LoadError::Io(path.display().to_string(), e))?;
        Executable::from_bytes(&bytes).map_err(LoadError::Container)
    }

    /// Writes the image to disk.
    pub fn save(&self, path: &Path) -> Result<(), LoadError> {
        fs::write(path, self.to_bytes()).map_err(|e| LoadError::Io(path.display().to_string(), e))
    }
}

/// Errors from the file-level load/save wrappers.
#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{0}: {1}")]
    Io(String, io::Error),
    #[error(transparent)]
    Container(#[from] ContainerError),
}
