//! Free-space accounting for the output text region.
//!
//! The layout passes carve the original text region — plus an open-ended
//! extension past its end — into allocations. The ledger tracks the remaining
//! free gaps, answers exact, best-fit, and windowed requests, and records
//! every decision in an allocation log so a test can replay the sequence and
//! independently re-check each best-fit choice.

use std::collections::{BTreeMap, BTreeSet};

/// Upper bound for placement addresses. Keeping slack below `u32::MAX` keeps
/// end-of-range arithmetic away from wraparound.
pub const CEILING: u32 = 0xffff_f000;

/// How an allocation was chosen; replayers treat `BestFit` as the entry to
/// re-verify and the others as given.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AllocKind {
    /// Pre-reserved bytes (embedded data runs) that placement must avoid.
    Reserve,
    /// A caller-chosen address (coalesced body, trampoline, plugin choice).
    Exact,
    /// Smallest adequate gap, ties broken toward the lowest address.
    BestFit,
    /// Nearest free run inside a displacement window around a pin.
    Window,
}

/// One allocation, in the order it was made.
#[derive(Clone, Debug)]
pub struct LogEntry {
    pub kind: AllocKind,
    pub start: u32,
    pub len: u32,
    /// Human-readable role, e.g. `"pin 0x1000 coalesce"`.
    pub what: String,
}

/// The set of free gaps over `[text_base, CEILING)`.
///
/// Invariant: gaps are non-empty, sorted, and never touch or overlap; the
/// `(len, start)` mirror always matches the by-address map.
#[derive(Debug)]
pub struct SpaceLedger {
    /// start -> length of each free gap.
    gaps: BTreeMap<u32, u32>,
    /// (length, start) mirror for best-fit queries.
    by_size: BTreeSet<(u32, u32)>,
    text_end: u32,
    /// Highest allocated end address, for sizing the output image.
    high: u32,
    log: Vec<LogEntry>,
}

impl SpaceLedger {
    /// A ledger with everything from `text_base` to the ceiling free. Bytes
    /// past `text_end` are the extension: allocating there grows the output.
    pub fn new(text_base: u32, text_end: u32) -> SpaceLedger {
        assert!(text_base < text_end && text_end < CEILING);
        let mut gaps = BTreeMap::new();
        let mut by_size = BTreeSet::new();
        gaps.insert(text_base, CEILING - text_base);
        by_size.insert((CEILING - text_base, text_base));
        SpaceLedger { gaps, by_size, text_end, high: text_end, log: Vec::new() }
    }

    /// The free gap containing `addr`, if any.
    fn gap_containing(&self, addr: u32) -> Option<(u32, u32)> {
        let (&start, &len) = self.gaps.range(..=addr).next_back()?;
        if addr < start.wrapping_add(len) { Some((start, len)) } else { None }
    }

    /// Number of free bytes starting exactly at `addr` (0 if `addr` is used).
    pub fn free_run_at(&self, addr: u32) -> u32 {
        match self.gap_containing(addr) {
            Some((start, len)) => start + len - addr,
            None => 0,
        }
    }

    /// True when all of `[addr, addr+len)` is free.
    pub fn is_free(&self, addr: u32, len: u32) -> bool {
        len == 0 || self.free_run_at(addr) >= len
    }

    fn remove_gap(&mut self, start: u32, len: u32) {
        self.gaps.remove(&start);
        self.by_size.remove(&(len, start));
    }

    fn add_gap(&mut self, start: u32, len: u32) {
        if len > 0 {
            self.gaps.insert(start, len);
            self.by_size.insert((len, start));
        }
    }

    /// Carves `[start, start+len)` out of the gap that contains it.
    fn carve(&mut self, start: u32, len: u32, kind: AllocKind, what: &str) {
        let (gs, gl) = self.gap_containing(start).expect("carve target must be free");
        assert!(start + len <= gs + gl, "carve overruns its gap");
        self.remove_gap(gs, gl);
        self.add_gap(gs, start - gs);
        self.add_gap(start + len, (gs + gl) - (start + len));
        self.high = self.high.max(start + len);
        self.log.push(LogEntry { kind, start, len, what: what.to_string() });
    }

    /// Reserves a range that placement must never touch. Fails if any byte is
    /// already taken.
    pub fn reserve(&mut self, start: u32, len: u32, what: &str) -> Result<(), String> {
        if len == 0 {
            return Ok(());
        }
        if !self.is_free(start, len) {
            return Err(format!("range {start:#x}+{len} overlaps an existing allocation"));
        }
        self.carve(start, len, AllocKind::Reserve, what);
        Ok(())
    }

    /// Allocates at a caller-chosen address; the caller has already checked
    /// (or must handle) availability.
    pub fn alloc_at(&mut self, start: u32, len: u32, what: &str) -> Result<(), String> {
        if !self.is_free(start, len) {
            return Err(format!("range {start:#x}+{len} is not free"));
        }
        if len > 0 {
            self.carve(start, len, AllocKind::Exact, what);
        }
        Ok(())
    }

    /// Allocates `len` bytes from the smallest adequate gap, breaking ties
    /// toward the lowest start address. The tail gap reaching the ceiling
    /// makes this infallible for any sane length.
    pub fn alloc_best_fit(&mut self, len: u32, what: &str) -> u32 {
        assert!(len > 0);
        let &(_, start) = self
            .by_size
            .range((len, 0)..)
            .next()
            .expect("the extension tail gap can hold any dollop");
        self.carve(start, len, AllocKind::BestFit, what);
        start
    }

    /// Finds `len` free bytes whose start lies in `[lo, hi]`, scanning
    /// outward from `center` (nearest first, ties toward the lower address),
    /// skipping any start that would overlap a 2-byte zone at an address in
    /// `forbidden`. Returns the chosen start.
    pub fn alloc_in_window(
        &mut self,
        len: u32,
        lo: u32,
        hi: u32,
        center: u32,
        forbidden: &BTreeSet<u32>,
        what: &str,
    ) -> Option<u32> {
        let candidate_ok = |s: u32| {
            if !self.is_free(s, len) {
                return false;
            }
            // A forbidden address q owns [q, q+2); overlap with [s, s+len)
            // happens exactly when q is in [s-1, s+len-1].
            let from = s.saturating_sub(1);
            forbidden.range(from..s + len).next().is_none()
        };
        let mut chosen = None;
        for d in 0..=(hi - lo) {
            let below = center.checked_sub(d).filter(|s| *s >= lo);
            let above = center.checked_add(d).filter(|s| *s <= hi && d > 0);
            if let Some(s) = below.filter(|&s| candidate_ok(s)) {
                chosen = Some(s);
                break;
            }
            if let Some(s) = above.filter(|&s| candidate_ok(s)) {
                chosen = Some(s);
                break;
            }
        }
        let s = chosen?;
        self.carve(s, len, AllocKind::Window, what);
        Some(s)
    }

    /// Bytes allocated past the original text end.
    pub fn extension_size(&self) -> u32 {
        self.high.saturating_sub(self.text_end)
    }

    /// Highest allocated end address (at least the original text end).
    pub fn high_water(&self) -> u32 {
        self.high
    }

    /// Free gaps up to the original text end (the tail that runs into the
    /// extension is truncated there), for reporting.
    pub fn gaps_in_text(&self) -> Vec<(u32, u32)> {
        self.gaps
            .iter()
            .filter(|&(&s, _)| s < self.text_end)
            .map(|(&s, &l)| (s, l.min(self.text_end - s)))
            .collect()
    }

    /// Every free gap, including the tail running into the extension.
    pub fn all_gaps(&self) -> Vec<(u32, u32)> {
        self.gaps.iter().map(|(&s, &l)| (s, l)).collect()
    }

    /// Every allocation made, in order.
    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }
}

/// Replays an allocation log from scratch and re-checks every best-fit
/// decision against a linear-scan oracle over the reconstructed gap set.
/// Returns a description of the first violation, if any.
pub fn verify_best_fit_log(text_base: u32, log: &[LogEntry]) -> Option<String> {
    // Reconstructed free set as a sorted gap map, maintained naively.
    let mut gaps: BTreeMap<u32, u32> = BTreeMap::new();
    gaps.insert(text_base, CEILING - text_base);
    for entry in log {
        if entry.kind == AllocKind::BestFit {
            let oracle = gaps
                .iter()
                .filter(|&(_, &l)| l >= entry.len)
                .map(|(&s, &l)| (l, s))
                .min();
            match oracle {
                Some((_, s)) if s == entry.start => {}
                Some((l, s)) => {
                    return Some(format!(
                        "best-fit for {} chose {:#x} but the oracle picks {:#x} (gap len {})",
                        entry.what, entry.start, s, l
                    ));
                }
                None => return Some(format!("best-fit for {} had no adequate gap", entry.what)),
            }
        }
        // Carve the logged range out of the reconstruction.
        let containing = gaps
            .range(..=entry.start)
            .next_back()
            .map(|(&s, &l)| (s, l))
            .filter(|&(s, l)| entry.start < s + l && entry.start + entry.len <= s + l);
        let Some((gs, gl)) = containing else {
            return Some(format!("log entry {} allocates non-free bytes", entry.what));
        };
        gaps.remove(&gs);
        if entry.start > gs {
            gaps.insert(gs, entry.start - gs);
        }
        if gs + gl > entry.start + entry.len {
            gaps.insert(entry.start + entry.len, (gs + gl) - (entry.start + entry.len));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_fit_prefers_smallest_gap_then_lowest_address() {
        let mut l = SpaceLedger::new(0x1000, 0x1100);
        // Carve the region into gaps of 16 (at 0x1000), 8 (at 0x1020), 8 (at
        // 0x1040) and the big tail.
        l.alloc_at(0x1010, 0x10, "wall a").unwrap();
        l.alloc_at(0x1028, 0x18, "wall b").unwrap();
        l.alloc_at(0x1048, 0x100 - 0x48, "wall c").unwrap();
        assert_eq!(l.alloc_best_fit(8, "fits both 8s"), 0x1020);
        assert_eq!(l.alloc_best_fit(8, "next 8"), 0x1040);
        assert_eq!(l.alloc_best_fit(8, "now the 16 at 0x1000"), 0x1000);
        assert!(verify_best_fit_log(0x1000, l.log()).is_none());
    }

    #[test]
    fn tail_gap_serves_oversized_requests_and_counts_as_extension() {
        let mut l = SpaceLedger::new(0x1000, 0x1010);
        let start = l.alloc_best_fit(0x100, "too big for the text region");
        assert_eq!(start, 0x1000, "tail starts at text base while it is empty");
        assert_eq!(l.extension_size(), 0x100 - 0x10);
        assert_eq!(l.high_water(), 0x1100);
    }

    #[test]
    fn free_run_reflects_reservations() {
        let mut l = SpaceLedger::new(0x1000, 0x1100);
        l.reserve(0x1008, 8, "embedded data").unwrap();
        assert_eq!(l.free_run_at(0x1000), 8);
        assert_eq!(l.free_run_at(0x1008), 0);
        assert_eq!(l.free_run_at(0x100f), 0);
        assert!(l.free_run_at(0x1010) > 0);
        assert!(l.reserve(0x100c, 8, "overlap").is_err());
    }

    #[test]
    fn window_scan_walks_outward_nearest_first_with_low_tie() {
        let mut l = SpaceLedger::new(0x1000, 0x2000);
        // Block everything except two 5-byte runs equidistant from center.
        l.alloc_at(0x1000, 0x7b, "low wall").unwrap();
        l.alloc_at(0x1080, 0x5, "between").unwrap();
        l.alloc_at(0x108a, 0x1000 - 0x8a, "high wall").unwrap();
        // Free runs: [0x107b, 0x1080) (5 bytes, starts at center-5) and
        // [0x1085, 0x108a) (5 bytes, starts at center+5). Equidistant from
        // 0x1080: the lower one wins.
        let s = l.alloc_in_window(5, 0x1000, 0x1100, 0x1080, &BTreeSet::new(), "island");
        assert_eq!(s, Some(0x107b));
    }

    #[test]
    fn window_scan_skips_forbidden_pin_zones() {
        let mut l = SpaceLedger::new(0x1000, 0x2000);
        let mut forbidden = BTreeSet::new();
        forbidden.insert(0x1002u32);
        // 0x1000..0x1007 all free, but a future pin at 0x1002 owns bytes
        // 0x1002..0x1004, so a 5-byte run cannot start before 0x1004.
        let s = l.alloc_in_window(5, 0x1000, 0x1100, 0x1000, &forbidden, "island");
        assert_eq!(s, Some(0x1004));
    }

    #[test]
    fn replay_catches_a_forged_best_fit() {
        let mut l = SpaceLedger::new(0x1000, 0x1100);
        l.alloc_at(0x1010, 0x10, "wall").unwrap();
        l.alloc_best_fit(4, "legit");
        let mut log = l.log().to_vec();
        // Pretend the allocator had chosen the tail instead of the small gap.
        log[1].start = 0x2000;
        assert!(verify_best_fit_log(0x1000, &log).is_some());
    }
}
