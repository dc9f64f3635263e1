//! Address assignment: routing every pin and placing every dollop.
//!
//! Pass A walks pins in ascending address order. Each pinned record heads a
//! dollop, and the pin gets the cheapest viable routing:
//!
//!  (a) coalesce — the dollop body is laid down at the pin itself when it
//!      fits in the free run before the next pin or reserved byte; if the
//!      dollop's terminator targets a record pinned exactly at the body's
//!      end, the terminator is dropped entirely (zero-overhead case);
//!  (b) a 5-byte `JMP rel32` trampoline when at least 5 bytes are free;
//!  (c) a 2-byte `JMP rel8` hopping to a 5-byte island within the rel8
//!      displacement window, searched nearest-first around the pin;
//!  (d) otherwise the layout is impossible and the error names the pin and
//!      what it collided with.
//!
//! Pass B places every remaining dollop in ascending first-record order: a
//! layout plugin may propose an address; otherwise the smallest adequate
//! free gap wins (ties toward the lowest address), falling back to the
//! extension past the original text end.

use std::collections::{BTreeMap, BTreeSet};

use super::dollop::DollopSet;
use super::ledger::SpaceLedger;
use super::{LayoutPlugin, RewriteError};
use crate::irdb::{InstrId, ProgramIR};

/// How a pin address is wired to its dollop in the output image.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PinRoute {
    /// The dollop body sits at the pin itself.
    Coalesced {
        /// The synthesized terminator was dropped because its target is
        /// pinned immediately after the body.
        elided: bool,
    },
    /// `JMP rel32` at the pin, straight to the relocated body.
    Long,
    /// `JMP rel8` at the pin to a nearby island holding a `JMP rel32`.
    Short { island_at: u32 },
}

/// One pin's routing decision.
#[derive(Clone, Copy, Debug)]
pub struct RoutedPin {
    pub pin: u32,
    pub head: InstrId,
    pub dollop: usize,
    pub route: PinRoute,
}

/// The finished layout: every record has an address, every pin a route.
#[derive(Debug)]
pub struct Layout {
    pub addr_of: BTreeMap<InstrId, u32>,
    pub dollop_base: Vec<u32>,
    pub routes: Vec<RoutedPin>,
    /// Dollop indices whose terminator is skipped at emission.
    pub elided: BTreeSet<usize>,
    pub ledger: SpaceLedger,
}

/// The rel8 displacement window around a pin: a 2-byte jump at `pin` can
/// reach targets in `[pin - 126, pin + 129]`.
fn rel8_window(pin: u32, floor: u32) -> (u32, u32) {
    (pin.saturating_sub(126).max(floor), pin.saturating_add(129))
}

pub fn place(
    ir: &ProgramIR,
    set: &DollopSet,
    plugin: Option<&dyn LayoutPlugin>,
) -> Result<Layout, RewriteError> {
    let text_end = ir.text_base + ir.text_size;
    let mut ledger = SpaceLedger::new(ir.text_base, text_end);

    // Data runs embedded in the text region keep their bytes in place;
    // nothing may be placed over them.
    for obj in ir.data_objects.values() {
        if obj.vaddr >= ir.text_base && obj.vaddr < text_end {
            ledger
                .reserve(obj.vaddr, obj.bytes.len() as u32, &format!("data run {:?}", obj.id))
                .map_err(|m| RewriteError::Internal(format!("embedded data overlaps: {m}")))?;
        }
    }

    let mut future: BTreeSet<u32> = ir.pins.keys().copied().collect();
    let mut routes = Vec::new();
    let mut elided = BTreeSet::new();
    let mut dollop_base: Vec<Option<u32>> = vec![None; set.dollops.len()];

    // Pass A: route pins in ascending address order.
    for (&pin, &head) in &ir.pins {
        future.remove(&pin);
        let di = *set
            .head_index
            .get(&head)
            .ok_or_else(|| RewriteError::Internal(format!("pinned record {head:?} heads no dollop")))?;
        let next_pin = future.range(pin + 1..).next().copied();
        let mut budget = ledger.free_run_at(pin);
        if let Some(q) = next_pin {
            budget = budget.min(q - pin);
        }

        let body = set.body_len(ir, di);
        let elide = set.dollops[di].terminator.is_some()
            && set.dollops[di]
                .terminator
                .and_then(|t| ir.record(t).pinned_at)
                == Some(pin + body);
        let want = if elide { body } else { set.full_len(ir, di) };

        let route = if want <= budget {
            ledger
                .alloc_at(pin, want, &format!("pin {pin:#x} coalesce"))
                .map_err(RewriteError::Internal)?;
            dollop_base[di] = Some(pin);
            if elide {
                elided.insert(di);
            }
            PinRoute::Coalesced { elided: elide }
        } else if budget >= 5 {
            ledger
                .alloc_at(pin, 5, &format!("pin {pin:#x} long trampoline"))
                .map_err(RewriteError::Internal)?;
            PinRoute::Long
        } else if budget >= 2 {
            ledger
                .alloc_at(pin, 2, &format!("pin {pin:#x} short trampoline"))
                .map_err(RewriteError::Internal)?;
            let (lo, hi) = rel8_window(pin, ir.text_base);
            let island = ledger
                .alloc_in_window(5, lo, hi, pin, &future, &format!("pin {pin:#x} island"))
                .ok_or(RewriteError::PinConflict {
                    pin,
                    obstacle: format!(
                        "no 5-byte island is free in [{lo:#x}, {hi:#x}] clear of later pins"
                    ),
                })?;
            PinRoute::Short { island_at: island }
        } else {
            let obstacle = match next_pin {
                Some(q) if q - pin < 2 => format!("pin {q:#x} leaves only {} byte(s)", q - pin),
                _ => format!("{} free byte(s) before reserved or placed bytes", budget),
            };
            return Err(RewriteError::PinConflict { pin, obstacle });
        };
        routes.push(RoutedPin { pin, head, dollop: di, route });
    }

    // Pass B: place the remaining dollops in ascending first-record order.
    for (di, d) in set.dollops.iter().enumerate() {
        if dollop_base[di].is_some() {
            continue;
        }
        let len = set.full_len(ir, di);
        let what = format!("dollop {di} ({} records)", d.records.len());
        let base = match plugin.and_then(|p| p.propose_placement(d, &ledger.all_gaps())) {
            Some(addr) => {
                ledger
                    .alloc_at(addr, len, &format!("{what} [plugin]"))
                    .map_err(|m| RewriteError::PluginPlacement { addr, len, reason: m })?;
                addr
            }
            None => ledger.alloc_best_fit(len, &what),
        };
        dollop_base[di] = Some(base);
    }

    // Every record now has an address: walk each dollop accumulating
    // widened encoded lengths.
    let mut addr_of = BTreeMap::new();
    let mut bases = Vec::with_capacity(set.dollops.len());
    for (di, d) in set.dollops.iter().enumerate() {
        let base = dollop_base[di].expect("all dollops placed");
        bases.push(base);
        let mut a = base;
        for &r in &d.records {
            addr_of.insert(r, a);
            a += ir.record(r).instr.widened().length() as u32;
        }
    }

    Ok(Layout { addr_of, dollop_base: bases, routes, elided, ledger })
}
