//! The inter-procedural call graph.
//!
//! Direct calls resolve through their target identity to the function headed
//! there. Register-indirect calls cannot be resolved statically, so they are
//! given edges to *every function whose head is pinned* — exactly the set of
//! addresses indirect control flow can legally reach.

use std::collections::{BTreeMap, BTreeSet};

use crate::irdb::{FuncId, InstrId, ProgramIR};
use crate::isa::Instr;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CallGraph {
    /// Caller -> callees. Every function appears as a key.
    pub edges: BTreeMap<FuncId, BTreeSet<FuncId>>,
}

impl CallGraph {
    pub fn callees(&self, f: FuncId) -> &BTreeSet<FuncId> {
        &self.edges[&f]
    }
}

/// Builds the call graph of the whole database.
pub fn call_graph(ir: &ProgramIR) -> CallGraph {
    let mut head_of: BTreeMap<InstrId, Vec<FuncId>> = BTreeMap::new();
    let mut pinned_heads: BTreeSet<FuncId> = BTreeSet::new();
    for f in ir.functions.values() {
        head_of.entry(f.head).or_default().push(f.id);
        if ir.record(f.head).pinned_at.is_some() {
            pinned_heads.insert(f.id);
        }
    }

    let mut edges: BTreeMap<FuncId, BTreeSet<FuncId>> =
        ir.functions.keys().map(|&f| (f, BTreeSet::new())).collect();
    for f in ir.functions.values() {
        let out = edges.get_mut(&f.id).unwrap();
        for &m in &f.members {
            let rec = ir.record(m);
            match rec.instr {
                Instr::Call { .. } => {
                    if let Some(t) = rec.target {
                        if let Some(heads) = head_of.get(&t) {
                            out.extend(heads.iter().copied());
                        }
                    }
                }
                Instr::CallR { .. } => out.extend(pinned_heads.iter().copied()),
                _ => {}
            }
        }
    }
    CallGraph { edges }
}
